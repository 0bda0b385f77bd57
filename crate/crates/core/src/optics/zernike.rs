//! Zernike polynomials in Noll's single-index ordering, normalized so that
//! `(1/pi) * integral over the unit disk of Z_j^2 = 1`.

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Radial order `n` and signed azimuthal frequency `m` of Noll index `j`
/// (`m > 0`: cosine term, `m < 0`: sine term).
pub fn noll_to_nm(j: usize) -> Result<(u32, i32)> {
    if j == 0 {
        return Err(Error::invalid("noll_index", "must be >= 1"));
    }
    let mut n = 0usize;
    while j > (n + 1) * (n + 2) / 2 {
        n += 1;
    }
    let k = j - n * (n + 1) / 2 - 1;
    let m_abs = if n % 2 == 0 { 2 * ((k + 1) / 2) } else { 2 * (k / 2) + 1 };
    let m = if m_abs == 0 || j % 2 == 0 {
        m_abs as i32
    } else {
        -(m_abs as i32)
    };
    Ok((n as u32, m))
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Radial polynomial `R_n^|m|(rho)`.
pub fn radial(n: u32, m: u32, rho: f64) -> f64 {
    if (n - m) % 2 == 1 {
        return 0.0;
    }
    let half_sum = (n + m) / 2;
    let half_diff = (n - m) / 2;
    (0..=half_diff)
        .map(|s| {
            let c = factorial(n - s) / (factorial(s) * factorial(half_sum - s) * factorial(half_diff - s));
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            sign * c * rho.powi((n - 2 * s) as i32)
        })
        .sum()
}

/// Value of Noll mode `j` at polar coordinates `(rho, phi)`.
pub fn zernike(j: usize, rho: f64, phi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho", "must lie in [0, 1]"));
    }
    let (n, m) = noll_to_nm(j)?;
    let r = radial(n, m.unsigned_abs(), rho);
    let norm = if m == 0 {
        ((n + 1) as f64).sqrt()
    } else {
        (2.0 * (n + 1) as f64).sqrt()
    };
    Ok(match m {
        0 => norm * r,
        m if m > 0 => norm * r * (m as f64 * phi).cos(),
        m => norm * r * ((-m) as f64 * phi).sin(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn noll_table() {
        let expected = [
            (1, (0, 0)),
            (2, (1, 1)),
            (3, (1, -1)),
            (4, (2, 0)),
            (5, (2, -2)),
            (6, (2, 2)),
            (7, (3, -1)),
            (8, (3, 1)),
            (9, (3, -3)),
            (10, (3, 3)),
            (11, (4, 0)),
            (12, (4, 2)),
            (13, (4, -2)),
            (14, (4, 4)),
            (15, (4, -4)),
        ];
        for (j, nm) in expected {
            assert_eq!(noll_to_nm(j).unwrap(), nm, "j={j}");
        }
    }

    #[test]
    fn piston_and_defocus() {
        assert_eq!(zernike(1, 0.3, 1.1).unwrap(), 1.0);
        assert!((zernike(4, 0.0, 0.0).unwrap() + 3f64.sqrt()).abs() < 1e-15);
        assert!((zernike(4, 1.0, 2.0).unwrap() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rho_outside_disk_is_error() {
        assert!(zernike(4, 1.01, 0.0).is_err());
        assert!(zernike(4, -0.1, 0.0).is_err());
        assert!(zernike(0, 0.5, 0.0).is_err());
    }

    /// Midpoint rule in (rho, phi) with the rho Jacobian.
    fn inner(i: usize, j: usize) -> f64 {
        let (nr, np) = (400, 256);
        let mut acc = 0.0;
        for a in 0..nr {
            let rho = (a as f64 + 0.5) / nr as f64;
            for b in 0..np {
                let phi = 2.0 * PI * (b as f64 + 0.5) / np as f64;
                acc += zernike(i, rho, phi).unwrap() * zernike(j, rho, phi).unwrap() * rho;
            }
        }
        acc * (1.0 / nr as f64) * (2.0 * PI / np as f64) / PI
    }

    #[test]
    fn orthonormal_over_unit_disk() {
        assert!(inner(4, 1).abs() < 1e-3);
        for i in 1..=15 {
            for j in i..=15 {
                let v = inner(i, j);
                if i == j {
                    assert!((v - 1.0).abs() < 1e-3, "norm of {i}: {v}");
                } else {
                    assert!(v.abs() < 1e-3, "<{i},{j}> = {v}");
                }
            }
        }
    }
}
