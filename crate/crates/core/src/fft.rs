//! Complex FFTs for the optics stage.
//!
//! Power-of-two lengths use an iterative radix-2 transform; other lengths go
//! through Bluestein's chirp-z reduction onto a power-of-two transform.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    kind: Kind,
}

#[derive(Debug, Clone)]
enum Kind {
    Radix2 { twiddles: Vec<Complex64> },
    Bluestein(alloc::boxed::Box<Bluestein>),
}

#[derive(Debug, Clone)]
struct Bluestein {
    inner: FftPlan,
    chirp: Vec<Complex64>,
    /// Forward transform of the conjugate chirp filter.
    filter_hat: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "fft length must be positive");
        if n.is_power_of_two() {
            let twiddles = (0..n / 2)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
                .collect();
            return Self {
                n,
                kind: Kind::Radix2 { twiddles },
            };
        }
        let m = (2 * n - 1).next_power_of_two();
        let inner = FftPlan::new(m);
        // w_k = exp(-i pi k^2 / n); k^2 reduced mod 2n to keep the angle small.
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                Complex64::from_polar(1.0, -PI * k2 / n as f64)
            })
            .collect();
        let mut filter = vec![Complex64::new(0.0, 0.0); m];
        filter[0] = chirp[0].conj();
        for k in 1..n {
            filter[k] = chirp[k].conj();
            filter[m - k] = chirp[k].conj();
        }
        inner.forward(&mut filter);
        Self {
            n,
            kind: Kind::Bluestein(alloc::boxed::Box::new(Bluestein {
                inner,
                chirp,
                filter_hat: filter,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized forward DFT, `X_k = sum_j x_j exp(-2 pi i jk / n)`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n);
        match &self.kind {
            Kind::Radix2 { twiddles } => radix2(buf, twiddles),
            Kind::Bluestein(b) => {
                let m = b.inner.n;
                let mut a = vec![Complex64::new(0.0, 0.0); m];
                for k in 0..self.n {
                    a[k] = buf[k] * b.chirp[k];
                }
                b.inner.forward(&mut a);
                for (x, f) in a.iter_mut().zip(&b.filter_hat) {
                    *x *= f;
                }
                b.inner.inverse(&mut a);
                for k in 0..self.n {
                    buf[k] = a[k] * b.chirp[k];
                }
            }
        }
    }

    /// Normalized inverse DFT (`inverse(forward(x)) == x`).
    pub fn inverse(&self, buf: &mut [Complex64]) {
        buf.iter_mut().for_each(|v| *v = v.conj());
        self.forward(buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|v| *v = v.conj() * s);
    }
}

fn radix2(buf: &mut [Complex64], twiddles: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Row-major 2-D transform built from two 1-D plans.
#[derive(Debug, Clone)]
pub struct Fft2 {
    rows: FftPlan,
    cols: FftPlan,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows: FftPlan::new(rows),
            cols: FftPlan::new(cols),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.n, self.cols.n)
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false)
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, true)
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = self.shape();
        debug_assert_eq!(buf.len(), h * w);
        for row in buf.chunks_exact_mut(w) {
            if inverse {
                self.cols.inverse(row)
            } else {
                self.cols.forward(row)
            }
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            if inverse {
                self.rows.inverse(&mut col)
            } else {
                self.rows.forward(&mut col)
            }
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|j| x[j] * Complex64::from_polar(1.0, -2.0 * PI * (j * k) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft_all_small_lengths() {
        for n in 1..=40 {
            let x: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()))
                .collect();
            let mut y = x.clone();
            FftPlan::new(n).forward(&mut y);
            let z = naive_dft(&x);
            for (a, b) in y.iter().zip(&z) {
                assert!((a - b).norm() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn inverse_round_trips_2d() {
        let (h, w) = (6, 8);
        let x: Vec<Complex64> = (0..h * w).map(|i| Complex64::new(i as f64, -(i as f64) * 0.5)).collect();
        let plan = Fft2::new(h, w);
        let mut y = x.clone();
        plan.forward(&mut y);
        plan.inverse(&mut y);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).norm() < 1e-9);
        }
    }
}
