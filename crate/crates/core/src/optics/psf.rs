//! Wave-optics PSF synthesis: Zernike wavefront -> pupil -> |DFT|^2 -> crop.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

use super::zernike::zernike;
use crate::error::{Error, Result};
use crate::fft::Fft2;

/// Square, odd-sized convolution kernel, row-major, centre at `(k/2, k/2)`.
/// Entry `(i, j)` weights the offset `(i - k/2, j - k/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    size: usize,
    data: Vec<f64>,
}

impl PsfKernel {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::invalid("kernel_size", "must be odd"));
        }
        if data.len() != size * size {
            return Err(Error::shape("PsfKernel", &[size, size], &[data.len()]));
        }
        Ok(Self { size, data })
    }

    /// Unit impulse at the centre.
    pub fn delta(size: usize) -> Result<Self> {
        let mut data = vec![0.0; size * size];
        data[(size / 2) * size + size / 2] = 1.0;
        Self::new(size, data)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Second central moment `E[|d - mean|^2]` of the kernel as a distribution.
    pub fn second_moment(&self) -> f64 {
        let k = self.size;
        let s = self.sum();
        let (mut my, mut mx) = (0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                my += i as f64 * self.at(i, j);
                mx += j as f64 * self.at(i, j);
            }
        }
        my /= s;
        mx /= s;
        let mut m2 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let (dy, dx) = (i as f64 - my, j as f64 - mx);
                m2 += (dy * dy + dx * dx) * self.at(i, j);
            }
        }
        m2 / s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfConfig {
    pub pupil_samples: usize,
    pub kernel_size: usize,
}

impl Default for PsfConfig {
    fn default() -> Self {
        Self {
            pupil_samples: 64,
            kernel_size: 21,
        }
    }
}

impl PsfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size", "must be odd"));
        }
        if self.pupil_samples < self.kernel_size {
            return Err(Error::invalid("pupil_samples", "must be >= kernel_size"));
        }
        Ok(())
    }
}

/// Pupil sampling shared by every synthesis at one `pupil_samples`: the
/// aperture mask and the Zernike basis evaluated on it.
#[derive(Debug, Clone)]
pub struct PupilBasis {
    n: usize,
    /// Indices of samples inside the unit disk.
    inside: Vec<usize>,
    /// `basis[j][s]` = Noll mode `j + 1` at inside-sample `s`.
    basis: Vec<Vec<f64>>,
    fft: Fft2,
}

impl PupilBasis {
    pub fn new(pupil_samples: usize, modes: usize) -> Result<Self> {
        let n = pupil_samples;
        let half = n as f64 / 2.0;
        let mut inside = Vec::new();
        let mut polar = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let v = (y as f64 + 0.5 - half) / half;
                let u = (x as f64 + 0.5 - half) / half;
                let rho = (u * u + v * v).sqrt();
                if rho <= 1.0 {
                    inside.push(y * n + x);
                    polar.push((rho, v.atan2(u)));
                }
            }
        }
        if inside.is_empty() {
            return Err(Error::invalid("pupil_samples", "pupil has no samples"));
        }
        let basis = (1..=modes)
            .map(|j| polar.iter().map(|&(r, p)| zernike(j, r, p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            inside,
            basis,
            fft: Fft2::new(n, n),
        })
    }

    pub fn modes(&self) -> usize {
        self.basis.len()
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    /// Synthesizes the normalized kernel for `coeffs` (in waves at the
    /// reference wavelength) with the wavefront scaled by `wave_scale`
    /// (`lambda_ref / lambda`).
    pub fn synthesize(&self, coeffs: &[f64], wave_scale: f64, kernel_size: usize) -> Result<(PsfKernel, PsfCache)> {
        if coeffs.len() > self.modes() {
            return Err(Error::invalid("zernike", "more coefficients than basis modes"));
        }
        if kernel_size % 2 == 0 || kernel_size > self.n {
            return Err(Error::invalid("kernel_size", "must be odd and <= pupil_samples"));
        }
        let n = self.n;
        let mut field = vec![Complex64::new(0.0, 0.0); n * n];
        for (s, &idx) in self.inside.iter().enumerate() {
            let w: f64 = coeffs.iter().zip(&self.basis).map(|(c, z)| c * z[s]).sum();
            field[idx] = Complex64::from_polar(1.0, 2.0 * PI * wave_scale * w);
        }
        let pupil = field.clone();
        self.fft.forward(&mut field);

        let k = kernel_size;
        let mut u = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                u[i * k + j] = field[self.bin(i, k) * n + self.bin(j, k)].norm_sqr();
            }
        }
        let total: f64 = u.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("pupil", "all-zero pupil field"));
        }
        let kernel = PsfKernel::new(k, u.iter().map(|v| v / total).collect())?;
        Ok((
            kernel.clone(),
            PsfCache {
                pupil,
                spectrum: field,
                kernel,
                total,
                wave_scale,
                n_coeffs: coeffs.len(),
            },
        ))
    }

    /// DFT bin of crop index `i` (crop centred on zero frequency).
    fn bin(&self, i: usize, k: usize) -> usize {
        let f = i as isize - (k / 2) as isize;
        f.rem_euclid(self.n as isize) as usize
    }

    /// Pulls a kernel cotangent back to the Zernike coefficients.
    pub fn backward(&self, cache: &PsfCache, g_kernel: &[f64]) -> Vec<f64> {
        let k = cache.kernel.size();
        let n = self.n;
        let kd = cache.kernel.data();
        // K = U / S  =>  gU = (gK - <gK, K>) / S
        let inner: f64 = g_kernel.iter().zip(kd).map(|(g, v)| g * v).sum();
        let mut g = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..k {
            for j in 0..k {
                let gu = (g_kernel[i * k + j] - inner) / cache.total;
                let b = self.bin(i, k) * n + self.bin(j, k);
                g[b] = cache.spectrum[b] * gu;
            }
        }
        // H = unnormalized inverse DFT of G
        self.fft.inverse(&mut g);
        let scale = (n * n) as f64;
        let mut out = vec![0.0; cache.n_coeffs];
        for (s, &idx) in self.inside.iter().enumerate() {
            let h = g[idx] * scale;
            let gw = -4.0 * PI * cache.wave_scale * (cache.pupil[idx] * h.conj()).im;
            for (o, z) in out.iter_mut().zip(&self.basis) {
                *o += gw * z[s];
            }
        }
        out
    }
}

/// Forward intermediates needed by [`PupilBasis::backward`].
#[derive(Debug, Clone)]
pub struct PsfCache {
    pupil: Vec<Complex64>,
    spectrum: Vec<Complex64>,
    kernel: PsfKernel,
    total: f64,
    wave_scale: f64,
    n_coeffs: usize,
}

/// One-shot synthesis at unit wave scale.
pub fn synthesize_psf(coeffs: &[f64], pupil_samples: usize, kernel_size: usize) -> Result<PsfKernel> {
    PsfConfig {
        pupil_samples,
        kernel_size,
    }
    .validate()?;
    let basis = PupilBasis::new(pupil_samples, coeffs.len().max(1))?;
    basis.synthesize(coeffs, 1.0, kernel_size).map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_aberration_is_centro_symmetric_with_central_peak() {
        let k = synthesize_psf(&[0.0; 6], 64, 21).unwrap();
        let n = k.size();
        for i in 0..n {
            for j in 0..n {
                assert!((k.at(i, j) - k.at(n - 1 - i, n - 1 - j)).abs() < 1e-15);
            }
        }
        let (argmax, _) = k
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(argmax, (n / 2) * n + n / 2);
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn defocus_spreads_energy() {
        let sharp = synthesize_psf(&[0.0, 0.0, 0.0, 0.0], 64, 21).unwrap();
        let blurred = synthesize_psf(&[0.0, 0.0, 0.0, 1.0], 64, 21).unwrap();
        assert!(blurred.second_moment() > sharp.second_moment());
    }

    #[test]
    fn rejects_even_kernel_and_small_pupil() {
        assert!(synthesize_psf(&[0.0], 64, 20).is_err());
        assert!(synthesize_psf(&[0.0], 15, 21).is_err());
    }

    #[test]
    fn non_power_of_two_pupil_works() {
        let k = synthesize_psf(&[0.0, 0.1, -0.2, 0.3], 45, 15).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(k.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        let basis = PupilBasis::new(32, 6).unwrap();
        let coeffs = [0.05, 0.1, -0.15, 0.3, 0.2, -0.1];
        let k = 9;
        let g: Vec<f64> = (0..k * k).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let f = |c: &[f64]| -> f64 {
            let (ker, _) = basis.synthesize(c, 0.87, k).unwrap();
            ker.data().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = basis.synthesize(&coeffs, 0.87, k).unwrap();
        let analytic = basis.backward(&cache, &g);
        let h = 1e-6;
        for j in 0..coeffs.len() {
            let mut cp = coeffs;
            cp[j] += h;
            let mut cm = coeffs;
            cm[j] -= h;
            let fd = (f(&cp) - f(&cm)) / (2.0 * h);
            assert!((fd - analytic[j]).abs() < 1e-6 * (1.0 + fd.abs()), "mode {j}: {fd} vs {}", analytic[j]);
        }
    }
}
