//! Parametric point spread functions.
//!
//! Three families stand in for measured display PSFs: a plain isotropic
//! Gaussian, a Gaussian with periodic banding along the horizontal axis
//! (TOLED-like), and a narrow Gaussian mixed with a wide uniform disk
//! (POLED-like diffraction haze). Every kernel is nonnegative and sums to 1.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsfKind {
    Gaussian,
    ToledBanded,
    PoledHaze,
}

impl fmt::Display for PsfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsfKind::Gaussian => "gaussian",
            PsfKind::ToledBanded => "toled",
            PsfKind::PoledHaze => "poled",
        })
    }
}

impl FromStr for PsfKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(PsfKind::Gaussian),
            "toled" | "toled_banded" => Ok(PsfKind::ToledBanded),
            "poled" | "poled_haze" => Ok(PsfKind::PoledHaze),
            other => Err(Error::Config(format!("unknown PSF kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsfSpec {
    pub kind: PsfKind,
    /// Odd kernel side length.
    pub size: usize,
    pub sigma: f64,
    /// Band period in pixels (TOLED only).
    pub band_period: usize,
    /// Band modulation depth in [0, 1] (TOLED only).
    pub band_amplitude: f64,
    /// Weight of the haze disk in [0, 1] (POLED only).
    pub haze_weight: f64,
}

impl PsfSpec {
    pub fn gaussian(size: usize, sigma: f64) -> Self {
        Self {
            kind: PsfKind::Gaussian,
            size,
            sigma,
            band_period: 0,
            band_amplitude: 0.0,
            haze_weight: 0.0,
        }
    }

    pub fn toled(size: usize, sigma: f64, band_period: usize, band_amplitude: f64) -> Self {
        Self {
            kind: PsfKind::ToledBanded,
            band_period,
            band_amplitude,
            ..Self::gaussian(size, sigma)
        }
    }

    pub fn poled(size: usize, sigma: f64, haze_weight: f64) -> Self {
        Self {
            kind: PsfKind::PoledHaze,
            haze_weight,
            ..Self::gaussian(size, sigma)
        }
    }

    /// Default knobs for each family.
    pub fn preset(kind: PsfKind) -> Self {
        match kind {
            PsfKind::Gaussian => Self::gaussian(5, 1.0),
            PsfKind::ToledBanded => Self::toled(7, 1.5, 3, 0.5),
            PsfKind::PoledHaze => Self::poled(11, 0.8, 0.3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 {
            return Err(Error::Config(format!("PSF size must be odd, got {}", self.size)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("PSF sigma must be positive, got {}", self.sigma)));
        }
        match self.kind {
            PsfKind::ToledBanded => {
                if self.band_period == 0 {
                    return Err(Error::Config("band_period must be positive".into()));
                }
                if !(0.0..=1.0).contains(&self.band_amplitude) {
                    return Err(Error::Config("band_amplitude must lie in [0, 1]".into()));
                }
            }
            PsfKind::PoledHaze => {
                if !(0.0..=1.0).contains(&self.haze_weight) {
                    return Err(Error::Config("haze_weight must lie in [0, 1]".into()));
                }
            }
            PsfKind::Gaussian => {}
        }
        Ok(())
    }
}

fn normalized(size: usize, mut values: Vec<f64>) -> Result<Tensor> {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("PSF has no positive mass".into()));
    }
    values.iter_mut().for_each(|v| *v /= total);
    Tensor::new(&[size, size], values)
}

fn gaussian_values(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut v = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            v.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    v
}

/// Builds the `size×size` kernel described by `spec`.
pub fn make_psf(spec: &PsfSpec) -> Result<Tensor> {
    spec.validate()?;
    let n = spec.size;
    let c = (n / 2) as f64;
    match spec.kind {
        PsfKind::Gaussian => normalized(n, gaussian_values(n, spec.sigma)),
        PsfKind::ToledBanded => {
            let mut v = gaussian_values(n, spec.sigma);
            for i in 0..n {
                for j in 0..n {
                    let x = j as f64 - c;
                    let band = 1.0 + spec.band_amplitude * (2.0 * PI * x / spec.band_period as f64).cos();
                    v[i * n + j] = (v[i * n + j] * band).max(0.0);
                }
            }
            normalized(n, v)
        }
        PsfKind::PoledHaze => {
            let narrow = normalized(n, gaussian_values(n, spec.sigma))?;
            let radius = n as f64 / 2.0;
            let disk: Vec<f64> = (0..n * n)
                .map(|k| {
                    let (dy, dx) = ((k / n) as f64 - c, (k % n) as f64 - c);
                    if dx * dx + dy * dy <= radius * radius {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let disk = normalized(n, disk)?;
            let w = spec.haze_weight;
            let mixed = narrow
                .data()
                .iter()
                .zip(disk.data())
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect();
            normalized(n, mixed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot90(k: &Tensor) -> Tensor {
        let n = k.shape()[0];
        let mut out = k.clone();
        for i in 0..n {
            for j in 0..n {
                out.set(&[j, n - 1 - i], k.at(&[i, j]));
            }
        }
        out
    }

    #[test]
    fn size_one_gaussian_is_delta() {
        let k = make_psf(&PsfSpec::gaussian(1, 1.0)).unwrap();
        assert_eq!(k.shape(), &[1, 1]);
        assert_eq!(k.data(), &[1.0]);
    }

    #[test]
    fn gaussian_is_normalized_and_rotation_symmetric() {
        let k = make_psf(&PsfSpec::gaussian(5, 1.0)).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(k.max_abs_diff(&rot90(&k)).unwrap() < 1e-15);
    }

    #[test]
    fn toled_column_sums_have_band_period() {
        let (period, amp, sigma) = (3usize, 0.5, 3.0);
        let k = make_psf(&PsfSpec::toled(9, sigma, period, amp)).unwrap();
        let n = 9;
        let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k.at(&[i, j])).sum()).collect();
        // dividing out the Gaussian marginal leaves the pure band pattern
        let g = make_psf(&PsfSpec::gaussian(9, sigma)).unwrap();
        let gcol: Vec<f64> = (0..n).map(|j| (0..n).map(|i| g.at(&[i, j])).sum()).collect();
        let ratio: Vec<f64> = col.iter().zip(&gcol).map(|(a, b)| a / b).collect();
        for j in 0..n - period {
            assert!((ratio[j] - ratio[j + period]).abs() < 1e-12, "{ratio:?}");
        }
        assert!((ratio[4] - ratio[5]).abs() > 0.1);
        // local maxima of the raw column sums sit on the band crests
        let maxima: Vec<usize> = (1..n - 1)
            .filter(|&j| col[j] > col[j - 1] && col[j] > col[j + 1])
            .collect();
        assert_eq!(maxima, vec![1, 4, 7]);
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poled_mixes_haze_and_stays_normalized() {
        let k = make_psf(&PsfSpec::poled(11, 0.8, 0.3)).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(k.data().iter().all(|&v| v >= 0.0));
        // the haze floor reaches the rim of the kernel
        assert!(k.at(&[5, 0]) > 1e-3);
        let pure = make_psf(&PsfSpec::poled(11, 0.8, 0.0)).unwrap();
        assert!(pure.at(&[5, 0]) < 1e-8);
    }

    #[test]
    fn even_size_is_rejected() {
        assert!(matches!(make_psf(&PsfSpec::gaussian(4, 1.0)), Err(Error::Config(_))));
        assert!(make_psf(&PsfSpec::toled(5, 1.0, 0, 0.5)).is_err());
        assert!(make_psf(&PsfSpec::poled(5, 1.0, 1.5)).is_err());
    }

    #[test]
    fn all_presets_are_valid_kernels() {
        for kind in [PsfKind::Gaussian, PsfKind::ToledBanded, PsfKind::PoledHaze] {
            let k = make_psf(&PsfSpec::preset(kind)).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
            assert!(k.data().iter().all(|&v| v >= 0.0));
            assert_eq!(kind.to_string().parse::<PsfKind>().unwrap(), kind);
        }
    }
}
