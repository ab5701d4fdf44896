//! Full-reference quality metrics on `[C×H×W]` images in `[0, 1]`.

use std::fmt;

use crate::error::{Error, Result};
use crate::sequence::FrameSequence;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1/MSE)` in dB; `+∞` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable valid-mode Gaussian filter of one `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * x[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5, dynamic range 1),
/// averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(Error::Shape {
                shape: s.to_vec(),
                reason: "ssim expects a [C×H×W] image".into(),
            })
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            shape: a.shape().to_vec(),
            reason: format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"),
        });
    }
    let taps = gaussian_taps();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub index: usize,
    /// Capped at [`PSNR_CAP_DB`].
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-frame and sequence-mean PSNR/SSIM.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_frames(pred: &[Tensor], gt: &[Tensor]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Contract(format!(
                "frame count mismatch: {} predicted vs {} ground truth",
                pred.len(),
                gt.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::Contract("no frames to evaluate".into()));
        }
        let per_frame = pred
            .iter()
            .zip(gt)
            .enumerate()
            .map(|(index, (p, g))| {
                Ok(FrameMetrics {
                    index,
                    psnr_db: psnr(p, g)?.min(PSNR_CAP_DB),
                    ssim: ssim(p, g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_frame.len() as f64;
        Ok(Self {
            mean_psnr: per_frame.iter().map(|f| f.psnr_db).sum::<f64>() / n,
            mean_ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
            per_frame,
        })
    }

    pub fn from_sequences(pred: &FrameSequence, gt: &FrameSequence) -> Result<Self> {
        Self::from_frames(pred.frames(), gt.frames())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr_db,ssim\n");
        for f in &self.per_frame {
            s.push_str(&format!("{},{},{}\n", f.index, f.psnr_db, f.ssim));
        }
        s.push_str(&format!("mean,{},{}\n", self.mean_psnr, self.mean_ssim));
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>10} {:>8}", "frame", "PSNR(dB)", "SSIM")?;
        for m in &self.per_frame {
            writeln!(f, "{:>6} {:>10.3} {:>8.4}", m.index, m.psnr_db, m.ssim)?;
        }
        writeln!(f, "{:>6} {:>10.3} {:>8.4}", "mean", self.mean_psnr, self.mean_ssim)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0)).unwrap()
    }

    /// Direct per-window SSIM with an unnormalized 2-D Gaussian.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut g = [[0.0; 11]; 11];
        let mut gs = 0.0;
        for (u, row) in g.iter_mut().enumerate() {
            for (v, x) in row.iter_mut().enumerate() {
                let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
                *x = (-(du * du + dv * dv) / 4.5).exp();
                gs += *x;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..=h - 11 {
                for j in 0..=w - 11 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..11 {
                        for v in 0..11 {
                            let wt = g[u][v] / gs;
                            let (x, y) = (a.at(&[ch, i + u, j + v]), b.at(&[ch, i + u, j + v]));
                            ma += wt * x;
                            mb += wt * y;
                            aa += wt * x * x;
                            bb += wt * y * y;
                            ab += wt * x * y;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    s += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            total += s / ((h - 10) * (w - 10)) as f64;
        }
        total / c as f64
    }

    #[test]
    fn psnr_examples() {
        let a = random(&[3, 8, 8], 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let lo = Tensor::full(&[3, 4, 5], 0.2).unwrap();
        let hi = Tensor::full(&[3, 4, 5], 0.3).unwrap();
        assert!((psnr(&lo, &hi).unwrap() - 20.0).abs() < 1e-6);
        assert!(psnr(&lo, &Tensor::zeros(&[3, 4, 4]).unwrap()).is_err());
    }

    #[test]
    fn psnr_matches_loop_mse() {
        let (a, b) = (random(&[3, 9, 7], 2), random(&[3, 9, 7], 3));
        let mut s = 0.0;
        for c in 0..3 {
            for i in 0..9 {
                for j in 0..7 {
                    s += (a.at(&[c, i, j]) - b.at(&[c, i, j])).powi(2);
                }
            }
        }
        let expected = 10.0 * (1.0 / (s / 189.0)).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let a = random(&[3, 16, 13], 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_black_and_white_constants() {
        let a = Tensor::zeros(&[1, 12, 12]).unwrap();
        let b = Tensor::ones(&[1, 12, 12]).unwrap();
        let (c1, c2) = (1e-4, 9e-4);
        let expected = c1 * c2 / ((1.0 + c1) * c2);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = random(&[2, 14, 15], 5);
        let b = a.map(|v| (v * 0.7 + 0.1).clamp(0.0, 1.0));
        let c = random(&[2, 14, 15], 6);
        for (x, y) in [(&a, &b), (&a, &c)] {
            assert!((ssim(x, y).unwrap() - ssim_oracle(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(&[3, 10, 20]).unwrap();
        assert!(matches!(ssim(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn report_caps_and_averages() {
        let a = random(&[3, 12, 12], 7);
        let b = a.map(|v| (v + 0.05).min(1.0));
        let r = MetricReport::from_frames(&[a.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(r.per_frame[0].psnr_db, PSNR_CAP_DB);
        assert_eq!(r.per_frame[0].ssim, 1.0);
        assert_eq!(r.per_frame[1].psnr_db, psnr(&a, &b).unwrap());
        assert!((r.mean_psnr - (99.0 + r.per_frame[1].psnr_db) / 2.0).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 4);
        assert!(r.to_csv().starts_with("frame,psnr_db,ssim\n0,99,1\n"));
        assert!(MetricReport::from_frames(&[a.clone()], &[]).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let a = random(&[3, 16, 16], 8);
        for seed in 0..5 {
            let mut last = f64::INFINITY;
            for amp in [0.01, 0.03, 0.1, 0.3] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = Tensor::from_fn(a.shape(), |i| a.data()[i] + amp * rng.gen_range(-1.0..1.0)).unwrap();
                let p = psnr(&a, &b).unwrap();
                assert!(p < last);
                last = p;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (random(&[3, 12, 14], s1), random(&[3, 12, 14], s2 + 1000));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn common_shift_keeps_psnr(seed in 0u64..1000, shift in -0.2f64..0.2) {
            let a = random(&[3, 6, 6], seed).map(|v| 0.25 + 0.5 * v);
            let b = random(&[3, 6, 6], seed + 1).map(|v| 0.25 + 0.5 * v);
            let p0 = psnr(&a, &b).unwrap();
            let p1 = psnr(&a.map(|v| v + shift), &b.map(|v| v + shift)).unwrap();
            prop_assert!((p0 - p1).abs() < 1e-9);
        }
    }
}
