//! Under-display-camera degradation: `y = clamp((γ·x) ⊛ k + n)`, with `k` a
//! point spread function applied as a true (flipped-kernel) convolution and
//! `n` heteroscedastic read-shot noise evaluated on the blurred, attenuated
//! signal. Border pixels are replicated before blurring.
//!
//! γ and `k` are held fixed across all frames of a sequence; noise is drawn
//! independently per frame from a stream seeded with `seed ^ frame_index`.

pub mod noise;
pub mod psf;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use noise::{sample_noise, DEFAULT_LAMBDA_READ, DEFAULT_LAMBDA_SHOT};
pub use psf::{make_psf, PsfKind, PsfSpec};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::sequence::FrameSequence;
use crate::tensor::kernels::{self, ConvGeometry, Padding};
use crate::tensor::Tensor;

/// Default attenuation for each PSF family.
pub fn default_gamma(kind: PsfKind) -> f64 {
    match kind {
        PsfKind::Gaussian => 1.0,
        PsfKind::ToledBanded => 0.7,
        PsfKind::PoledHaze => 0.5,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationParams {
    psf: Tensor,
    gamma: f64,
    lambda_read: f64,
    lambda_shot: f64,
    seed: u64,
}

impl DegradationParams {
    pub fn new(psf: Tensor, gamma: f64, lambda_read: f64, lambda_shot: f64, seed: u64) -> Result<Self> {
        if psf.ndim() != 2 {
            return Err(Error::Shape {
                shape: psf.shape().to_vec(),
                reason: "PSF must be 2-D".into(),
            });
        }
        if psf.shape().iter().any(|d| d % 2 == 0) {
            return Err(Error::Config(format!("PSF sides must be odd, got {:?}", psf.shape())));
        }
        if psf.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("PSF entries must be nonnegative".into()));
        }
        if (psf.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("PSF must sum to 1, sums to {}", psf.sum())));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        noise::check_lambdas(lambda_read, lambda_shot)?;
        Ok(Self {
            psf,
            gamma,
            lambda_read,
            lambda_shot,
            seed,
        })
    }

    /// Parameters from a PSF family preset with the default attenuation and noise.
    pub fn preset(kind: PsfKind, seed: u64) -> Result<Self> {
        Self::new(
            make_psf(&PsfSpec::preset(kind))?,
            default_gamma(kind),
            DEFAULT_LAMBDA_READ,
            DEFAULT_LAMBDA_SHOT,
            seed,
        )
    }

    pub fn identity() -> Self {
        Self {
            psf: Tensor::ones(&[1, 1]).expect("static shape"),
            gamma: 1.0,
            lambda_read: 0.0,
            lambda_shot: 0.0,
            seed: 0,
        }
    }

    pub fn psf(&self) -> &Tensor {
        &self.psf
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda_read(&self) -> f64 {
        self.lambda_read
    }

    pub fn lambda_shot(&self) -> f64 {
        self.lambda_shot
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("gamma", self.gamma);
        m.insert("lambda_read", self.lambda_read);
        m.insert("lambda_shot", self.lambda_shot);
        m.insert("seed", self.seed);
        m.insert("psf_rows", self.psf.shape()[0]);
        m.insert("psf_cols", self.psf.shape()[1]);
        let values: Vec<String> = self.psf.data().iter().map(|v| v.to_string()).collect();
        m.insert("psf", values.join(","));
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.reject_unknown(&[
            "gamma",
            "lambda_read",
            "lambda_shot",
            "seed",
            "psf_rows",
            "psf_cols",
            "psf",
        ])?;
        let rows: usize = m.require("psf_rows")?;
        let cols: usize = m.require("psf_cols")?;
        let values = m
            .require::<String>("psf")?
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::parse("psf", e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        Self::new(
            Tensor::new(&[rows, cols], values)?,
            m.require("gamma")?,
            m.require("lambda_read")?,
            m.require("lambda_shot")?,
            m.require("seed")?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::load(path)?)
    }
}

/// True 2-D convolution of every channel of `x[C×H×W]` with `kernel`,
/// replicate-padding the borders so the output keeps the input size.
///
/// This flips the kernel and defers to the cross-correlation loop used by
/// the network's `conv2d`.
pub fn convolve_replicate(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 || kernel.ndim() != 2 {
        return Err(Error::Dimension {
            op: "convolve_replicate",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("kernel sides must be odd, got {kh}x{kw}")));
    }
    if kh > h || kw > w {
        return Err(Error::Config(format!("PSF {kh}x{kw} is larger than the {h}x{w} frame")));
    }
    let (ry, rx) = (kh / 2, kw / 2);
    let (ph, pw) = (h + 2 * ry, w + 2 * rx);
    let mut padded = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..ph {
            let si = (i as isize - ry as isize).clamp(0, h as isize - 1) as usize;
            for j in 0..pw {
                let sj = (j as isize - rx as isize).clamp(0, w as isize - 1) as usize;
                padded.push(plane[si * w + sj]);
            }
        }
    }
    let flipped: Vec<f64> = kernel.data().iter().rev().copied().collect();
    let geo = ConvGeometry::new(c, 1, ph, pw, 1, kh, kw, 1, Padding::default())?;
    let out = kernels::conv2d_forward(&padded, &flipped, None, &geo);
    Tensor::new(&[c, h, w], out)
}

fn check_unit_range(x: &Tensor) -> Result<()> {
    if x.ndim() != 3 {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "frame must be C×H×W".into(),
        });
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("frame values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Degrades one frame, drawing noise from `rng`.
pub fn degrade_frame<R: Rng + ?Sized>(x: &Tensor, p: &DegradationParams, rng: &mut R) -> Result<Tensor> {
    check_unit_range(x)?;
    let attenuated = x.map(|v| p.gamma * v);
    let mut y = convolve_replicate(&attenuated, &p.psf)?;
    if p.lambda_read == 0.0 && p.lambda_shot == 0.0 {
        y.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        return Ok(y);
    }
    for v in y.data_mut() {
        let clean = v.clamp(0.0, 1.0);
        *v = (*v + noise::draw(clean, p.lambda_read, p.lambda_shot, rng)).clamp(0.0, 1.0);
    }
    Ok(y)
}

/// Noise stream used for frame `index` of a sequence.
pub fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Degrades every frame with the same γ and PSF and per-frame noise streams.
pub fn degrade_sequence(frames: &FrameSequence, p: &DegradationParams) -> Result<FrameSequence> {
    let out = frames
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| degrade_frame(f, p, &mut frame_rng(p.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn random_frame(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..=1.0)).unwrap()
    }

    fn delta(size: usize) -> Tensor {
        let mut k = Tensor::zeros(&[size, size]).unwrap();
        k.set(&[size / 2, size / 2], 1.0);
        k
    }

    #[test]
    fn identity_degradation_is_exact() {
        let x = random_frame(9, 7, 1);
        for k in [delta(1), delta(5)] {
            let p = DegradationParams::new(k, 1.0, 0.0, 0.0, 3).unwrap();
            let y = degrade_frame(&x, &p, &mut frame_rng(3, 0)).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn pure_attenuation_halves() {
        let x = random_frame(6, 6, 2);
        let p = DegradationParams::new(delta(3), 0.5, 0.0, 0.0, 0).unwrap();
        let y = degrade_frame(&x, &p, &mut frame_rng(0, 0)).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn true_convolution_flips_the_kernel() {
        // an asymmetric kernel moving mass one pixel to the right
        let mut k = Tensor::zeros(&[3, 3]).unwrap();
        k.set(&[1, 2], 1.0);
        let mut x = Tensor::zeros(&[1, 5, 5]).unwrap();
        x.set(&[0, 2, 2], 1.0);
        let y = convolve_replicate(&x, &k).unwrap();
        // y[i, j] = x[i, j - 1]: the impulse moves right under convolution
        assert_eq!(y.at(&[0, 2, 3]), 1.0);
        assert_eq!(y.sum(), 1.0);
    }

    #[test]
    fn monte_carlo_variance_on_constant_frame() {
        // 3 × 577 × 577 ≈ 10^6 pixel samples
        let x = Tensor::full(&[3, 577, 577], 0.5).unwrap();
        let p = DegradationParams::new(delta(1), 1.0, 1e-4, 2e-4, 11).unwrap();
        let y = degrade_frame(&x, &p, &mut frame_rng(11, 0)).unwrap();
        let n = y.len() as f64;
        let mean = y.mean();
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 1e-4 + 2e-4 * 0.5;
        assert!((var - expected).abs() / expected < 0.05, "variance {var}");
        assert!((mean - 0.5).abs() < 1e-4);
    }

    #[test]
    fn psf_larger_than_frame_is_rejected() {
        let x = random_frame(4, 4, 0);
        let p = DegradationParams::new(make_psf(&PsfSpec::gaussian(7, 1.0)).unwrap(), 1.0, 0.0, 0.0, 0).unwrap();
        assert!(matches!(
            degrade_frame(&x, &p, &mut frame_rng(0, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn params_validate_invariants() {
        let k = delta(3);
        assert!(DegradationParams::new(k.clone(), 0.0, 0.0, 0.0, 0).is_err());
        assert!(DegradationParams::new(k.clone(), 1.1, 0.0, 0.0, 0).is_err());
        assert!(DegradationParams::new(k.clone(), 1.0, -1.0, 0.0, 0).is_err());
        assert!(DegradationParams::new(k.map(|v| v * 2.0), 1.0, 0.0, 0.0, 0).is_err());
        assert!(DegradationParams::new(Tensor::full(&[2, 2], 0.25).unwrap(), 1.0, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn params_round_trip_through_kv() {
        let p = DegradationParams::preset(PsfKind::ToledBanded, 42).unwrap();
        let text = p.to_kv().to_string();
        let back = DegradationParams::from_kv(&KvMap::parse(&text, "t").unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn sequence_semantics() {
        let f = random_frame(8, 8, 4);
        let p = DegradationParams::preset(PsfKind::ToledBanded, 9).unwrap();
        let single = degrade_sequence(&FrameSequence::new(vec![f.clone()]).unwrap(), &p).unwrap();
        assert_eq!(single.frame(0), &degrade_frame(&f, &p, &mut frame_rng(9, 0)).unwrap());

        let quiet = DegradationParams::new(p.psf().clone(), p.gamma(), 0.0, 0.0, 9).unwrap();
        let pair = FrameSequence::new(vec![f.clone(), f.clone()]).unwrap();
        let out = degrade_sequence(&pair, &quiet).unwrap();
        assert_eq!(out.frame(0), out.frame(1));

        let noisy = degrade_sequence(&pair, &p).unwrap();
        assert_ne!(noisy.frame(0), noisy.frame(1));
        // bit-identical reruns
        assert_eq!(noisy, degrade_sequence(&pair, &p).unwrap());
    }

    #[test]
    fn two_draws_differ_only_by_noise() {
        let (lr, ls) = (1e-4, 2e-4);
        let f = Tensor::from_fn(&[3, 200, 200], |i| 0.2 + 0.6 * ((i % 200) as f64 / 199.0)).unwrap();
        let p = DegradationParams::new(make_psf(&PsfSpec::gaussian(3, 1.0)).unwrap(), 0.8, lr, ls, 5).unwrap();
        let clean = DegradationParams::new(p.psf().clone(), 0.8, 0.0, 0.0, 5).unwrap();
        let seq = FrameSequence::new(vec![f.clone(), f.clone()]).unwrap();
        let out = degrade_sequence(&seq, &p).unwrap();
        let yhat = degrade_frame(&f, &clean, &mut frame_rng(0, 0)).unwrap();
        let diffs: Vec<f64> = out
            .frame(0)
            .data()
            .iter()
            .zip(out.frame(1).data())
            .map(|(a, b)| a - b)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        // normalize each difference by its predicted standard deviation
        let z2: f64 = diffs
            .iter()
            .zip(yhat.data())
            .map(|(d, y)| d * d / (2.0 * (lr + ls * y)))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((z2 - 1.0).abs() < 0.05, "normalized variance {z2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn zero_noise_preserves_energy_on_constant_frames(c in 0.0f64..=1.0, gamma in 0.05f64..=1.0, sigma in 0.3f64..3.0) {
            let x = Tensor::full(&[3, 12, 12], c).unwrap();
            let k = make_psf(&PsfSpec::toled(5, sigma, 3, 0.5)).unwrap();
            let p = DegradationParams::new(k, gamma, 0.0, 0.0, 0).unwrap();
            let y = degrade_frame(&x, &p, &mut frame_rng(0, 0)).unwrap();
            prop_assert!((y.mean() - gamma * x.mean()).abs() < 1e-10);
        }

        #[test]
        fn attenuation_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, gamma in 0.05f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let k = make_psf(&PsfSpec::poled(5, 1.0, 0.3)).unwrap();
            let p = DegradationParams::new(k, gamma, 0.0, 0.0, 0).unwrap();
            let ylo = degrade_frame(&Tensor::full(&[3, 8, 8], lo).unwrap(), &p, &mut frame_rng(0, 0)).unwrap();
            let yhi = degrade_frame(&Tensor::full(&[3, 8, 8], hi).unwrap(), &p, &mut frame_rng(0, 0)).unwrap();
            prop_assert!(ylo.data().iter().zip(yhi.data()).all(|(l, h)| l <= h));
        }
    }
}
