//! Synthetic moving scenes for tests and desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::psf::PsfKind;
use crate::degradation::{degrade_sequence, DegradationParams};
use crate::error::{Error, Result};
use crate::sequence::FrameSequence;
use crate::tensor::Tensor;
use crate::training::PairedSequence;

struct Blob {
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    radius: f64,
    color: [f64; 3],
    square: bool,
}

/// Soft coverage of a shape at distance `d` outside its edge.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// `frames` RGB frames of a textured background with a few shapes moving
/// at constant velocity. Values stay inside `[0.05, 0.95]`.
pub fn moving_scene(frames: usize, h: usize, w: usize, seed: u64) -> Result<FrameSequence> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::Config("scene needs at least one frame and pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.6));
    let freq: [f64; 2] = std::array::from_fn(|_| rng.gen_range(0.15..0.5));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let blobs: Vec<Blob> = (0..3)
        .map(|i| Blob {
            cy: rng.gen_range(0.2..0.8) * h as f64,
            cx: rng.gen_range(0.2..0.8) * w as f64,
            vy: rng.gen_range(-1.5..1.5),
            vx: rng.gen_range(-1.5..1.5),
            radius: rng.gen_range(0.08..0.18) * h.min(w) as f64,
            color: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
            square: i % 2 == 1,
        })
        .collect();
    let out = (0..frames)
        .map(|t| {
            Tensor::from_fn(&[3, h, w], |idx| {
                let c = idx / (h * w);
                let (y, x) = (((idx / w) % h) as f64, (idx % w) as f64);
                let texture = 0.12 * (freq[0] * x + phase[c]).sin() * (freq[1] * y + phase[(c + 1) % 3]).cos();
                let ramp = 0.15 * (x / w as f64 - y / h as f64);
                let mut v = base[c] + texture + ramp;
                for b in &blobs {
                    let (dy, dx) = (y - b.cy - b.vy * t as f64, x - b.cx - b.vx * t as f64);
                    let d = if b.square {
                        dy.abs().max(dx.abs()) - b.radius
                    } else {
                        (dy * dy + dx * dx).sqrt() - b.radius
                    };
                    let a = coverage(d);
                    v = (1.0 - a) * v + a * b.color[c];
                }
                v.clamp(0.05, 0.95)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(out)
}

/// A synthetic scene and its degraded version under a preset display.
pub fn synthetic_pair(frames: usize, h: usize, w: usize, kind: PsfKind, seed: u64) -> Result<PairedSequence> {
    let clean = moving_scene(frames, h, w, seed)?;
    let params = DegradationParams::preset(kind, seed)?;
    let degraded = degrade_sequence(&clean, &params)?;
    PairedSequence::new(degraded, clean)
}
