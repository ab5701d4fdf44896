//! Charbonnier loss, Adam, and the patch-based training loop.

pub mod adam;
pub mod loss;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamConfig, AdamState};
pub use loss::{charbonnier, CHARBONNIER_EPS};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{ModelConfig, Vtudc};
use crate::params::ParamStore;
use crate::sequence::FrameSequence;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to 0 over the configured iterations.
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub charbonnier_eps: f64,
    pub iterations: u64,
    /// Side of the square training patch.
    pub crop: usize,
    pub flip_augment: bool,
    pub seed: u64,
    /// Micro-batches whose gradients are averaged per optimizer step.
    pub accum_steps: usize,
    pub lr_schedule: LrSchedule,
    /// Checkpoint interval in iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            charbonnier_eps: CHARBONNIER_EPS,
            iterations: 1000,
            crop: 32,
            flip_augment: true,
            seed: 0,
            accum_steps: 1,
            lr_schedule: LrSchedule::Constant,
            checkpoint_every: 0,
        }
    }
}

const TRAIN_KEYS: [&str; 12] = [
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "charbonnier_eps",
    "iterations",
    "crop",
    "flip_augment",
    "seed",
    "accum_steps",
    "lr_schedule",
    "checkpoint_every",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if !(self.charbonnier_eps > 0.0) {
            return Err(Error::Config("charbonnier_eps must be positive".into()));
        }
        if self.crop == 0 {
            return Err(Error::Config("crop must be positive".into()));
        }
        if self.accum_steps == 0 {
            return Err(Error::Config("accum_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("lr", self.adam.lr);
        m.insert("beta1", self.adam.beta1);
        m.insert("beta2", self.adam.beta2);
        m.insert("adam_eps", self.adam.eps);
        m.insert("charbonnier_eps", self.charbonnier_eps);
        m.insert("iterations", self.iterations);
        m.insert("crop", self.crop);
        m.insert("flip_augment", self.flip_augment);
        m.insert("seed", self.seed);
        m.insert("accum_steps", self.accum_steps);
        m.insert("lr_schedule", self.lr_schedule);
        m.insert("checkpoint_every", self.checkpoint_every);
        m.extend(&self.model.to_kv());
        m
    }

    /// Parses a flat `key=value` config; absent keys keep their defaults and
    /// unknown keys are rejected.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let allowed: Vec<&str> = TRAIN_KEYS.iter().chain(ModelConfig::keys()).copied().collect();
        m.reject_unknown(&allowed)?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            model: ModelConfig::from_kv(m)?,
            adam: AdamConfig {
                lr: m.get("lr")?.unwrap_or(d.adam.lr),
                beta1: m.get("beta1")?.unwrap_or(d.adam.beta1),
                beta2: m.get("beta2")?.unwrap_or(d.adam.beta2),
                eps: m.get("adam_eps")?.unwrap_or(d.adam.eps),
            },
            charbonnier_eps: m.get("charbonnier_eps")?.unwrap_or(d.charbonnier_eps),
            iterations: m.get("iterations")?.unwrap_or(d.iterations),
            crop: m.get("crop")?.unwrap_or(d.crop),
            flip_augment: m.get("flip_augment")?.unwrap_or(d.flip_augment),
            seed: m.get("seed")?.unwrap_or(d.seed),
            accum_steps: m.get("accum_steps")?.unwrap_or(d.accum_steps),
            lr_schedule: m
                .get_str("lr_schedule")
                .map(str::parse)
                .transpose()?
                .unwrap_or(d.lr_schedule),
            checkpoint_every: m.get("checkpoint_every")?.unwrap_or(d.checkpoint_every),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::load(path)?)
    }

    /// Learning rate used at (0-based) `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.adam.lr,
            LrSchedule::Cosine => {
                let frac = iteration as f64 / self.iterations.max(1) as f64;
                0.5 * self.adam.lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

/// A degraded sequence with its clean counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSequence {
    pub degraded: FrameSequence,
    pub clean: FrameSequence,
}

impl PairedSequence {
    pub fn new(degraded: FrameSequence, clean: FrameSequence) -> Result<Self> {
        if degraded.len() != clean.len() || degraded.frame_shape() != clean.frame_shape() {
            return Err(Error::Contract(format!(
                "unpaired sequences: {} frames of {:?} vs {} frames of {:?}",
                degraded.len(),
                degraded.frame_shape(),
                clean.len(),
                clean.frame_shape()
            )));
        }
        if degraded.frame_shape()[0] != 3 {
            return Err(Error::Contract("training frames must have 3 channels".into()));
        }
        Ok(Self { degraded, clean })
    }
}

/// One training example: a `[K×3×s×s]` input window and its `[3×s×s]` target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub window: Tensor,
    pub target: Tensor,
}

/// Crops `[C×H×W]` at `(y, x)` to `size×size`, then optionally mirrors.
fn crop_flip(frame: &Tensor, y: usize, x: usize, size: usize, hflip: bool, vflip: bool) -> Result<Tensor> {
    let (c, w) = (frame.shape()[0], frame.shape()[2]);
    let h = frame.shape()[1];
    let d = frame.data();
    Tensor::from_fn(&[c, size, size], |idx| {
        let ch = idx / (size * size);
        let i = (idx / size) % size;
        let j = idx % size;
        let si = if vflip { size - 1 - i } else { i };
        let sj = if hflip { size - 1 - j } else { j };
        d[ch * h * w + (y + si) * w + x + sj]
    })
}

/// Draws the training example for `iteration`. The draw depends only on the
/// seed and the iteration, so resumed runs see the same data.
pub fn sample(data: &[PairedSequence], cfg: &TrainConfig, iteration: u64, micro: usize) -> Result<Sample> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    rng.set_stream(iteration * cfg.accum_steps as u64 + micro as u64);
    let pair = &data[rng.gen_range(0..data.len())];
    let (h, w) = (pair.clean.frame_shape()[1], pair.clean.frame_shape()[2]);
    if cfg.crop > h || cfg.crop > w {
        return Err(Error::Config(format!("crop {} exceeds frame size {h}x{w}", cfg.crop)));
    }
    let center = rng.gen_range(0..pair.clean.len());
    let y = rng.gen_range(0..=h - cfg.crop);
    let x = rng.gen_range(0..=w - cfg.crop);
    let (hflip, vflip) = if cfg.flip_augment {
        (rng.gen_bool(0.5), rng.gen_bool(0.5))
    } else {
        (false, false)
    };
    let frames = pair
        .degraded
        .window_indices(center, cfg.model.frames)
        .into_iter()
        .map(|i| crop_flip(pair.degraded.frame(i), y, x, cfg.crop, hflip, vflip))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        window: Tensor::stack(&frames)?,
        target: crop_flip(pair.clean.frame(center), y, x, cfg.crop, hflip, vflip)?,
    })
}

/// Forward + Charbonnier loss + backward on one sample.
pub fn loss_and_grads(
    model: &Vtudc,
    params: &ParamStore,
    s: &Sample,
    eps: f64,
) -> Result<(f64, IndexMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let x = tape.constant(s.window.clone());
    let target = tape.constant(s.target.clone());
    let y = model.forward(&mut tape, &b, x)?;
    let loss = tape.charbonnier(y, target, eps)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "charbonnier" });
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, b.collect_grads(&tape, &mut grads)))
}

/// Model, parameters and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Vtudc,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub last_loss: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Vtudc::new(cfg.model.clone())?;
        let params = model.init_params(cfg.seed)?;
        let adam = AdamState::new(&params)?;
        Ok(Self {
            cfg,
            model,
            params,
            adam,
            iteration: 0,
            last_loss: None,
        })
    }

    /// One optimizer step; returns the mean micro-batch loss.
    pub fn step(&mut self, data: &[PairedSequence]) -> Result<f64> {
        let n = self.cfg.accum_steps;
        let mut total: Option<IndexMap<String, Vec<f64>>> = None;
        let mut loss_sum = 0.0;
        for micro in 0..n {
            let s = sample(data, &self.cfg, self.iteration, micro)?;
            let (loss, grads) = loss_and_grads(&self.model, &self.params, &s, self.cfg.charbonnier_eps)?;
            loss_sum += loss;
            match total.as_mut() {
                None => total = Some(grads),
                Some(acc) => {
                    for (k, g) in grads {
                        acc[&k].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let mut grads = total.expect("accum_steps >= 1");
        if n > 1 {
            let inv = 1.0 / n as f64;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
        }
        let lr = self.cfg.lr_at(self.iteration);
        self.adam.step(&mut self.params, &grads, &self.cfg.adam, lr)?;
        self.iteration += 1;
        let loss = loss_sum / n as f64;
        self.last_loss = Some(loss);
        Ok(loss)
    }

    /// Steps until `cfg.iterations`, calling `on_step(iteration, loss)` after
    /// each step; `iteration` counts from 1.
    pub fn run(
        &mut self,
        data: &[PairedSequence],
        mut on_step: impl FnMut(&Trainer, u64, f64) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let loss = self.step(data)?;
            on_step(self, self.iteration, loss)?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> KvMap {
        let mut m = self.cfg.to_kv();
        m.insert("iteration", self.iteration);
        if let Some(l) = self.last_loss {
            m.insert("loss", l);
        }
        m.extend(&self.adam.to_kv());
        m
    }

    /// Writes `dir/manifest.txt`, `dir/params/`, and `dir/adam/{m,v}/`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(&dir.join("params"))?;
        self.adam.m.save_dir(&dir.join("adam").join("m"))?;
        self.adam.v.save_dir(&dir.join("adam").join("v"))?;
        self.manifest().save(&dir.join(MANIFEST))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest = KvMap::load(&dir.join(MANIFEST))?;
        let mut train_kv = KvMap::new();
        for k in manifest.keys() {
            if !["iteration", "loss", "adam_t"].contains(&k) {
                train_kv.insert(k, manifest.get_str(k).unwrap_or_default());
            }
        }
        let mut t = Trainer::new(TrainConfig::from_kv(&train_kv)?)?;
        t.params = ParamStore::load_dir(&dir.join("params"), &t.params)?;
        t.adam.m = ParamStore::load_dir(&dir.join("adam").join("m"), &t.params)?;
        t.adam.v = ParamStore::load_dir(&dir.join("adam").join("v"), &t.params)?;
        t.adam.t = manifest.require("adam_t")?;
        t.iteration = manifest.require("iteration")?;
        t.last_loss = manifest.get("loss")?;
        Ok(t)
    }
}

pub const MANIFEST: &str = "manifest.txt";

/// Model and weights from a checkpoint directory, for inference.
pub fn load_model(dir: &Path) -> Result<(Vtudc, ParamStore)> {
    let manifest = KvMap::load(&dir.join(MANIFEST))?;
    let model = Vtudc::new(ModelConfig::from_kv(&manifest)?)?;
    let template = model.init_params(0)?;
    let params = ParamStore::load_dir(&dir.join("params"), &template)?;
    Ok((model, params))
}

/// Full-frame Charbonnier loss of the unclamped model output, averaged over
/// every position of the sequence.
pub fn sequence_loss(model: &Vtudc, params: &ParamStore, pair: &PairedSequence, eps: f64) -> Result<f64> {
    let k = model.config().frames;
    let mut total = 0.0;
    for c in 0..pair.clean.len() {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(pair.degraded.window(c, k)?);
        let y = model.forward(&mut tape, &b, x)?;
        total += charbonnier(tape.value(y), pair.clean.frame(c), eps)?;
    }
    Ok(total / pair.clean.len() as f64)
}
