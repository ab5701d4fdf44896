//! The two-branch video restoration transformer.
//!
//! A window of `K` degraded frames goes in; the restored centre frame comes
//! out. The spatial branch encodes the centre frame alone, the temporal
//! branch encodes every frame and attends from the centre frame into its
//! neighbours, and the two feature maps are fused, refined and decoded into
//! a residual that is added back to the centre frame.

pub mod attention;
pub mod fusion;
pub mod latb;
pub mod spatial;
pub mod temporal;

use std::fmt;
use std::str::FromStr;

pub use fusion::FusionMode;
pub use latb::LatbConfig;
pub use temporal::QkvMode;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::params::{Bindings, Initializer, ParamStore};
use crate::sequence::FrameSequence;
use crate::tensor::{Tape, Tensor, Var};

/// Which feature branches feed the reconstruction head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Branches {
    #[default]
    Both,
    SpatialOnly,
    TemporalOnly,
}

impl Branches {
    pub fn spatial(self) -> bool {
        self != Branches::TemporalOnly
    }

    pub fn temporal(self) -> bool {
        self != Branches::SpatialOnly
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branches::Both => "both",
            Branches::SpatialOnly => "spatial",
            Branches::TemporalOnly => "temporal",
        })
    }
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Branches::Both),
            "spatial" => Ok(Branches::SpatialOnly),
            "temporal" => Ok(Branches::TemporalOnly),
            other => Err(Error::Config(format!(
                "unknown branch set `{other}` (expected both, spatial or temporal)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    /// Spatial window side `M`.
    pub window: usize,
    /// Temporal window side `M_t`.
    pub temporal_window: usize,
    pub mlp_ratio: f64,
    pub blocks_pre: usize,
    pub blocks_post: usize,
    /// Feature downsampling factor `r` (1 or 2).
    pub scale: usize,
    /// Frames per input window `K`.
    pub frames: usize,
    pub branches: Branches,
    pub fusion: FusionMode,
    pub qkv_mode: QkvMode,
    /// Learned per-frame offset added to temporal attention keys.
    pub frame_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            window: 8,
            temporal_window: 4,
            mlp_ratio: 2.0,
            blocks_pre: 2,
            blocks_post: 2,
            scale: 2,
            frames: 5,
            branches: Branches::Both,
            fusion: FusionMode::Stfm,
            qkv_mode: QkvMode::NeighborsKv,
            frame_embed: true,
        }
    }
}

const CONFIG_KEYS: [&str; 13] = [
    "channels",
    "heads",
    "window",
    "temporal_window",
    "mlp_ratio",
    "blocks_pre",
    "blocks_post",
    "scale",
    "frames",
    "branches",
    "fusion",
    "temporal_qkv",
    "frame_embed",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.spatial_latb().validate()?;
        if self.temporal_window == 0 {
            return Err(Error::Config("temporal window must be positive".into()));
        }
        if !(self.scale == 1 || self.scale == 2) {
            return Err(Error::Config(format!("scale must be 1 or 2, got {}", self.scale)));
        }
        if self.frames == 0 || self.frames % 2 == 0 {
            return Err(Error::Config(format!("frame count must be odd, got {}", self.frames)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.branches.temporal() {
            self.qkv_mode
                .frame_sets(self.frames)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Block geometry shared by every LATB in the network.
    pub fn spatial_latb(&self) -> LatbConfig {
        LatbConfig {
            channels: self.channels,
            window: self.window,
            heads: self.heads,
            hidden: ((self.mlp_ratio * self.channels as f64).round() as usize).max(1),
        }
    }

    /// Extra trailing blocks a single-branch model gets so its parameter
    /// count matches the two-branch model.
    pub fn extra_post_blocks(&self) -> usize {
        if self.branches == Branches::Both {
            return 0;
        }
        let both = ModelConfig {
            branches: Branches::Both,
            ..self.clone()
        };
        let full = param_shapes(&both);
        let removed: usize = full
            .iter()
            .filter(|(p, _)| {
                let dropped_branch = match self.branches {
                    Branches::SpatialOnly => p.starts_with("temporal."),
                    Branches::TemporalOnly => p.starts_with("spatial."),
                    Branches::Both => false,
                };
                dropped_branch || p.starts_with("fusion.stfm.") || p.starts_with("fusion.concat.")
            })
            .map(|(_, n)| n)
            .sum();
        let per_block = self.spatial_latb().num_params();
        (removed as f64 / per_block as f64).round() as usize
    }

    pub fn post_blocks(&self) -> usize {
        self.blocks_post + self.extra_post_blocks()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("channels", self.channels);
        m.insert("heads", self.heads);
        m.insert("window", self.window);
        m.insert("temporal_window", self.temporal_window);
        m.insert("mlp_ratio", self.mlp_ratio);
        m.insert("blocks_pre", self.blocks_pre);
        m.insert("blocks_post", self.blocks_post);
        m.insert("scale", self.scale);
        m.insert("frames", self.frames);
        m.insert("branches", self.branches);
        m.insert("fusion", self.fusion);
        m.insert("temporal_qkv", self.qkv_mode);
        m.insert("frame_embed", self.frame_embed);
        m
    }

    /// Reads the model keys of `m`, falling back to defaults; other keys are
    /// ignored.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = ModelConfig::default();
        let mode = |key: &str| m.get_str(key).map(str::to_string);
        let cfg = ModelConfig {
            channels: m.get("channels")?.unwrap_or(d.channels),
            heads: m.get("heads")?.unwrap_or(d.heads),
            window: m.get("window")?.unwrap_or(d.window),
            temporal_window: m.get("temporal_window")?.unwrap_or(d.temporal_window),
            mlp_ratio: m.get("mlp_ratio")?.unwrap_or(d.mlp_ratio),
            blocks_pre: m.get("blocks_pre")?.unwrap_or(d.blocks_pre),
            blocks_post: m.get("blocks_post")?.unwrap_or(d.blocks_post),
            scale: m.get("scale")?.unwrap_or(d.scale),
            frames: m.get("frames")?.unwrap_or(d.frames),
            branches: mode("branches").map(|s| s.parse()).transpose()?.unwrap_or(d.branches),
            fusion: mode("fusion").map(|s| s.parse()).transpose()?.unwrap_or(d.fusion),
            qkv_mode: mode("temporal_qkv")
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or(d.qkv_mode),
            frame_embed: m.get("frame_embed")?.unwrap_or(d.frame_embed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }
}

/// `(path, scalar count)` of every parameter, in initialization order.
fn param_shapes(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(0);
    // shapes only; errors cannot occur for a validated config
    let _ = init_all(&mut store, cfg, &mut init);
    store.iter().map(|(p, t)| (p.to_string(), t.len())).collect()
}

fn init_all(store: &mut ParamStore, cfg: &ModelConfig, init: &mut Initializer) -> Result<()> {
    if cfg.branches.spatial() {
        spatial::init_spatial(store, cfg, init)?;
    }
    if cfg.branches.temporal() {
        temporal::init_temporal(store, cfg, init)?;
    }
    if cfg.branches == Branches::Both {
        fusion::init_fusion(store, cfg, init)?;
    }
    fusion::init_head(store, cfg, init)
}

/// The restoration network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Vtudc {
    cfg: ModelConfig,
}

impl Vtudc {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters. The reconstruction head starts at zero, so an
    /// untrained model returns its centre input frame.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        init_all(&mut store, &self.cfg, &mut Initializer::new(seed))?;
        Ok(store)
    }

    /// Restored centre frame `[3×H×W]` from a `[K×3×H×W]` window, without
    /// clamping.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, frames: Var) -> Result<Var> {
        let s = tape.shape(frames).to_vec();
        if s.len() != 4 || s[0] != self.cfg.frames || s[1] != 3 {
            return Err(Error::Contract(format!(
                "expected a {}×3×H×W window, got {s:?}",
                self.cfg.frames
            )));
        }
        let (h, w) = (s[2], s[3]);
        let r = self.cfg.scale;
        let padded = latb::pad_to_multiple(tape, frames, r)?;
        let (hp, wp) = (tape.shape(padded)[2], tape.shape(padded)[3]);
        let center = self.cfg.frames / 2;
        let reference = tape.select(padded, &[center])?;
        let reference = tape.reshape(reference, &[3, hp, wp])?;

        let spatial = if self.cfg.branches.spatial() {
            Some(spatial::spatial_forward(tape, b, &self.cfg, reference)?)
        } else {
            None
        };
        let temporal = if self.cfg.branches.temporal() {
            let t = temporal::tfe_forward(tape, b, &self.cfg, padded)?;
            Some(temporal::temporal_attention(tape, b, &self.cfg, t)?)
        } else {
            None
        };
        let fused = match (spatial, temporal) {
            (Some(s), Some(t)) => fusion::fuse(tape, b, self.cfg.fusion, s, t)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => unreachable!("at least one branch is always enabled"),
        };
        let out = fusion::reconstruct(tape, b, &self.cfg, fused, reference)?;
        tape.crop(out, h, w)
    }

    /// Inference on one `[K×3×H×W]` window; the result is clamped to [0, 1].
    pub fn restore_window(&self, params: &ParamStore, window: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(window.clone());
        let y = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(y).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Restores every frame of `seq`, replicating the first and last frames
    /// to fill temporal neighbours at the ends. Positions are split across
    /// up to `threads` worker threads.
    pub fn restore_sequence(&self, params: &ParamStore, seq: &FrameSequence, threads: usize) -> Result<FrameSequence> {
        let n = seq.len();
        let threads = threads.clamp(1, n);
        let mut out: Vec<Option<Result<Tensor>>> = (0..n).map(|_| None).collect();
        let chunk = n.div_ceil(threads);
        std::thread::scope(|scope| {
            for (ci, slots) in out.chunks_mut(chunk).enumerate() {
                scope.spawn(move || {
                    for (off, slot) in slots.iter_mut().enumerate() {
                        let center = ci * chunk + off;
                        *slot = Some(
                            seq.window(center, self.cfg.frames)
                                .and_then(|w| self.restore_window(params, &w)),
                        );
                    }
                });
            }
        });
        let frames = out
            .into_iter()
            .map(|r| r.expect("every slot is filled"))
            .collect::<Result<Vec<_>>>()?;
        FrameSequence::new(frames)
    }
}
