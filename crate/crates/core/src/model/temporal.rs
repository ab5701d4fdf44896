//! Temporal path: a per-frame feature extractor with shared weights and a
//! window-wise cross-frame attention that pulls neighbour information into
//! the reference frame.

use std::fmt;
use std::str::FromStr;

use super::attention::{multi_head_attention, nchw, window_merge, window_partition, AttnOutput};
use super::latb::{attn_weights, init_latb, latb_forward, pad_to_multiple};
use super::spatial::strided_padding;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{Padding, Tape, Var};

pub const PREFIX: &str = "temporal";
const ATTN: &str = "temporal.attn";

/// Which frames supply queries and which supply keys/values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QkvMode {
    /// Reference queries; keys and values from the neighbours only.
    #[default]
    NeighborsKv,
    /// Reference queries; keys and values from every frame.
    RefInKv,
    /// Each neighbour queries every frame; results averaged over neighbours.
    NeighborsOnlyQ,
}

impl fmt::Display for QkvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QkvMode::NeighborsKv => "neighbors",
            QkvMode::RefInKv => "with-ref",
            QkvMode::NeighborsOnlyQ => "neighbors-only",
        })
    }
}

impl FromStr for QkvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbors" => Ok(QkvMode::NeighborsKv),
            "with-ref" => Ok(QkvMode::RefInKv),
            "neighbors-only" => Ok(QkvMode::NeighborsOnlyQ),
            other => Err(Error::Config(format!(
                "unknown temporal qkv mode `{other}` (expected neighbors, with-ref or neighbors-only)"
            ))),
        }
    }
}

impl QkvMode {
    /// `(query frames, key/value frames)` for `k` frames.
    pub fn frame_sets(self, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let reference = k / 2;
        let neighbors: Vec<usize> = (0..k).filter(|&i| i != reference).collect();
        let all: Vec<usize> = (0..k).collect();
        if neighbors.is_empty() && self != QkvMode::RefInKv {
            return Err(Error::Contract(format!(
                "temporal mode `{self}` needs neighbouring frames, got a single frame"
            )));
        }
        Ok(match self {
            QkvMode::NeighborsKv => (vec![reference], neighbors),
            QkvMode::RefInKv => (vec![reference], all),
            QkvMode::NeighborsOnlyQ => (neighbors, all),
        })
    }
}

pub fn init_temporal(store: &mut ParamStore, cfg: &ModelConfig, init: &mut Initializer) -> Result<()> {
    let c = cfg.channels;
    let (w, b) = init.conv(c, 3, 3)?;
    store.insert(format!("{PREFIX}.tfe.conv_in.weight"), w);
    store.insert(format!("{PREFIX}.tfe.conv_in.bias"), b);
    init_latb(store, &format!("{PREFIX}.tfe.latb"), &cfg.spatial_latb(), init)?;
    let (w, b) = init.conv(c, c, 3)?;
    store.insert(format!("{PREFIX}.tfe.conv_out.weight"), w);
    store.insert(format!("{PREFIX}.tfe.conv_out.bias"), b);
    for name in ["W_Q", "W_K", "W_V", "W_O"] {
        store.insert(format!("{ATTN}.{name}"), init.normal(&[c, c], 0.02)?);
    }
    if cfg.frame_embed {
        store.insert(format!("{ATTN}.frame_embed"), init.normal(&[cfg.frames, c], 0.02)?);
    }
    Ok(())
}

/// Per-frame features `T`, `[K×C×H/r×W/r]`, from `[K×3×H×W]` frames.
pub fn tfe_forward(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, frames: Var) -> Result<Var> {
    let s = tape.shape(frames).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Contract(format!("expected K×3×H×W frames, got {s:?}")));
    }
    let x = pad_to_multiple(tape, frames, cfg.scale)?;
    let x = tape.conv2d(
        x,
        b.get(&format!("{PREFIX}.tfe.conv_in.weight"))?,
        Some(b.get(&format!("{PREFIX}.tfe.conv_in.bias"))?),
        cfg.scale,
        strided_padding(cfg.scale),
    )?;
    let x = latb_forward(tape, b, &format!("{PREFIX}.tfe.latb"), &cfg.spatial_latb(), x, false)?;
    tape.conv2d(
        x,
        b.get(&format!("{PREFIX}.tfe.conv_out.weight"))?,
        Some(b.get(&format!("{PREFIX}.tfe.conv_out.bias"))?),
        1,
        Padding::same(1),
    )
}

/// Cross-frame attention output `T'` plus the attention weights.
pub struct TemporalTrace {
    pub out: Var,
    pub weights: Var,
}

/// Aggregates `[K×C×H'×W']` features into `[C×H'×W']`. Every frame is cut
/// into `M_t×M_t` windows, and each window of the query frames attends over
/// the same window position of the key/value frames.
pub fn temporal_attention(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, feats: Var) -> Result<Var> {
    Ok(temporal_trace(tape, b, cfg, feats)?.out)
}

pub fn temporal_trace(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, feats: Var) -> Result<TemporalTrace> {
    let (k, c, h, w) = nchw(tape, feats, "temporal_attention")?;
    if tape.shape(feats).len() != 4 {
        return Err(Error::Contract("temporal features must be K×C×H×W".into()));
    }
    let (q_frames, kv_frames) = cfg.qkv_mode.frame_sets(k)?;
    let m = cfg.temporal_window;
    let padded = pad_to_multiple(tape, feats, m)?;
    let (hp, wp) = (tape.shape(padded)[2], tape.shape(padded)[3]);
    let nw = (hp / m) * (wp / m);
    let t = m * m;
    let windows = window_partition(tape, padded, m)?;
    let windows = tape.reshape(windows, &[k, nw, t, c])?;

    // [F, nw, T, C] -> [nw, F·T, C]
    let gather =
        |tape: &mut Tape, x: Var, f: usize| tape.permute_view(x, &[f, nw, t, c], &[1, 0, 2, 3], &[nw, f * t, c]);
    let q_sel = tape.select(windows, &q_frames)?;
    let q_in = gather(tape, q_sel, q_frames.len())?;
    let kv_sel = tape.select(windows, &kv_frames)?;
    let v_in = gather(tape, kv_sel, kv_frames.len())?;
    let k_in = if cfg.frame_embed {
        let table = b.get(&format!("{ATTN}.frame_embed"))?;
        if tape.shape(table)[0] != k {
            return Err(Error::Contract(format!(
                "frame embedding covers {} frames, got {k}",
                tape.shape(table)[0]
            )));
        }
        let emb = tape.select(table, &kv_frames)?;
        let emb = tape.reshape(emb, &[kv_frames.len(), 1, 1, c])?;
        let tagged = tape.add(kv_sel, emb)?;
        gather(tape, tagged, kv_frames.len())?
    } else {
        v_in
    };
    let AttnOutput { out, weights } = multi_head_attention(tape, q_in, k_in, v_in, &attn_weights(b, ATTN)?, cfg.heads)?;
    let out = if q_frames.len() > 1 {
        let per_frame = tape.reshape(out, &[nw, q_frames.len(), t, c])?;
        tape.mean_axis(per_frame, 1)?
    } else {
        out
    };
    let merged = window_merge(tape, out, m, 1, hp, wp)?;
    let cropped = tape.crop(merged, h, w)?;
    let out = tape.reshape(cropped, &[c, h, w])?;
    Ok(TemporalTrace { out, weights })
}
