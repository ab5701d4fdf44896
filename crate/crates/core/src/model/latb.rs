//! Local-aware transformer block: windowed self-attention with a learned
//! per-slot position embedding, followed by a two-layer GELU feed-forward
//! network, each behind a LayerNorm and a residual connection.

use super::attention::{multi_head_attention, nchw, window_merge, window_partition, AttnWeights};
use crate::error::{Error, Result};
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatbConfig {
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    /// Width of the feed-forward hidden layer.
    pub hidden: usize,
}

impl LatbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window == 0 || self.hidden == 0 {
            return Err(Error::Config("LATB sizes must be positive".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Scalars in one block.
    pub fn num_params(&self) -> usize {
        let (c, m, f) = (self.channels, self.window, self.hidden);
        m * m * c + 4 * c + 4 * c * c + c * f + f + f * c + c
    }
}

pub fn init_latb(store: &mut ParamStore, prefix: &str, cfg: &LatbConfig, init: &mut Initializer) -> Result<()> {
    let (c, m, f) = (cfg.channels, cfg.window, cfg.hidden);
    store.insert(format!("{prefix}.pos_embed"), init.normal(&[m * m, c], INIT_STD)?);
    for ln in ["ln1", "ln2"] {
        store.insert(format!("{prefix}.{ln}_gamma"), Tensor::ones(&[c])?);
        store.insert(format!("{prefix}.{ln}_beta"), Tensor::zeros(&[c])?);
    }
    for w in ["W_Q", "W_K", "W_V", "W_O"] {
        store.insert(format!("{prefix}.{w}"), init.normal(&[c, c], INIT_STD)?);
    }
    store.insert(format!("{prefix}.ffn_w1"), init.normal(&[c, f], INIT_STD)?);
    store.insert(format!("{prefix}.ffn_b1"), Tensor::zeros(&[f])?);
    store.insert(format!("{prefix}.ffn_w2"), init.normal(&[f, c], INIT_STD)?);
    store.insert(format!("{prefix}.ffn_b2"), Tensor::zeros(&[c])?);
    Ok(())
}

pub(crate) fn attn_weights(b: &Bindings, prefix: &str) -> Result<AttnWeights> {
    Ok(AttnWeights {
        w_q: b.get(&format!("{prefix}.W_Q"))?,
        w_k: b.get(&format!("{prefix}.W_K"))?,
        w_v: b.get(&format!("{prefix}.W_V"))?,
        w_o: b.get(&format!("{prefix}.W_O"))?,
    })
}

/// Two fully connected layers, each followed by GELU.
pub(crate) fn ffn(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.linear(
        x,
        b.get(&format!("{prefix}.ffn_w1"))?,
        Some(b.get(&format!("{prefix}.ffn_b1"))?),
    )?;
    let h = tape.gelu(h)?;
    let o = tape.linear(
        h,
        b.get(&format!("{prefix}.ffn_w2"))?,
        Some(b.get(&format!("{prefix}.ffn_b2"))?),
    )?;
    tape.gelu(o)
}

/// Reflect-pads the spatial axes on the bottom/right up to multiples of `m`.
pub(crate) fn pad_to_multiple(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let s = tape.shape(x);
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    tape.pad_reflect(x, (m - h % m) % m, (m - w % m) % m)
}

/// Block output and the attention weights `[windows·heads×M²×M²]`.
pub struct LatbTrace {
    pub out: Var,
    pub weights: Var,
}

/// Applies one block to `[C×H×W]` or `[N×C×H×W]` features. With `shift`,
/// features are cyclically rolled by ⌊M/2⌋ before partitioning and rolled
/// back after merging (no attention mask).
pub fn latb_forward(tape: &mut Tape, b: &Bindings, prefix: &str, cfg: &LatbConfig, x: Var, shift: bool) -> Result<Var> {
    Ok(latb_trace(tape, b, prefix, cfg, x, shift)?.out)
}

pub fn latb_trace(
    tape: &mut Tape,
    b: &Bindings,
    prefix: &str,
    cfg: &LatbConfig,
    x: Var,
    shift: bool,
) -> Result<LatbTrace> {
    let in_shape = tape.shape(x).to_vec();
    let (n, c, h, w) = nchw(tape, x, "latb")?;
    if c != cfg.channels {
        return Err(Error::Dimension {
            op: "latb",
            lhs: in_shape,
            rhs: vec![cfg.channels],
        });
    }
    let m = cfg.window;
    let x4 = tape.reshape(x, &[n, c, h, w])?;
    let padded = pad_to_multiple(tape, x4, m)?;
    let (hp, wp) = (tape.shape(padded)[2], tape.shape(padded)[3]);
    let s = (m / 2) as isize;
    let rolled = if shift && s > 0 {
        tape.roll2d(padded, -s, -s)?
    } else {
        padded
    };
    let tokens = window_partition(tape, rolled, m)?;

    let pos = tape.reshape(b.get(&format!("{prefix}.pos_embed"))?, &[1, m * m, c])?;
    let pe = tape.add(tokens, pos)?;
    let ln1 = tape.layer_norm(
        pe,
        b.get(&format!("{prefix}.ln1_gamma"))?,
        b.get(&format!("{prefix}.ln1_beta"))?,
        LN_EPS,
    )?;
    let attn = multi_head_attention(tape, ln1, ln1, ln1, &attn_weights(b, prefix)?, cfg.heads)?;
    let t1 = tape.add(tokens, attn.out)?;
    let ln2 = tape.layer_norm(
        t1,
        b.get(&format!("{prefix}.ln2_gamma"))?,
        b.get(&format!("{prefix}.ln2_beta"))?,
        LN_EPS,
    )?;
    let f = ffn(tape, b, prefix, ln2)?;
    let t2 = tape.add(t1, f)?;

    let merged = window_merge(tape, t2, m, n, hp, wp)?;
    let unrolled = if shift && s > 0 {
        tape.roll2d(merged, s, s)?
    } else {
        merged
    };
    let cropped = tape.crop(unrolled, h, w)?;
    let out = tape.reshape(cropped, &in_shape)?;
    Ok(LatbTrace {
        out,
        weights: attn.weights,
    })
}
