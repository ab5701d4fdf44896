//! Window partitioning and multi-head attention on the tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Splits `[N×C×H×W]` (or `[C×H×W]`) into `[N·n×M²×C]` token windows,
/// with windows ordered row-major within each image. H and W must be
/// multiples of `m`.
pub fn window_partition(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let (n, c, h, w) = nchw(tape, x, "window_partition")?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape {
            shape: tape.shape(x).to_vec(),
            reason: format!("spatial size not a multiple of window {m}"),
        });
    }
    let (nh, nw) = (h / m, w / m);
    tape.permute_view(x, &[n, c, nh, m, nw, m], &[0, 2, 4, 3, 5, 1], &[n * nh * nw, m * m, c])
}

/// Inverse of [`window_partition`]: `[N·n×M²×C] → [N×C×H×W]`.
pub fn window_merge(tape: &mut Tape, xw: Var, m: usize, n: usize, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(xw).to_vec();
    if s.len() != 3 || m == 0 || h % m != 0 || w % m != 0 || s[1] != m * m || s[0] != n * (h / m) * (w / m) {
        return Err(Error::Shape {
            shape: s,
            reason: format!("cannot merge into {n} images of {h}x{w} with window {m}"),
        });
    }
    let c = s[2];
    tape.permute_view(xw, &[n, h / m, w / m, m, m, c], &[0, 5, 1, 3, 2, 4], &[n, c, h, w])
}

pub(crate) fn nchw(tape: &Tape, x: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape {
            shape: s.to_vec(),
            reason: format!("{op} expects C×H×W or N×C×H×W"),
        }),
    }
}

/// Projection weights of one attention module, each `[C×C]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Output of [`multi_head_attention`] plus the softmax weights
/// `[B·heads×Tq×Tk]`, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub out: Var,
    pub weights: Var,
}

/// Batched multi-head attention. `q_in` is `[B×Tq×C]`; `k_in` and `v_in`
/// are `[B×Tk×C]`. Each head attends with `softmax(QKᵀ/√d)V`, `d = C/heads`;
/// heads are concatenated and projected by `W_O`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttnWeights,
    heads: usize,
) -> Result<AttnOutput> {
    let (b, tq, c) = match *tape.shape(q_in) {
        [b, t, c] => (b, t, c),
        ref s => {
            return Err(Error::Dimension {
                op: "attention",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let tk = tape.shape(k_in)[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("channels {c} not divisible by {heads} heads")));
    }
    if tape.shape(k_in) != [b, tk, c] || tape.shape(v_in) != [b, tk, c] {
        return Err(Error::Dimension {
            op: "attention",
            lhs: tape.shape(k_in).to_vec(),
            rhs: tape.shape(v_in).to_vec(),
        });
    }
    let d = c / heads;
    let q = tape.linear(q_in, p.w_q, None)?;
    let k = tape.linear(k_in, p.w_k, None)?;
    let v = tape.linear(v_in, p.w_v, None)?;
    let split =
        |tape: &mut Tape, x: Var, t: usize| tape.permute_view(x, &[b, t, heads, d], &[0, 2, 1, 3], &[b * heads, t, d]);
    let (q, k, v) = (split(tape, q, tq)?, split(tape, k, tk)?, split(tape, v, tk)?);
    let logits = tape.bmm(q, k, true, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(logits)?;
    let heads_out = tape.bmm(weights, v, false, 1.0)?;
    let joined = tape.permute_view(heads_out, &[b, heads, tq, d], &[0, 2, 1, 3], &[b, tq, c])?;
    let out = tape.linear(joined, p.w_o, None)?;
    Ok(AttnOutput { out, weights })
}
