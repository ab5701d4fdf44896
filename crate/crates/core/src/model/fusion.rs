//! Fusion of the spatial and temporal features and reconstruction of the
//! restored reference frame.

use std::fmt;
use std::str::FromStr;

use super::latb::{init_latb, latb_forward};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{Padding, Tape, Tensor, Var};

pub const PREFIX: &str = "fusion";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Channel-attention fusion (STFM).
    #[default]
    Stfm,
    /// Concatenation followed by a 1×1 convolution.
    Concat,
    /// Elementwise sum.
    Add,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Stfm => "stfm",
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stfm" => Ok(FusionMode::Stfm),
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected stfm, concat or add)"
            ))),
        }
    }
}

pub fn init_fusion(store: &mut ParamStore, cfg: &ModelConfig, init: &mut Initializer) -> Result<()> {
    let c = cfg.channels;
    match cfg.fusion {
        FusionMode::Stfm => {
            store.insert(format!("{PREFIX}.stfm.fc_w"), init.normal(&[2 * c, 2 * c], 0.02)?);
            store.insert(format!("{PREFIX}.stfm.fc_b"), Tensor::zeros(&[2 * c])?);
            let (w, b) = init.conv(c, 2 * c, 1)?;
            store.insert(format!("{PREFIX}.stfm.reduce.weight"), w);
            store.insert(format!("{PREFIX}.stfm.reduce.bias"), b);
        }
        FusionMode::Concat => {
            let (w, b) = init.conv(c, 2 * c, 1)?;
            store.insert(format!("{PREFIX}.concat.reduce.weight"), w);
            store.insert(format!("{PREFIX}.concat.reduce.bias"), b);
        }
        FusionMode::Add => {}
    }
    Ok(())
}

pub fn init_head(store: &mut ParamStore, cfg: &ModelConfig, init: &mut Initializer) -> Result<()> {
    for i in 0..cfg.post_blocks() {
        init_latb(store, &format!("{PREFIX}.latb{i}"), &cfg.spatial_latb(), init)?;
    }
    let out = 3 * cfg.scale * cfg.scale;
    store.insert(
        format!("{PREFIX}.head.weight"),
        Tensor::zeros(&[out, cfg.channels, 3, 3])?,
    );
    store.insert(format!("{PREFIX}.head.bias"), Tensor::zeros(&[out])?);
    Ok(())
}

/// STFM output `F'` and the channel gate `W` (`[2C×1×1]`).
pub struct StfmTrace {
    pub out: Var,
    pub gate: Var,
    /// Global average pool of the concatenated features, `[2C]`.
    pub pooled: Var,
}

/// `F = [S'; T']`, `W = σ(FC(GAP(F)))`, `F' = Conv1×1(W ⊙ F + F)`.
pub fn stfm_trace(tape: &mut Tape, b: &Bindings, s: Var, t: Var) -> Result<StfmTrace> {
    if tape.shape(s) != tape.shape(t) || tape.shape(s).len() != 3 {
        return Err(Error::Contract(format!(
            "branch features differ: {:?} vs {:?}",
            tape.shape(s),
            tape.shape(t)
        )));
    }
    let (c, h, w) = (tape.shape(s)[0], tape.shape(s)[1], tape.shape(s)[2]);
    let f = tape.concat(&[s, t], 0)?;
    let flat = tape.reshape(f, &[2 * c, h * w])?;
    let pooled = tape.mean_axis(flat, 1)?;
    let logits = tape.linear(
        pooled,
        b.get(&format!("{PREFIX}.stfm.fc_w"))?,
        Some(b.get(&format!("{PREFIX}.stfm.fc_b"))?),
    )?;
    let gate = tape.sigmoid(logits)?;
    let gate = tape.reshape(gate, &[2 * c, 1, 1])?;
    let weighted = tape.mul(f, gate)?;
    let g = tape.add(weighted, f)?;
    let out = tape.conv2d(
        g,
        b.get(&format!("{PREFIX}.stfm.reduce.weight"))?,
        Some(b.get(&format!("{PREFIX}.stfm.reduce.bias"))?),
        1,
        Padding::default(),
    )?;
    Ok(StfmTrace { out, gate, pooled })
}

/// Fuses `S'` and `T'` into `F'` with the configured mode.
pub fn fuse(tape: &mut Tape, b: &Bindings, mode: FusionMode, s: Var, t: Var) -> Result<Var> {
    if tape.shape(s) != tape.shape(t) {
        return Err(Error::Contract(format!(
            "branch features differ: {:?} vs {:?}",
            tape.shape(s),
            tape.shape(t)
        )));
    }
    match mode {
        FusionMode::Stfm => Ok(stfm_trace(tape, b, s, t)?.out),
        FusionMode::Concat => {
            let f = tape.concat(&[s, t], 0)?;
            tape.conv2d(
                f,
                b.get(&format!("{PREFIX}.concat.reduce.weight"))?,
                Some(b.get(&format!("{PREFIX}.concat.reduce.bias"))?),
                1,
                Padding::default(),
            )
        }
        FusionMode::Add => tape.add(s, t),
    }
}

/// Enhances `F'` with the trailing LATBs, maps it to `3·r²` channels,
/// pixel-shuffles to `[3×H×W]` and adds the reference frame. `reference`
/// must be `r` times the feature size (after any padding of the input).
pub fn reconstruct(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, fused: Var, reference: Var) -> Result<Var> {
    let (fs, rs) = (tape.shape(fused).to_vec(), tape.shape(reference).to_vec());
    let r = cfg.scale;
    if fs.len() != 3 || rs.len() != 3 || rs[0] != 3 || rs[1] != fs[1] * r || rs[2] != fs[2] * r {
        return Err(Error::Contract(format!(
            "feature {fs:?} does not match reference {rs:?} at scale {r}"
        )));
    }
    let mut x = fused;
    let latb = cfg.spatial_latb();
    for i in 0..cfg.post_blocks() {
        x = latb_forward(tape, b, &format!("{PREFIX}.latb{i}"), &latb, x, i % 2 == 1)?;
    }
    let y = tape.conv2d(
        x,
        b.get(&format!("{PREFIX}.head.weight"))?,
        Some(b.get(&format!("{PREFIX}.head.bias"))?),
        1,
        Padding::same(1),
    )?;
    let y = tape.pixel_shuffle(y, r)?;
    tape.add(y, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            channels: 4,
            heads: 2,
            window: 2,
            ..ModelConfig::default()
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn params(c: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut init = Initializer::new(seed);
        init_fusion(&mut s, c, &mut init).unwrap();
        init_head(&mut s, c, &mut init).unwrap();
        s
    }

    fn stfm_out(s: &ParamStore, a: &Tensor, bt: &Tensor) -> (Tensor, Tensor, Tensor) {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, false);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(bt.clone()));
        let tr = stfm_trace(&mut tape, &b, av, bv).unwrap();
        (
            tape.value(tr.out).clone(),
            tape.value(tr.gate).clone(),
            tape.value(tr.pooled).clone(),
        )
    }

    fn reduce(s: &ParamStore, f: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let o = tape
            .conv2d(
                fv,
                b.get("fusion.stfm.reduce.weight").unwrap(),
                Some(b.get("fusion.stfm.reduce.bias").unwrap()),
                1,
                Padding::default(),
            )
            .unwrap();
        tape.value(o).clone()
    }

    #[test]
    fn gate_limits() {
        let c = cfg();
        let (s_t, t_t) = (rand_t(&[4, 3, 5], 1), rand_t(&[4, 3, 5], 2));
        let f = Tensor::new(&[8, 3, 5], [s_t.data(), t_t.data()].concat()).unwrap();
        for (bias, factor) in [(-50.0, 1.0), (50.0, 2.0)] {
            let mut s = params(&c, 3);
            s.insert("fusion.stfm.fc_w", Tensor::zeros(&[8, 8]).unwrap());
            s.insert("fusion.stfm.fc_b", Tensor::full(&[8], bias).unwrap());
            let (out, gate, _) = stfm_out(&s, &s_t, &t_t);
            assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0 || g == 1.0));
            let expect = reduce(&s, &f.map(|v| v * factor));
            assert!(out.max_abs_diff(&expect).unwrap() < 1e-15);
        }
    }

    #[test]
    fn gate_is_open_interval_and_pool_is_channel_mean() {
        let c = cfg();
        let s = params(&c, 4);
        let (a, b) = (rand_t(&[4, 6, 7], 5), rand_t(&[4, 6, 7], 6));
        let (_, gate, pooled) = stfm_out(&s, &a, &b);
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
        for ch in 0..8 {
            let src = if ch < 4 { &a } else { &b };
            let mut acc = 0.0;
            for i in 0..6 {
                for j in 0..7 {
                    acc += src.at(&[ch % 4, i, j]);
                }
            }
            assert!((pooled.data()[ch] - acc / 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_permutation_commutes_with_stfm() {
        let c = cfg();
        let s = params(&c, 7);
        let (a, b) = (rand_t(&[4, 1, 6], 8), rand_t(&[4, 1, 6], 9));
        let perm = [3, 0, 5, 1, 4, 2];
        let permute = |x: &Tensor| {
            Tensor::from_fn(x.shape(), |i| {
                let (ch, j) = (i / 6, i % 6);
                x.at(&[ch, 0, perm[j]])
            })
            .unwrap()
        };
        let (o, _, _) = stfm_out(&s, &a, &b);
        let (op, _, _) = stfm_out(&s, &permute(&a), &permute(&b));
        assert!(op.max_abs_diff(&permute(&o)).unwrap() < 1e-14);
    }

    #[test]
    fn mismatched_branches_are_rejected() {
        let s = params(&cfg(), 1);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, false);
        let x = tape.constant(rand_t(&[4, 2, 2], 1));
        let y = tape.constant(rand_t(&[4, 2, 3], 1));
        assert!(matches!(
            fuse(&mut tape, &b, FusionMode::Add, x, y),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_head_reconstructs_the_reference() {
        let c = cfg();
        let s = params(&c, 10);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, false);
        let f = tape.constant(rand_t(&[4, 3, 4], 11));
        let reference = rand_t(&[3, 6, 8], 12).map(f64::abs);
        let rv = tape.constant(reference.clone());
        let out = reconstruct(&mut tape, &b, &c, f, rv).unwrap();
        assert_eq!(tape.value(out), &reference);
        let bad = tape.constant(rand_t(&[3, 6, 7], 1));
        assert!(reconstruct(&mut tape, &b, &c, f, bad).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [FusionMode::Stfm, FusionMode::Concat, FusionMode::Add] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
    }
}
