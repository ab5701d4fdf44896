//! Reference-frame path: strided 3×3 feature extractor followed by a stack
//! of LATBs with alternating window shift.

use super::latb::{init_latb, latb_forward, pad_to_multiple};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{Padding, Tape, Var};

pub const PREFIX: &str = "spatial";

/// Padding that makes a stride-`r` 3×3 convolution map `H` to `H/r` for
/// `r` in {1, 2}.
pub(crate) fn strided_padding(r: usize) -> Padding {
    Padding::new(1, 2 - r, 1, 2 - r)
}

pub fn init_spatial(store: &mut ParamStore, cfg: &ModelConfig, init: &mut Initializer) -> Result<()> {
    let (w, b) = init.conv(cfg.channels, 3, 3)?;
    store.insert(format!("{PREFIX}.sfe.weight"), w);
    store.insert(format!("{PREFIX}.sfe.bias"), b);
    for i in 0..cfg.blocks_pre {
        init_latb(store, &format!("{PREFIX}.latb{i}"), &cfg.spatial_latb(), init)?;
    }
    Ok(())
}

/// Shallow feature `S` of a `[3×H×W]` frame, `[C×H/r×W/r]`. Sizes that are
/// not multiples of `r` are reflect-padded first.
pub fn sfe_forward(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, frame: Var) -> Result<Var> {
    if tape.shape(frame).first() != Some(&3) || tape.shape(frame).len() != 3 {
        return Err(Error::Shape {
            shape: tape.shape(frame).to_vec(),
            reason: "reference frame must be 3×H×W".into(),
        });
    }
    let x = pad_to_multiple(tape, frame, cfg.scale)?;
    tape.conv2d(
        x,
        b.get(&format!("{PREFIX}.sfe.weight"))?,
        Some(b.get(&format!("{PREFIX}.sfe.bias"))?),
        cfg.scale,
        strided_padding(cfg.scale),
    )
}

/// Deep spatial feature `S'`.
pub fn spatial_forward(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, frame: Var) -> Result<Var> {
    let mut x = sfe_forward(tape, b, cfg, frame)?;
    let latb = cfg.spatial_latb();
    for i in 0..cfg.blocks_pre {
        x = latb_forward(tape, b, &format!("{PREFIX}.latb{i}"), &latb, x, i % 2 == 1)?;
    }
    Ok(x)
}
