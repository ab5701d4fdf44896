use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Default smoothing constant of the Charbonnier penalty.
pub const CHARBONNIER_EPS: f64 = 1e-3;

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!(
            "loss operands differ in shape: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// `mean(sqrt((pred - target)² + eps²))`.
pub fn charbonnier(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    check_shapes(pred.shape(), target.shape())?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| ((p - t).powi(2) + eps * eps).sqrt())
        .sum();
    Ok(s / pred.len() as f64)
}

impl Tape {
    /// Charbonnier loss as a single recorded op with a scalar output.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        check_shapes(self.shape(pred), self.shape(target))?;
        let value = charbonnier(self.value(pred), self.value(target), eps)?;
        self.push("charbonnier", &[pred, target], Tensor::scalar(value), move |ctx| {
            let (p, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let scale = ctx.grad[0] / p.len() as f64;
            let d: Vec<f64> = p
                .iter()
                .zip(t)
                .map(|(a, b)| {
                    let diff = a - b;
                    scale * diff / (diff * diff + eps * eps).sqrt()
                })
                .collect();
            let dt = ctx.needs[1].then(|| d.iter().map(|v| -v).collect());
            vec![ctx.needs[0].then_some(d), dt]
        })
    }
}
