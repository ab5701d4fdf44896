use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default read-noise variance.
pub const DEFAULT_LAMBDA_READ: f64 = 1e-4;
/// Default shot-noise variance slope.
pub const DEFAULT_LAMBDA_SHOT: f64 = 2e-4;

pub fn check_lambdas(lambda_read: f64, lambda_shot: f64) -> Result<()> {
    if !(lambda_read >= 0.0 && lambda_read.is_finite()) || !(lambda_shot >= 0.0 && lambda_shot.is_finite()) {
        return Err(Error::Config(format!(
            "noise variances must be nonnegative, got read={lambda_read} shot={lambda_shot}"
        )));
    }
    Ok(())
}

/// Heteroscedastic read-shot noise: one draw from
/// `N(0, lambda_read + lambda_shot * signal)`.
pub fn sample_noise<R: Rng + ?Sized>(signal: f64, lambda_read: f64, lambda_shot: f64, rng: &mut R) -> Result<f64> {
    check_lambdas(lambda_read, lambda_shot)?;
    if !(0.0..=1.0).contains(&signal) {
        return Err(Error::Contract(format!("signal {signal} outside [0, 1]")));
    }
    Ok(draw(signal, lambda_read, lambda_shot, rng))
}

/// Unchecked variant for hot loops that validated their inputs already.
pub(crate) fn draw<R: Rng + ?Sized>(signal: f64, lambda_read: f64, lambda_shot: f64, rng: &mut R) -> f64 {
    let var = lambda_read + lambda_shot * signal;
    if var == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    var.sqrt() * z
}
