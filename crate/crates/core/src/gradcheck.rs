//! Finite-difference verification of backward rules.
//!
//! Every check builds a scalar probe `L = Σ f(inputs) ⊙ R` with a fixed
//! random `R`, differentiates it on a tape, and compares each analytic
//! partial against a central difference with step `h`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::attention::{multi_head_attention, AttnWeights};
use crate::model::latb::{init_latb, latb_forward, LatbConfig};
use crate::model::{ModelConfig, Vtudc};
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{Padding, Tape, Tensor, Var};
use crate::training::CHARBONNIER_EPS;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so entries whose true partial is ~0 are compared in
/// absolute terms instead of amplifying difference noise.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative error used throughout the checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Options for a single function check.
#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub seed: u64,
    pub step: f64,
    /// Optional `(op name, factor)` fault injected into the analytic pass.
    pub fault: Option<(&'static str, f64)>,
    /// Check at most this many entries per input (evenly strided); `None`
    /// checks all of them.
    pub max_entries: Option<usize>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: STEP,
            fault: None,
            max_entries: None,
        }
    }
}

/// Outcome of checking one function.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub max_rel_err: f64,
    pub entries: usize,
    /// Input index and flat offset of the worst entry.
    pub worst: (usize, usize),
}

fn probe_weights(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c0ffee);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn probe_loss<F>(f: &F, inputs: &[Tensor], weights: &Tensor, track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(track)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `f` against central differences at `inputs`.
pub fn check<F>(inputs: &[Tensor], f: F, opts: &ProbeOptions) -> Result<ProbeResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        probe_weights(t.shape(o), opts.seed)?
    };
    let (mut tape, vars, loss) = probe_loss(&f, inputs, &weights, true)?;
    if let Some((op, factor)) = opts.fault {
        tape.inject_fault(op, factor);
    }
    let grads = tape.backward(loss)?;
    let mut result = ProbeResult {
        max_rel_err: 0.0,
        entries: 0,
        worst: (0, 0),
    };
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let (t, _, l) = probe_loss(&f, perturbed, &weights, false)?;
        Ok(t.value(l).data()[0])
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[j], numeric);
            result.entries += 1;
            if err > result.max_rel_err {
                result.max_rel_err = err;
                result.worst = (i, j);
            }
        }
    }
    Ok(result)
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type InputFn = Box<dyn Fn(u64) -> Result<Vec<Tensor>>>;

/// One registered differentiable function: an input generator and the
/// function itself.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: InputFn,
    pub f: CaseFn,
}

fn uniform_inputs(shapes: Vec<Vec<usize>>) -> InputFn {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(1));
        shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0)))
            .collect()
    })
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs: uniform_inputs(shapes.iter().map(|s| s.to_vec()).collect()),
        f: Box::new(f),
    }
}

/// Adds `N(0, std²)` noise to every parameter so that zero-initialized
/// tensors (heads, biases) carry gradient through the whole graph.
fn jitter(store: &ParamStore, std: f64, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd_ba11);
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut out = store.clone();
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    out
}

/// Case whose inputs are `x` followed by every tensor of a parameter store;
/// `f` sees the parameters through [`Bindings`].
fn store_case(
    name: &'static str,
    paths: Vec<String>,
    inputs: impl Fn(u64) -> Result<Vec<Tensor>> + 'static,
    f: impl Fn(&mut Tape, &Bindings, Var) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: Box::new(inputs),
        f: Box::new(move |tape, v| {
            let b: Bindings = paths.iter().cloned().zip(v[1..].iter().copied()).collect();
            f(tape, &b, v[0])
        }),
    }
}

fn latb_case() -> Result<OpCase> {
    let cfg = LatbConfig {
        channels: 4,
        window: 2,
        heads: 2,
        hidden: 6,
    };
    let mut store = ParamStore::new();
    init_latb(&mut store, "b", &cfg, &mut Initializer::new(0))?;
    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    Ok(store_case(
        "latb",
        paths,
        move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = vec![Tensor::from_fn(&[1, 4, 4, 4], |_| rng.gen_range(-1.0..1.0))?];
            v.extend(jitter(&store, 0.3, seed).iter().map(|(_, t)| t.clone()));
            Ok(v)
        },
        move |tape, b, x| latb_forward(tape, b, "b", &cfg, x, true),
    ))
}

/// Tiny end-to-end model used by the suite: `C=8`, `K=3`, `M=M_t=2`.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        heads: 2,
        window: 2,
        temporal_window: 2,
        frames: 3,
        ..ModelConfig::default()
    }
}

/// Full model followed by the Charbonnier loss against a fixed target, on
/// `K×3×size×size` inputs.
pub fn model_case(cfg: ModelConfig, size: usize) -> Result<OpCase> {
    let model = Vtudc::new(cfg)?;
    let base = model.init_params(0)?;
    let paths: Vec<String> = base.paths().map(str::to_string).collect();
    let k = model.config().frames;
    let target = {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7a6e7);
        Tensor::from_fn(&[3, size, size], |_| rng.gen_range(0.0..1.0))?
    };
    Ok(store_case(
        "model",
        paths,
        move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = vec![Tensor::from_fn(&[k, 3, size, size], |_| rng.gen_range(0.0..1.0))?];
            v.extend(jitter(&base, 0.05, seed).iter().map(|(_, t)| t.clone()));
            Ok(v)
        },
        move |tape, b, x| {
            let y = model.forward(tape, b, x)?;
            let t = tape.constant(target.clone());
            tape.charbonnier(y, t, CHARBONNIER_EPS)
        },
    ))
}

/// Every differentiable tensor op plus the composite attention, LATB and
/// loss functions.
pub fn op_cases() -> Result<Vec<OpCase>> {
    let mut cases = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.bmm(v[0], v[1], false, 0.7)),
        case("bmm_nt", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.bmm(v[0], v[1], true, 0.5)),
        case("softmax", &[&[3, 5]], |t, v| {
            let s = t.scale(v[0], 3.0)?;
            t.softmax(s)
        }),
        case("layer_norm", &[&[4, 6], &[6], &[6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("gelu", &[&[10]], |t, v| {
            let s = t.scale(v[0], 3.0)?;
            t.gelu(s)
        }),
        case("sigmoid", &[&[10]], |t, v| {
            let s = t.scale(v[0], 4.0)?;
            t.sigmoid(s)
        }),
        case("conv2d", &[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::same(1))
        }),
        case("conv2d_strided", &[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::new(1, 0, 1, 0))
        }),
        case("pixel_shuffle", &[&[8, 2, 3]], |t, v| t.pixel_shuffle(v[0], 2)),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("roll2d", &[&[2, 4, 5]], |t, v| t.roll2d(v[0], -1, 2)),
        case("pad_reflect", &[&[2, 3, 4]], |t, v| t.pad_reflect(v[0], 2, 3)),
        case("crop", &[&[2, 5, 4]], |t, v| t.crop(v[0], 3, 2)),
        case("concat", &[&[2, 3, 2], &[2, 1, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("select", &[&[4, 3]], |t, v| t.select(v[0], &[3, 1, 3])),
        case("mean_axis", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 1)),
        case("add_broadcast", &[&[2, 3, 4], &[1, 3, 1]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1])),
        case("mul_broadcast", &[&[2, 3, 4], &[2, 1, 4]], |t, v| t.mul(v[0], v[1])),
        case("mul_self", &[&[5]], |t, v| t.mul(v[0], v[0])),
        case("mean", &[&[3, 3]], |t, v| t.mean(v[0])),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("charbonnier", &[&[2, 3, 4], &[2, 3, 4]], |t, v| {
            let a = t.scale(v[0], 0.01)?;
            t.charbonnier(a, v[1], CHARBONNIER_EPS)
        }),
        case(
            "attention",
            &[&[2, 3, 4], &[2, 5, 4], &[4, 4], &[4, 4], &[4, 4], &[4, 4]],
            |t, v| {
                let w = AttnWeights {
                    w_q: v[2],
                    w_k: v[3],
                    w_v: v[4],
                    w_o: v[5],
                };
                Ok(multi_head_attention(t, v[0], v[1], v[1], &w, 2)?.out)
            },
        ),
    ];
    cases.push(latb_case()?);
    Ok(cases)
}

/// Settings for [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Frame side of the end-to-end model check.
    pub size: usize,
    /// Optional `(op name, factor)` fault for mutation testing.
    pub fault: Option<(&'static str, f64)>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 12,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>12} {:>8}  status", "op", "max_rel_err", "entries")?;
        for c in &self.cases {
            let status = if c.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<16} {:>12.3e} {:>8}  {status}", c.name, c.max_rel_err, c.entries)?;
        }
        Ok(())
    }
}

/// Checks every registered op and the tiny end-to-end model.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut cases = op_cases()?;
    cases.push(model_case(tiny_model_config(), opts.size)?);
    let probe = ProbeOptions {
        seed: opts.seed,
        fault: opts.fault,
        ..ProbeOptions::default()
    };
    let mut report = SuiteReport::default();
    for c in &cases {
        let inputs = (c.inputs)(opts.seed)?;
        let r = check(&inputs, &c.f, &probe)?;
        report.cases.push(CaseReport {
            name: c.name.to_string(),
            max_rel_err: r.max_rel_err,
            entries: r.entries,
        });
    }
    Ok(report)
}
