use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{self, ProbeOptions};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn eval1(x: Tensor, f: impl FnOnce(&mut Tape, Var) -> crate::Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v).unwrap();
    tape.value(out).clone()
}

// Straightforward loop implementations used as independent references.
mod oracle {
    use super::Tensor;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * stride + u) as isize - pad as isize;
                                let ix = (xx * stride + v) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.at(&[o, c, u, v]) * x.at(&[c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = s;
                }
            }
        }
        (vec![co, oh, ow], out)
    }

    /// Inverse sub-pixel rearrangement `[C×rH×rW] → [C·r²×H×W]`.
    pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1] / r, x.shape()[2] / r);
        let mut out = Tensor::zeros(&[c * r * r, h, w]).unwrap();
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..h {
                        for xx in 0..w {
                            out.set(&[ch * r * r + i * r + j, y, xx], x.at(&[ch, y * r + i, xx * r + j]));
                        }
                    }
                }
            }
        }
        out
    }
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[0, 2], vec![]).is_err());
    let mut x = Tensor::zeros(&[2]).unwrap();
    assert!(x.set_grad(vec![0.0; 3]).is_err());
    x.set_grad(vec![1.0, 2.0]).unwrap();
    assert_eq!(x.grad(), Some(&[1.0, 2.0][..]));
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let expected = oracle::matmul(&a, &b);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let y = eval1(t(&[3], &[0.0, 0.0, 0.0]), |tp, v| tp.softmax(v));
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = eval1(t(&[1], &[5.0]), |tp, v| tp.softmax(v));
    assert_eq!(y.data(), &[1.0]);
    // 1 - e^-1000 is not representable below 1 in f64; e^-1000 underflows.
    let y = eval1(t(&[2], &[1000.0, 0.0]), |tp, v| tp.softmax(v));
    assert!((y.data()[0] - 1.0).abs() <= 1e-15);
    assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
}

#[test]
fn layer_norm_examples() {
    let run = |x: Tensor, g: Tensor, b: Tensor| {
        let mut tape = Tape::new();
        let (x, g, b) = (tape.constant(x), tape.constant(g), tape.constant(b));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        tape.value(y).clone()
    };
    let y = run(
        t(&[4], &[2.0; 4]),
        Tensor::ones(&[4]).unwrap(),
        Tensor::zeros(&[4]).unwrap(),
    );
    assert!(y.data().iter().all(|&v| v == 0.0));

    let bvals = [0.5, -1.0, 2.0];
    let y = run(
        t(&[3], &[1.0, 5.0, -2.0]),
        Tensor::zeros(&[3]).unwrap(),
        t(&[3], &bvals),
    );
    assert_eq!(y.data(), &bvals);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[64], &mut rng).map(|v| 3.0 * v + 1.0);
    let y = run(x, Tensor::ones(&[64]).unwrap(), Tensor::zeros(&[64]).unwrap());
    let mean = y.mean();
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-4, "variance {var}");
}

#[test]
fn layer_norm_variance_is_one_up_to_eps() {
    // with eps = 1e-5 the normalized variance is var/(var+eps); for unit-scale
    // rows that is within 1e-6 of 1 once var >~ 10
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[128], &mut rng).map(|v| 10.0 * v);
    let y = eval1(x, |tp, v| {
        let g = tp.constant(Tensor::ones(&[128]).unwrap());
        let b = tp.constant(Tensor::zeros(&[128]).unwrap());
        tp.layer_norm(v, g, b, 1e-5)
    });
    let mean = y.mean();
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6, "variance {var}");
}

#[test]
fn gelu_examples() {
    let y = eval1(t(&[4], &[0.0, 1.0, 40.0, -40.0]), |tp, v| tp.gelu(v));
    assert_eq!(y.data()[0], 0.0);
    // independent erf implementation as the reference
    let reference = 0.5 * (1.0 + statrs::function::erf::erf(1.0 / 2f64.sqrt()));
    // statrs' erf carries ~1e-11 absolute error
    assert!(
        (y.data()[1] - reference).abs() < 1e-10,
        "{} vs {reference}",
        y.data()[1]
    );
    // Φ(1) to double precision
    assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-15);
    assert!((y.data()[1] - 0.841345).abs() < 1e-5);
    assert!((y.data()[2] - 40.0).abs() < 1e-12);
    assert!(y.data()[3].abs() < 1e-12);
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(rand_tensor(&[1, 5, 6], &mut rng));
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]).unwrap());
    let y = tape.conv2d(x, w, Some(b), 1, Padding::default()).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let x = tape.constant(Tensor::ones(&[1, 5, 5]).unwrap());
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
    let y = tape.conv2d(x, w, None, 1, Padding::same(1)).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[1, 5, 5]);
    assert_eq!(y.at(&[0, 2, 2]), 9.0);
    assert_eq!(y.at(&[0, 0, 0]), 4.0);
    assert_eq!(y.at(&[0, 4, 4]), 4.0);
    assert_eq!(y.at(&[0, 0, 2]), 6.0);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 8, 8], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let (shape, expected) = oracle::conv2d(&x, &w, &b, 1, 1);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv2d(xv, wv, Some(bv), 1, Padding::same(1)).unwrap();
    assert_eq!(tape.shape(y), shape.as_slice());
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 8, 8]).unwrap());
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap());
    assert!(matches!(
        tape.conv2d(x, w, None, 2, Padding::same(1)),
        Err(crate::Error::Config(_))
    ));
    // asymmetric padding makes the same stride exact
    let y = tape.conv2d(x, w, None, 2, Padding::new(1, 0, 1, 0)).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_equals_oracle_on_small_shapes(
        ci in 1usize..=4, co in 1usize..=4, h in 3usize..=16, w in 3usize..=16,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..=2, seed in 0u64..1000,
    ) {
        let pad = k / 2;
        prop_assume!((h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[ci, h, w], &mut rng);
        let wt = rand_tensor(&[co, ci, k, k], &mut rng);
        let b = rand_tensor(&[co], &mut rng);
        let (shape, expected) = oracle::conv2d(&x, &wt, &b, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(b));
        let y = tape.conv2d(xv, wv, Some(bv), stride, Padding::same(pad)).unwrap();
        prop_assert_eq!(tape.shape(y), shape.as_slice());
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_shuffle_is_a_permutation(c in 1usize..3, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[c * r * r, h, w], &mut rng);
        let y = eval1(x.clone(), |tp, v| tp.pixel_shuffle(v, r));
        prop_assert_eq!(y.shape(), &[c, h * r, w * r]);
        let back = oracle::pixel_unshuffle(&y, r);
        prop_assert_eq!(&back, &x);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..5, n in 1usize..9, scale in 0.1f64..200.0, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[rows, n], &mut rng).map(|v| v * scale);
        let y = eval1(x, |tp, v| tp.softmax(v));
        for row in y.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn pixel_shuffle_examples() {
    let x = t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
    let y = eval1(x, |tp, v| tp.pixel_shuffle(v, 2));
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[3, 2, 5], &mut rng);
    assert_eq!(eval1(x.clone(), |tp, v| tp.pixel_shuffle(v, 1)), x);

    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[3, 2, 2]).unwrap());
    assert!(matches!(tape.pixel_shuffle(v, 2), Err(crate::Error::Shape { .. })));
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    let g = tape.backward(half).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, -2.0, 0.5]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]).unwrap());
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_visits_in_reverse_and_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[3.0, 4.0]));
    let a = tape.scale(x, 2.0).unwrap();
    let b = tape.scale(x, 5.0).unwrap();
    let c = tape.add(a, b).unwrap();
    let d = tape.add(c, x).unwrap();
    let l = tape.sum(d).unwrap();
    let g = tape.backward(l).unwrap();
    // three consumers of x: 2 + 5 + 1
    assert_eq!(g.get(x).unwrap(), &[8.0, 8.0]);
    let order = g.visit_order();
    assert!(order.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(order, &[l.index(), d.index(), c.index(), b.index(), a.index()]);
}

#[test]
fn ops_reject_non_finite_results() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[1e308]));
    assert!(matches!(
        tape.scale(x, 10.0),
        Err(crate::Error::NonFinite { op: "scale" })
    ));
}

#[test]
fn roll_pad_crop_select_values() {
    let x = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let y = eval1(x.clone(), |tp, v| tp.roll2d(v, 1, -1));
    assert_eq!(y.data(), &[5.0, 6.0, 4.0, 2.0, 3.0, 1.0]);
    let y = eval1(x.clone(), |tp, v| {
        let p = tp.pad_reflect(v, 1, 2)?;
        tp.crop(p, 3, 5)
    });
    assert_eq!(y.shape(), &[1, 3, 5]);
    assert_eq!(&y.data()[..5], &[1.0, 2.0, 3.0, 2.0, 1.0]);
    assert_eq!(&y.data()[10..], &[1.0, 2.0, 3.0, 2.0, 1.0]);
    let y = eval1(x, |tp, v| tp.crop(v, 1, 2));
    assert_eq!(y.data(), &[1.0, 2.0]);
    let z = eval1(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), |tp, v| {
        tp.select(v, &[2, 0, 2])
    });
    assert_eq!(z.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
}

#[test]
fn broadcast_add_and_mul() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let r = tape.constant(t(&[1, 3], &[10.0, 20.0, 30.0]));
    let c = tape.constant(t(&[2, 1], &[2.0, -1.0]));
    let y = tape.add(x, r).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let y = tape.mul(x, c).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
    assert!(tape.add(r, x).is_err());
}

#[test]
fn every_op_passes_finite_differences_over_ten_seeds() {
    for case in gradcheck::op_cases().unwrap() {
        for seed in 0..10u64 {
            let inputs = (case.inputs)(seed).unwrap();
            let opts = ProbeOptions {
                seed,
                ..Default::default()
            };
            let r = gradcheck::check(&inputs, &case.f, &opts).unwrap();
            assert!(
                r.max_rel_err < gradcheck::TOLERANCE,
                "{} seed {seed}: rel err {:.3e} at {:?}",
                case.name,
                r.max_rel_err,
                r.worst
            );
        }
    }
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 2], &mut rng)];
    let opts = ProbeOptions {
        fault: Some(("matmul", 1.5)),
        ..Default::default()
    };
    let r = gradcheck::check(&inputs, |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]), &opts).unwrap();
    assert!(r.max_rel_err > 0.1);
}
