use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::seed::rng_for;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "autodiff-test");
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn params(items: &[(&str, Tensor<f64>)]) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    for (k, v) in items {
        p.insert(*k, v.clone(), true).unwrap();
    }
    p
}

/// Reduces any tensor to a scalar with non-uniform weights so that every
/// output entry contributes a distinct gradient.
fn weighted_sum<'t>(b: &Binder<'t, '_, f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>, crate::Error> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0 + 0.1).collect();
    let w = b.tape().constant(Tensor::new(shape, w).unwrap());
    Ok(x.mul(w)?.sum())
}

fn check(p: &ParameterSet<f64>, f: impl for<'t, 'p> Fn(&Binder<'t, 'p, f64>) -> crate::Result<Var<'t, f64>>) -> f64 {
    let r = gradcheck(f, p, 1e-5).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
    r.max_rel_error
}

#[test]
fn gradcheck_elementwise_ops() {
    let p = params(&[
        ("a", rand_tensor(&[3, 4], 1, -1.5, 1.5)),
        ("b", rand_tensor(&[3, 4], 2, 0.5, 2.0)),
    ]);
    check(&p, |b| {
        let (x, y) = (b.param("a")?, b.param("b")?);
        weighted_sum(b, x.add(y)?)
    });
    check(&p, |b| {
        let (x, y) = (b.param("a")?, b.param("b")?);
        weighted_sum(b, x.sub(y)?)
    });
    check(&p, |b| {
        let (x, y) = (b.param("a")?, b.param("b")?);
        weighted_sum(b, x.mul(y)?)
    });
    check(&p, |b| {
        let (x, y) = (b.param("a")?, b.param("b")?);
        weighted_sum(b, x.div(y)?)
    });
    check(&p, |b| weighted_sum(b, b.param("a")?.scale(-2.5)));
    check(&p, |b| weighted_sum(b, b.param("a")?.gelu()));
    check(&p, |b| weighted_sum(b, b.param("a")?.tanh()));
    check(&p, |b| weighted_sum(b, b.param("a")?.sigmoid()));
    check(&p, |b| weighted_sum(b, b.param("a")?.exp()));
    check(&p, |b| weighted_sum(b, b.param("b")?.log()));
    check(&p, |b| weighted_sum(b, b.param("b")?.sqrt()));
    check(&p, |b| Ok(b.param("a")?.sum()));
    check(&p, |b| Ok(b.param("a")?.square().mean()));
}

#[test]
fn gradcheck_relu_away_from_kink() {
    // Entries kept at least 0.1 from zero so the finite difference never straddles the kink.
    let mut t = rand_tensor(&[4, 5], 3, 0.1, 1.0);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let p = params(&[("a", t)]);
    check(&p, |b| weighted_sum(b, b.param("a")?.relu()));
}

#[test]
fn gradcheck_structural_ops() {
    let p = params(&[
        ("a", rand_tensor(&[3, 4], 4, -1.0, 1.0)),
        ("b", rand_tensor(&[4, 5], 5, -1.0, 1.0)),
        ("c", rand_tensor(&[3, 2], 6, -1.0, 1.0)),
        ("r", rand_tensor(&[4], 7, 0.5, 1.5)),
    ]);
    check(&p, |b| weighted_sum(b, b.param("a")?.matmul(b.param("b")?)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.transpose()?));
    check(&p, |b| weighted_sum(b, b.param("a")?.reshape(&[2, 6])?));
    check(&p, |b| weighted_sum(b, b.param("a")?.softmax()?));
    check(&p, |b| weighted_sum(b, b.param("a")?.sum_axis(0)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.sum_axis(1)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.mean_axis(0)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.mean_axis(1)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.variance_axis(0)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.variance_axis(1)?));
    check(&p, |b| weighted_sum(b, Var::concat(&[b.param("a")?, b.param("c")?], 1)?));
    check(&p, |b| {
        let at = b.param("a")?.transpose()?;
        weighted_sum(b, Var::concat(&[at, b.param("b")?.transpose()?.transpose()?], 1)?)
    });
    check(&p, |b| weighted_sum(b, Var::concat(&[b.param("r")?, b.param("r")?], 0)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.slice(1, 1, 2)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.slice(0, 1, 2)?));
    check(&p, |b| weighted_sum(b, b.param("r")?.slice(0, 1, 2)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.layernorm(1e-5)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.batchnorm(1e-5)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.broadcast_add(b.param("r")?)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.broadcast_mul(b.param("r")?)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.normalize_rows(1e-9)?));
    check(&p, |b| weighted_sum(b, b.param("a")?.max_groups(2)?));
}

#[test]
fn gradcheck_conv1d() {
    let p = params(&[
        ("x", rand_tensor(&[11, 3], 8, -1.0, 1.0)),
        ("w", rand_tensor(&[4, 3, 3], 9, -1.0, 1.0)),
        ("bias", rand_tensor(&[4], 10, -1.0, 1.0)),
    ]);
    for (stride, dilation, padding) in [(1, 1, 0), (2, 1, 0), (1, 2, 2), (3, 1, 1)] {
        check(&p, move |b| {
            let y = b.param("x")?.conv1d(b.param("w")?, Some(b.param("bias")?), stride, dilation, padding)?;
            weighted_sum(b, y)
        });
    }
}

#[test]
fn gradcheck_classification_ops() {
    let p = params(&[("a", rand_tensor(&[3, 4], 11, -0.9, 0.9))]);
    let labels = [2usize, 0, 3];
    check(&p, |b| weighted_sum(b, b.param("a")?.angular_margin(&labels, 0.3)?));
    check(&p, |b| b.param("a")?.scale(5.0).cross_entropy(&labels));
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::new();
    let x = tape.var(rand_tensor(&[5, 7], 12, -30.0, 30.0));
    let y = x.softmax().unwrap();
    for r in 0..5 {
        let s: f64 = y.value().row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.var(Tensor::zeros(&[2, 3]));
    let b = tape.var(Tensor::zeros(&[3, 4]));
    assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 4]);
    let err = b.matmul(b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[3, 4]"), "{err}");
    assert!(a.add(b).is_err());
}

#[test]
fn conv1d_matches_sliding_window() {
    let x = rand_tensor(&[23, 2], 13, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 4], 14, -1.0, 1.0);
    for stride in 1..=3 {
        let tape = Tape::new();
        let y = tape
            .var(x.clone())
            .conv1d(tape.var(w.clone()), None, stride, 1, 0)
            .unwrap();
        let out_len = (23 - 4) / stride + 1;
        assert_eq!(y.shape(), vec![out_len, 3]);
        for t in 0..out_len {
            for o in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    for c in 0..2 {
                        acc += x.data()[(t * stride + k) * 2 + c] * w.data()[(o * 2 + c) * 4 + k];
                    }
                }
                assert!((y.value().data()[t * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn product_rule_and_unused_parameters() {
    let p = params(&[
        ("x", Tensor::scalar(3.0)),
        ("y", Tensor::scalar(-2.0)),
        ("unused", Tensor::vector(vec![1.0, 2.0])),
    ]);
    let tape = Tape::new();
    let b = Binder::new(&tape, &p);
    let loss = b.param("x").unwrap().mul(b.param("y").unwrap()).unwrap();
    let g = b.backward(loss).unwrap();
    assert_eq!(g.get("x").unwrap().item(), -2.0);
    assert_eq!(g.get("y").unwrap().item(), 3.0);
    assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::zeros(&[2]));
    assert!(matches!(x.backward(), Err(crate::Error::InvalidArgument(_))));
}

#[test]
fn detach_blocks_only_its_own_path() {
    let p = params(&[("w", rand_tensor(&[3], 15, -1.0, 1.0))]);
    let tape = Tape::new();
    let b = Binder::new(&tape, &p);
    let t = b.param("w").unwrap().tanh();
    let d = t.detach();
    assert_eq!(*d.value(), *t.value());

    // Only through the barrier: nothing flows back.
    let g = b.backward(d.square().sum()).unwrap();
    assert!(g.get("w").unwrap().data().iter().all(|&v| v == 0.0));

    // f(t) + g(detach(t)) has exactly the gradient of f(t).
    let both = t.sum().add(d.exp().sum()).unwrap();
    let g_both = b.backward(both).unwrap();
    let tape2 = Tape::new();
    let b2 = Binder::new(&tape2, &p);
    let g_f = b2.backward(b2.param("w").unwrap().tanh().sum()).unwrap();
    assert_eq!(g_both.get("w"), g_f.get("w"));
}

#[test]
fn gradcheck_holds_detached_values_fixed() {
    let p = params(&[("w", rand_tensor(&[3], 23, -1.0, 1.0))]);
    // The detached branch depends on `w` numerically but not differentiably.
    let r = check(&p, |b| {
        let t = b.param("w")?.tanh();
        Ok(t.sum().add(t.detach().exp().mul(t)?.sum())?)
    });
    assert!(r <= 1e-4);

    let tape = Tape::recording_detached();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
    let _ = x.detach();
    let recorded = tape.take_detached();
    assert_eq!(recorded, vec![Tensor::vector(vec![1.0, 2.0])]);
    let replay = Tape::replaying_detached(recorded);
    let y = replay.var(Tensor::vector(vec![5.0, 6.0]));
    assert_eq!(y.detach().value().data(), &[1.0, 2.0]);
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let p = params(&[
        ("x", rand_tensor(&[4, 3], 16, -1.0, 1.0)),
        ("w1", rand_tensor(&[3, 5], 17, -1.0, 1.0)),
        ("w2", rand_tensor(&[5, 5], 18, -1.0, 1.0)),
        ("w3", rand_tensor(&[5, 2], 19, -1.0, 1.0)),
    ]);
    check(&p, |b| {
        let h = b.param("x")?.matmul(b.param("w1")?)?.tanh();
        let h = h.matmul(b.param("w2")?)?.gelu();
        let h = h.matmul(b.param("w3")?)?.sigmoid();
        Ok(h.square().mean())
    });
}

#[test]
fn gradcheck_linear_is_exact() {
    let p = params(&[("a", rand_tensor(&[6], 20, -1.0, 1.0))]);
    let r = gradcheck(|b| weighted_sum(b, b.param("a")?), &p, 1e-5).unwrap();
    assert!(r.max_rel_error <= 1e-10, "{r:?}");
}

#[test]
fn gradcheck_rejects_non_finite() {
    let p = params(&[("a", Tensor::vector(vec![-1.0]))]);
    let r = gradcheck(|b| Ok(b.param("a")?.log().sum()), &p, 1e-5);
    assert!(matches!(r, Err(crate::Error::Numeric(_))));
}

#[test]
fn repeated_passes_are_identical() {
    let p = params(&[
        ("x", rand_tensor(&[5, 3], 21, -1.0, 1.0)),
        ("w", rand_tensor(&[3, 3], 22, -1.0, 1.0)),
    ]);
    let run = |tape: &Tape<f64>| {
        let b = Binder::new(tape, &p);
        let y = b.param("x").unwrap().matmul(b.param("w").unwrap()).unwrap().softmax().unwrap();
        let l = y.square().sum();
        (l.item(), b.backward(l).unwrap())
    };
    let mut tape = Tape::new();
    let first = run(&tape);
    tape.reset();
    assert!(tape.is_empty());
    let second = run(&tape);
    assert_eq!(first.0.to_bits(), second.0.to_bits());
    assert_eq!(first.1, second.1);
}

proptest! {
    #[test]
    fn softmax_normalizes_any_row(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let tape = Tape::new();
        let y = tape.var(Tensor::vector(v)).softmax().unwrap();
        let s: f64 = y.value().data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_length_formula(t in 4usize..60, k in 1usize..5, r in 1usize..4) {
        let tape = Tape::<f64>::new();
        let y = tape.var(Tensor::zeros(&[t, 1])).conv1d(tape.var(Tensor::zeros(&[1, 1, k])), None, r, 1, 0).unwrap();
        prop_assert_eq!(y.shape()[0], (t - k) / r + 1);
    }
}

#[test]
fn op_suite_covers_every_op() {
    let reports = gradcheck_ops(1e-5).unwrap();
    let names: Vec<&str> = reports.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, OPS);
    for (name, r) in &reports {
        assert!(r.max_rel_error <= 1e-4, "{name}: {r:?}");
        assert!(r.checked > 0, "{name}");
    }
}
