use rand::Rng;

use super::gradcheck::{gradcheck, GradcheckReport};
use super::params::{Binder, ParameterSet};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::Result;
use crate::seed::rng_for;

/// Every differentiable operation on [`Var`].
pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "scale", "square", "relu", "gelu", "tanh", "sigmoid", "log", "exp", "sqrt", "sum",
    "mean", "sum_axis", "mean_axis", "variance_axis", "matmul", "conv1d", "softmax", "concat", "slice",
    "transpose", "reshape", "layernorm", "batchnorm", "broadcast_add", "broadcast_mul", "normalize_rows",
    "max_groups", "angular_margin", "cross_entropy",
];

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "op-suite");
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Reduces to a scalar with distinct weights so every output entry matters.
fn weighted_sum<'t>(b: &Binder<'t, '_, f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0 + 0.1).collect();
    let w = b.tape().constant(Tensor::new(shape, w)?);
    Ok(x.mul(w)?.sum())
}

type Case = (&'static str, Box<dyn for<'t, 'p> Fn(&Binder<'t, 'p, f64>) -> Result<Var<'t, f64>>>);

fn cases() -> Vec<Case> {
    fn case<F>(name: &'static str, f: F) -> Case
    where
        F: for<'t, 'p> Fn(&Binder<'t, 'p, f64>) -> Result<Var<'t, f64>> + 'static,
    {
        (name, Box::new(f))
    }
    let labels = [2usize, 0, 3];
    let mut out = vec![
        case("add", |b| weighted_sum(b, b.param("a")?.add(b.param("pos")?)?)),
        case("sub", |b| weighted_sum(b, b.param("a")?.sub(b.param("pos")?)?)),
        case("mul", |b| weighted_sum(b, b.param("a")?.mul(b.param("pos")?)?)),
        case("div", |b| weighted_sum(b, b.param("a")?.div(b.param("pos")?)?)),
        case("scale", |b| weighted_sum(b, b.param("a")?.scale(-2.5))),
        case("square", |b| weighted_sum(b, b.param("a")?.square())),
        case("relu", |b| weighted_sum(b, b.param("off_kink")?.relu())),
        case("gelu", |b| weighted_sum(b, b.param("a")?.gelu())),
        case("tanh", |b| weighted_sum(b, b.param("a")?.tanh())),
        case("sigmoid", |b| weighted_sum(b, b.param("a")?.sigmoid())),
        case("log", |b| weighted_sum(b, b.param("pos")?.log())),
        case("exp", |b| weighted_sum(b, b.param("a")?.exp())),
        case("sqrt", |b| weighted_sum(b, b.param("pos")?.sqrt())),
        case("sum", |b| Ok(b.param("a")?.square().sum())),
        case("mean", |b| Ok(b.param("a")?.square().mean())),
        case("sum_axis", |b| {
            let x = b.param("a")?;
            weighted_sum(b, Var::concat(&[x.sum_axis(0)?.reshape(&[4])?, x.sum_axis(1)?.reshape(&[3])?], 0)?)
        }),
        case("mean_axis", |b| {
            let x = b.param("a")?;
            weighted_sum(b, Var::concat(&[x.mean_axis(0)?.reshape(&[4])?, x.mean_axis(1)?.reshape(&[3])?], 0)?)
        }),
        case("variance_axis", |b| {
            let x = b.param("a")?;
            let v = Var::concat(&[x.variance_axis(0)?.reshape(&[4])?, x.variance_axis(1)?.reshape(&[3])?], 0)?;
            weighted_sum(b, v)
        }),
        case("matmul", |b| weighted_sum(b, b.param("a")?.matmul(b.param("m")?)?)),
        case("softmax", |b| weighted_sum(b, b.param("a")?.softmax()?)),
        case("concat", |b| {
            let rows = Var::concat(&[b.param("a")?, b.param("pos")?], 0)?;
            let cols = Var::concat(&[b.param("a")?, b.param("c")?], 1)?;
            Ok(weighted_sum(b, rows)?.add(weighted_sum(b, cols)?)?)
        }),
        case("slice", |b| {
            let x = b.param("a")?;
            Ok(weighted_sum(b, x.slice(0, 1, 2)?)?.add(weighted_sum(b, x.slice(1, 1, 2)?)?)?)
        }),
        case("transpose", |b| weighted_sum(b, b.param("a")?.transpose()?)),
        case("reshape", |b| weighted_sum(b, b.param("a")?.reshape(&[2, 6])?)),
        case("layernorm", |b| weighted_sum(b, b.param("a")?.layernorm(1e-5)?)),
        case("batchnorm", |b| weighted_sum(b, b.param("a")?.batchnorm(1e-5)?)),
        case("broadcast_add", |b| weighted_sum(b, b.param("a")?.broadcast_add(b.param("r")?)?)),
        case("broadcast_mul", |b| weighted_sum(b, b.param("a")?.broadcast_mul(b.param("r")?)?)),
        case("normalize_rows", |b| weighted_sum(b, b.param("a")?.normalize_rows(1e-9)?)),
        case("max_groups", |b| weighted_sum(b, b.param("a")?.max_groups(2)?)),
        case("angular_margin", move |b| weighted_sum(b, b.param("cos")?.angular_margin(&labels, 0.3)?)),
        case("cross_entropy", move |b| b.param("cos")?.scale(5.0).cross_entropy(&labels)),
    ];
    out.push(case("conv1d", |b| {
        let mut total = None::<Var<'_, f64>>;
        for (stride, dilation, padding) in [(1, 1, 0), (2, 1, 0), (1, 2, 2), (3, 1, 1)] {
            let y = b
                .param("x")?
                .conv1d(b.param("w")?, Some(b.param("bias")?), stride, dilation, padding)?;
            let s = weighted_sum(b, y)?;
            total = Some(match total {
                Some(t) => t.add(s)?,
                None => s,
            });
        }
        Ok(total.expect("four cases"))
    }));
    out
}

fn suite_params() -> Result<ParameterSet<f64>> {
    let mut off_kink = rand_tensor(&[4, 5], 3, 0.1, 1.0);
    for (i, v) in off_kink.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let mut p = ParameterSet::new();
    for (name, t) in [
        ("a", rand_tensor(&[3, 4], 1, -1.5, 1.5)),
        ("pos", rand_tensor(&[3, 4], 2, 0.5, 2.0)),
        ("m", rand_tensor(&[4, 5], 5, -1.0, 1.0)),
        ("c", rand_tensor(&[3, 2], 6, -1.0, 1.0)),
        ("r", rand_tensor(&[4], 7, 0.5, 1.5)),
        ("off_kink", off_kink),
        ("x", rand_tensor(&[11, 3], 8, -1.0, 1.0)),
        ("w", rand_tensor(&[4, 3, 3], 9, -1.0, 1.0)),
        ("bias", rand_tensor(&[4], 10, -1.0, 1.0)),
        ("cos", rand_tensor(&[3, 4], 11, -0.9, 0.9)),
    ] {
        p.insert(name, t, true)?;
    }
    Ok(p)
}

/// Central-difference check of each operation in [`OPS`], in order. Only the
/// parameters an operation touches are perturbed.
pub fn gradcheck_ops(epsilon: f64) -> Result<Vec<(&'static str, GradcheckReport)>> {
    let all = suite_params()?;
    let mut by_name: Vec<_> = cases().into_iter().collect();
    by_name.sort_by_key(|(n, _)| OPS.iter().position(|o| o == n));
    by_name
        .into_iter()
        .map(|(name, f)| {
            let used = {
                let tape = super::tape::Tape::new();
                let binder = Binder::new(&tape, &all);
                let loss = f(&binder)?;
                let g = binder.backward(loss)?;
                let mut used = ParameterSet::new();
                for (n, p) in all.iter() {
                    if g.get(n).is_some_and(|t| t.data().iter().any(|v| *v != 0.0)) {
                        used.insert(n, p.value.clone(), true)?;
                    }
                }
                used
            };
            Ok((name, gradcheck(&f, &used, epsilon)?))
        })
        .collect()
}
