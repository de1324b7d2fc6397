use rand::seq::index::sample;

use super::params::{Binder, ParameterSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Entries above this count are subsampled.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// Magnitude below which errors are measured in absolute rather than relative
/// terms. Central differences on a gradient of size `1e-8` carry truncation
/// noise of the same order, so a pure ratio is meaningless there.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn eval<F>(f: &F, params: &ParameterSet<f64>, detached: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t, 'p> Fn(&Binder<'t, 'p, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::replaying_detached(detached.to_vec());
    let binder = Binder::new(&tape, params);
    let loss = f(&binder)?.item();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Compares reverse-mode gradients with central differences of step `epsilon`
/// for every parameter entry, or a seeded sample of [`FULL_CHECK_LIMIT`]
/// entries for larger sets. Detached tensors keep their unperturbed values in
/// the perturbed evaluations, so only differentiable paths are measured.
pub fn gradcheck<F>(f: F, params: &ParameterSet<f64>, epsilon: f64) -> Result<GradcheckReport>
where
    F: for<'t, 'p> Fn(&Binder<'t, 'p, f64>) -> Result<Var<'t, f64>>,
{
    let (analytic, detached) = {
        let tape = Tape::recording_detached();
        let binder = Binder::new(&tape, params);
        let loss = f(&binder)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", loss.item())));
        }
        (binder.backward(loss)?, tape.take_detached())
    };

    let mut slots: Vec<(String, usize)> = Vec::new();
    for (name, p) in params.iter() {
        slots.extend((0..p.value.len()).map(|i| (name.to_string(), i)));
    }
    let picked: Vec<usize> = if slots.len() > FULL_CHECK_LIMIT {
        let mut rng = rng_for(0, "gradcheck");
        let mut idx = sample(&mut rng, slots.len(), FULL_CHECK_LIMIT).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..slots.len()).collect()
    };

    let mut work = params.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: picked.len(),
    };
    for &s in &picked {
        let (name, i) = &slots[s];
        let orig = params.value(name)?.data()[*i];
        let set = |w: &mut ParameterSet<f64>, v: f64| {
            w.get_mut(name).expect("param").value.data_mut()[*i] = v;
        };
        set(&mut work, orig + epsilon);
        let up = eval(&f, &work, &detached)?;
        set(&mut work, orig - epsilon);
        let down = eval(&f, &work, &detached)?;
        set(&mut work, orig);
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.get(name).expect("grad").data()[*i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = name.clone();
            report.worst_index = *i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
