//! Finite-difference validation of reverse-mode gradients.
//!
//! The check treats the graph builder as a black box `f(params) -> scalar`:
//! it first verifies the builder is deterministic (two evaluations must
//! agree bitwise), then compares every sampled analytic derivative against
//! a central difference through two full re-evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::store::ParameterStore;
use crate::tensor::{Tape, TensorId};

pub struct GradCheckOptions {
    /// Central-difference step, applied in the scalar's own precision.
    pub eps: f64,
    /// Maximum relative error before a coordinate counts as a failure.
    pub tolerance: f64,
    /// Coordinates sampled per parameter (all of them if the tensor is smaller).
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, tolerance: 1e-6, max_coords_per_param: 16, seed: 0x9e3779b9 }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    /// Total coordinates compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn eval<S: Scalar>(
    store: &ParameterStore<S>,
    build: &impl Fn(&mut Tape<S>, &ParameterStore<S>) -> Result<TensorId>,
) -> Result<f64> {
    let mut tape = Tape::new(false);
    let root = build(&mut tape, store)?;
    Ok(tape.scalar_value(root).to_f64c())
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences over randomly sampled parameter coordinates.
pub fn grad_check<S: Scalar>(
    store: &ParameterStore<S>,
    build: impl Fn(&mut Tape<S>, &ParameterStore<S>) -> Result<TensorId>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let v1 = eval(store, &build)?;
    let v2 = eval(store, &build)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Numerical(format!(
            "graph builder is non-deterministic: {v1:?} vs {v2:?}"
        )));
    }

    let mut tape = Tape::new(true);
    let root = build(&mut tape, store)?;
    let grads = tape.backward(root)?;
    let analytic = tape.param_gradients(&grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = opts.eps;
    let mut work = store.clone();
    let mut report = GradCheckReport {
        passed: true,
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let n = store.get(name).expect("listed name exists").data.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            (0..opts.max_coords_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for &idx in &coords {
            let orig = work.get(name).unwrap().data[idx];
            let step = S::from_f64c(eps);

            work.get_mut(name).unwrap().data[idx] = orig + step;
            let fp = eval(&work, &build)?;
            work.get_mut(name).unwrap().data[idx] = orig - step;
            let fm = eval(&work, &build)?;
            work.get_mut(name).unwrap().data[idx] = orig;

            // Differentiate with the step that was actually applied, which
            // may differ from eps after rounding into S.
            let applied = ((orig + step).to_f64c() - (orig - step).to_f64c()) / 2.0;
            if applied == 0.0 {
                return Err(Error::Numerical(format!(
                    "finite-difference step {eps} vanishes at '{name}'[{idx}]"
                )));
            }
            let fd = (fp - fm) / (2.0 * applied);
            let a = analytic
                .get(name)
                .map(|gv| gv[idx].to_f64c())
                .unwrap_or(0.0);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = fd;
            }
            if rel > opts.tolerance {
                report.passed = false;
            }
        }
    }
    Ok(report)
}
