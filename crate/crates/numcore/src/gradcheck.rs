//! Central-difference gradient checking against the tape.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::params::ParamStore;
use crate::tape::{Tape, Trainable, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: Real,
    /// Pass threshold on the maximum relative error.
    pub tol: Real,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: Real,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: Real,
    pub max_abs_err: Real,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: Real,
    pub tol: Real,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: Real, numeric: Real, floor: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Analytic gradients of the scalar returned by `loss_fn` for every trainable
/// parameter.
pub fn analytic_grads<F, E>(
    loss_fn: &F,
    params: &ParamStore,
    trainable: &Trainable,
) -> std::result::Result<BTreeMap<String, Tensor>, E>
where
    F: Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
    E: From<Error>,
{
    let mut tape = Tape::with_trainable(trainable.clone());
    let loss = loss_fn(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    Ok(grads
        .param_grads()
        .map(|(n, g)| (n.to_string(), g.clone()))
        .collect())
}

fn eval<F, E>(loss_fn: &F, params: &ParamStore) -> std::result::Result<Real, E>
where
    F: Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
    E: From<Error>,
{
    let mut tape = Tape::with_trainable(Trainable::Nothing);
    let loss = loss_fn(&mut tape, params)?;
    Ok(tape.value(loss).item()?)
}

/// Compares supplied gradients against central differences of `loss_fn`.
pub fn compare_gradients<F, E>(
    loss_fn: &F,
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    opts: GradCheckOptions,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
    E: From<Error>,
{
    let mut work = params.clone();
    let mut checks = Vec::new();
    for (name, grad) in analytic {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..grad.numel() {
            let orig = params.value(name)?.data()[i];
            work.param_mut(name).unwrap().value.data_mut()[i] = orig + opts.step;
            let plus = eval(loss_fn, &work)?;
            work.param_mut(name).unwrap().value.data_mut()[i] = orig - opts.step;
            let minus = eval(loss_fn, &work)?;
            work.param_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric, opts.floor);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if rel > check.max_rel_err || !rel.is_finite() {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        checks.push(check);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, Real::max);
    Ok(GradCheckReport {
        passed: max_rel_err < opts.tol && checks.iter().all(|c| c.max_rel_err.is_finite()),
        params: checks,
        max_rel_err,
        tol: opts.tol,
    })
}

/// Per-parameter maximum relative error between tape gradients and central
/// differences.
pub fn grad_check<F, E>(
    loss_fn: F,
    params: &ParamStore,
    trainable: &Trainable,
    opts: GradCheckOptions,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
    E: From<Error>,
{
    let analytic = analytic_grads(&loss_fn, params, trainable)?;
    compare_gradients(&loss_fn, params, &analytic, opts)
}
