//! Finite-difference verification of tape gradients.
//!
//! Errors are measured per parameter matrix: `|a - n| / max(|a|, |n|)` in the
//! Frobenius norm. When the analytic gradient norm is below
//! [`GradCheckOptions::abs_threshold`] the check switches to the absolute
//! branch and compares the largest entrywise difference against
//! [`GradCheckOptions::abs_tol`].

use std::collections::BTreeMap;

use super::params::{ParamGroup, ParamStore};
use super::tape::{OpKind, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    pub abs_threshold: f64,
    pub abs_tol: f64,
    /// Corrupt the backward rule of this op kind (fault injection).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-5,
            abs_threshold: 1e-6,
            abs_tol: 1e-8,
            fault: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Relative,
    Absolute,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub group: ParamGroup,
    pub branch: Branch,
    /// Norm-relative error (relative branch) or max abs difference.
    pub error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Worst relative error over parameters checked in the relative branch.
    pub max_rel_error: f64,
    /// Worst absolute difference over parameters in the absolute branch.
    pub max_abs_error: f64,
    pub passed: bool,
    /// First op whose local backward rule disagrees with its forward, when
    /// the check failed.
    pub offending_op: Option<OpKind>,
}

impl GradCheckReport {
    /// Worst error and parameter name per group.
    pub fn worst_by_group(&self) -> BTreeMap<ParamGroup, (&str, f64)> {
        let mut out: BTreeMap<ParamGroup, (&str, f64)> = BTreeMap::new();
        for p in &self.params {
            let e = out.entry(p.group).or_insert((p.name.as_str(), p.error));
            if p.error > e.1 {
                *e = (p.name.as_str(), p.error);
            }
        }
        out
    }
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::shape(
            "grad_check",
            format!("objective is {:?}", v.shape()),
        ));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of the scalar objective `f` against central
/// differences over every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Config(format!(
            "step must be positive, got {}",
            opts.step
        )));
    }
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let out = f(&mut tape, store)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("objective is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&tape, &grads);

    let mut probe = store.clone();
    let mut checks = Vec::with_capacity(store.len());
    for (pi, param) in analytic.iter().enumerate() {
        let id = super::params::ParamId(pi);
        let mut numeric = vec![0.0; param.value.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.param(id).value.data()[k];
            probe.param_mut(id).value.data_mut()[k] = orig + opts.step;
            let plus = evaluate(&f, &probe)?;
            probe.param_mut(id).value.data_mut()[k] = orig - opts.step;
            let minus = evaluate(&f, &probe)?;
            probe.param_mut(id).value.data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * opts.step);
        }
        let a = param.grad.data();
        let diff_norm = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let a_norm = param.grad.norm();
        let n_norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (branch, error, passed) = if a_norm < opts.abs_threshold {
            let max_abs = a
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            (Branch::Absolute, max_abs, max_abs <= opts.abs_tol)
        } else {
            let rel = diff_norm / a_norm.max(n_norm);
            (Branch::Relative, rel, rel <= opts.tol)
        };
        checks.push(ParamCheck {
            name: param.name.clone(),
            group: param.group,
            branch,
            error,
            passed,
        });
    }

    let max_of = |b: Branch| {
        checks
            .iter()
            .filter(|c| c.branch == b)
            .fold(0.0f64, |m, c| m.max(c.error))
    };
    let passed = checks.iter().all(|c| c.passed);
    let offending_op = if passed {
        None
    } else {
        tape.localize_fault(opts.step, opts.tol.max(1e-4))?
    };
    Ok(GradCheckReport {
        max_rel_error: max_of(Branch::Relative),
        max_abs_error: max_of(Branch::Absolute),
        params: checks,
        passed,
        offending_op,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn square(tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let x = store.var(tape, "x")?;
        let sq = tape.mul(x, x)?;
        tape.sum(sq)
    }

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        store.insert("x", ParamGroup::Other, Matrix::scalar(3.0));
        let report = grad_check(&store, &GradCheckOptions::default(), square).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        assert_eq!(report.params[0].branch, Branch::Relative);
    }

    #[test]
    fn constant_objective_uses_absolute_branch() {
        let mut store = ParamStore::new();
        store.insert("x", ParamGroup::Wcb, Matrix::row_vector(vec![1.0, 2.0]));
        let report = grad_check(&store, &GradCheckOptions::default(), |tape, store| {
            let _ = store.var(tape, "x")?;
            Ok(tape.leaf(Matrix::scalar(4.0)))
        })
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.params[0].branch, Branch::Absolute);
        assert_eq!(report.max_abs_error, 0.0);
    }

    #[test]
    fn fault_is_detected_and_named() {
        let mut store = ParamStore::new();
        store.insert("x", ParamGroup::Other, Matrix::row_vector(vec![0.3, -1.2]));
        let opts = GradCheckOptions {
            fault: Some(OpKind::Mul),
            ..Default::default()
        };
        let report = grad_check(&store, &opts, square).unwrap();
        assert!(!report.passed);
        assert_eq!(report.offending_op, Some(OpKind::Mul));
    }

    #[test]
    fn rejects_bad_step_and_nonfinite() {
        let mut store = ParamStore::new();
        store.insert("x", ParamGroup::Other, Matrix::scalar(1.0));
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            grad_check(&store, &opts, square),
            Err(Error::Config(_))
        ));
        let r = grad_check(&store, &GradCheckOptions::default(), |tape, _| {
            Ok(tape.leaf(Matrix::scalar(f64::NAN)))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
