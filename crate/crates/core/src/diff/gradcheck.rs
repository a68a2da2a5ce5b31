//! Central-difference verification of tape gradients.
//!
//! The function under test is rebuilt from scratch for every probe, so it
//! must be a pure function of its parameter tensors. A bitwise comparison of
//! two identical forward passes guards that assumption before any
//! finite-difference arithmetic happens.

use rand::Rng;

use crate::diff::tape::{Tape, VarId};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tol
    }
}

/// Relative error with a floor on the denominator so entries near zero are
/// judged on absolute terms.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.leaf(p)).collect();
    let root = f(&mut tape, &ids)?;
    if tape.values(root).len() != 1 {
        return Err(Error::input(format!(
            "check_gradients: function output must be scalar, got shape {:?}",
            tape.shape(root)
        )));
    }
    let v = tape.scalar_value(root);
    if !v.is_finite() {
        return Err(Error::numeric(format!(
            "check_gradients: forward produced non-finite value {v}"
        )));
    }
    Ok(v)
}

fn check_impl<F>(
    f: &F,
    params: &[Tensor],
    eps: f64,
    tol: f64,
    entries: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::input(format!(
            "check_gradients: eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::input(format!(
            "check_gradients: tol must be positive, got {tol}"
        )));
    }
    if params.is_empty() {
        return Err(Error::input("check_gradients: no parameters to check"));
    }

    // Determinism guard: the same inputs must produce bitwise-identical
    // output, otherwise finite differences measure noise, not gradients.
    let v1 = eval(f, params)?;
    let v2 = eval(f, params)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::numeric(format!(
            "check_gradients: two identical forward passes disagree ({v1:?} vs {v2:?}); \
             the function is not deterministic"
        )));
    }

    // Analytic gradients, one backward pass.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let root = f(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("requires_grad leaf has grad").to_vec())
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tol,
    };

    for (pi, idxs) in entries.iter().enumerate() {
        for &j in idxs {
            let orig = work[pi].values[j];
            work[pi].values[j] = orig + eps;
            let fp = eval(f, &work)?;
            work[pi].values[j] = orig - eps;
            let fm = eval(f, &work)?;
            work[pi].values[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(WorstEntry {
                    param: pi,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    Ok(report)
}

/// Compare tape gradients against central differences at every entry of
/// every parameter.
pub fn check_gradients<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let entries: Vec<Vec<usize>> = params
        .iter()
        .map(|p| (0..p.values.len()).collect())
        .collect();
    check_impl(&f, params, eps, tol, &entries)
}

/// Same check restricted to at most `per_param` entries of each parameter,
/// drawn without replacement from `rng`. Every parameter still contributes.
pub fn check_gradients_sampled<F, R: Rng>(
    f: F,
    params: &[Tensor],
    eps: f64,
    tol: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if per_param == 0 {
        return Err(Error::input("check_gradients_sampled: per_param must be > 0"));
    }
    let entries: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let n = p.values.len();
            if n <= per_param {
                (0..n).collect()
            } else {
                // Partial Fisher-Yates: first `per_param` slots of a shuffle.
                let mut idx: Vec<usize> = (0..n).collect();
                for i in 0..per_param {
                    let j = rng.gen_range(i..n);
                    idx.swap(i, j);
                }
                idx.truncate(per_param);
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    check_impl(&f, params, eps, tol, &entries)
}
