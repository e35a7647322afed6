//! Relative L² error metrics for trajectory ensembles.
//!
//! Two measures quantify how well a learned propagator tracks the
//! reference solver over an ensemble of test functions. The per-step
//! measure is the ensemble mean of each member's relative discrete L²
//! error at one step; the aggregate measure is a single ratio of
//! root-sum-squares accumulated over every grid point, ensemble member,
//! and step `1..=K`. Both are dimensionless, so any uniform quadrature
//! weight cancels and plain sums of squares suffice.

use crate::error::{Error, Result};
use crate::rollout::Trajectory;

/// Per-step and aggregated relative L² errors of a predicted ensemble
/// against a reference ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// `per_step[k-1]` is the relative error at step `k` for `k = 1..=K`.
    pub per_step: Vec<f64>,
    /// Aggregate relative error over steps `1..=K`.
    pub aggregate: f64,
    /// Number of ensemble members.
    pub ensemble_size: usize,
    /// Time step shared by every trajectory in both ensembles.
    pub dt: f64,
    /// Horizon `T = K·Δt`.
    pub horizon: f64,
}

/// Checks that the two ensembles are nonempty, pairwise consistent, and
/// mutually consistent; returns the common `(K, dt, state dimension)`.
fn check_ensembles(pred: &[Trajectory], reference: &[Trajectory]) -> Result<(usize, f64, usize)> {
    if pred.is_empty() || pred.len() != reference.len() {
        return Err(Error::Shape {
            op: "error metrics",
            details: format!(
                "ensembles must be nonempty and equal-sized, got {} predicted vs {} reference",
                pred.len(),
                reference.len()
            ),
        });
    }
    let k = pred[0].n_steps();
    let dt = pred[0].dt;
    let dim = pred[0].states[0].len();
    for (j, (p, r)) in pred.iter().zip(reference).enumerate() {
        let ok = p.n_steps() == k
            && r.n_steps() == k
            && p.dt == dt
            && r.dt == dt
            && p.states.iter().all(|s| s.len() == dim)
            && r.states.iter().all(|s| s.len() == dim);
        if !ok {
            return Err(Error::Shape {
                op: "error metrics",
                details: format!("ensemble member {j} disagrees on step count, dt, or state size"),
            });
        }
    }
    Ok((k, dt, dim))
}

/// Relative error at step `k`: the ensemble mean over members `j` of
/// `sqrt(Σ_i (pred_j[k][i] − ref_j[k][i])² / Σ_i ref_j[k][i]²)`.
///
/// Fails if any member's reference state at step `k` has zero norm,
/// which leaves the ratio undefined.
pub fn rel_err_step(pred: &[Trajectory], reference: &[Trajectory], k: usize) -> Result<f64> {
    let (n_steps, _, _) = check_ensembles(pred, reference)?;
    if k > n_steps {
        return Err(Error::Config(format!(
            "step index {k} exceeds trajectory length {n_steps}"
        )));
    }
    let mut acc = 0.0;
    for (j, (p, r)) in pred.iter().zip(reference).enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in p.states[k].iter().zip(&r.states[k]) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        if den == 0.0 {
            return Err(Error::NonFinite(format!(
                "relative error at step {k}: reference member {j} has zero norm"
            )));
        }
        acc += (num / den).sqrt();
    }
    Ok(acc / pred.len() as f64)
}

/// Aggregate relative error over steps `1..=k_max`:
/// `sqrt(ΣΣΣ (pred − ref)² / ΣΣΣ ref²)` with the triple sum running over
/// grid points, ensemble members, and steps.
///
/// Fails if the reference ensemble is identically zero over the whole
/// window, which leaves the ratio undefined.
pub fn rel_err_agg(pred: &[Trajectory], reference: &[Trajectory], k_max: usize) -> Result<f64> {
    let (n_steps, _, _) = check_ensembles(pred, reference)?;
    if k_max == 0 || k_max > n_steps {
        return Err(Error::Config(format!(
            "aggregation window {k_max} must lie in 1..={n_steps}"
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        for n in 1..=k_max {
            for (a, b) in p.states[n].iter().zip(&r.states[n]) {
                num += (a - b) * (a - b);
                den += b * b;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::NonFinite(
            "aggregate relative error: reference ensemble has zero norm".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Builds the full [`ErrorReport`] for a predicted ensemble: per-step
/// errors for `k = 1..=K` plus the aggregate over the whole horizon.
pub fn error_report(pred: &[Trajectory], reference: &[Trajectory]) -> Result<ErrorReport> {
    let (k_steps, dt, _) = check_ensembles(pred, reference)?;
    if k_steps == 0 {
        return Err(Error::Config(
            "error report needs at least one step beyond the initial state".into(),
        ));
    }
    let mut per_step = Vec::with_capacity(k_steps);
    for k in 1..=k_steps {
        per_step.push(rel_err_step(pred, reference, k)?);
    }
    let aggregate = rel_err_agg(pred, reference, k_steps)?;
    Ok(ErrorReport {
        per_step,
        aggregate,
        ensemble_size: pred.len(),
        dt,
        horizon: k_steps as f64 * dt,
    })
}
