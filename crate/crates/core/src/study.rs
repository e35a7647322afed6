//! Time-integrator order verification by step-size refinement.
//!
//! Runs the reference solver over a geometric ladder of step sizes,
//! measures the relative L² error of each final state against a much
//! finer reference run, and fits the least-squares slope of
//! `log(error)` versus `log(Δt)`. A first-order scheme lands near 1, a
//! second-order one near 2.

use crate::equation::{Equation, Grid};
use crate::error::{Error, Result};
use crate::stepper::{RefStepper, Scheme};

/// The reference trajectory uses `min(Δt)/64` as its step size.
const REFERENCE_REFINEMENT: f64 = 64.0;

/// Refinement-study outcome: one error per step size plus the fitted
/// convergence order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderStudy {
    /// Step sizes, sorted descending.
    pub dts: Vec<f64>,
    /// Relative L² error of the final state at each step size.
    pub errors: Vec<f64>,
    /// Least-squares slope of `log(error)` vs `log(Δt)`.
    pub slope: f64,
}

/// Validates the step-size ladder: at least three entries, positive,
/// geometric, and each dividing the horizon evenly. Returns the sizes
/// sorted descending with their step counts.
fn check_ladder(dts: &[f64], t_end: f64) -> Result<Vec<(f64, usize)>> {
    if dts.len() < 3 {
        return Err(Error::Config(format!(
            "order study needs at least 3 step sizes, got {}",
            dts.len()
        )));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::Config(format!("horizon must be positive, got {t_end}")));
    }
    let mut sorted = dts.to_vec();
    if sorted.iter().any(|dt| !(dt.is_finite() && *dt > 0.0)) {
        return Err(Error::Config("step sizes must be positive and finite".into()));
    }
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let ratio = sorted[1] / sorted[0];
    if (ratio - 1.0).abs() < 1e-12 {
        return Err(Error::Config("step sizes must be distinct".into()));
    }
    for w in sorted.windows(2) {
        let r = w[1] / w[0];
        if (r - ratio).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "step sizes must form a geometric ladder; got ratios {ratio} and {r}"
            )));
        }
    }
    sorted
        .into_iter()
        .map(|dt| {
            let n = (t_end / dt).round();
            if (n * dt - t_end).abs() > 1e-9 * t_end || n < 1.0 {
                Err(Error::Config(format!(
                    "step size {dt} does not divide the horizon {t_end} evenly"
                )))
            } else {
                Ok((dt, n as usize))
            }
        })
        .collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    (num / den).sqrt()
}

/// Runs the refinement study for `scheme`, comparing each ladder run
/// against a Crank–Nicolson reference at `min(Δt)/64` (second-order, so
/// its own error is negligible next to every measured error).
pub fn order_study(
    eq: Equation,
    grid: &Grid,
    f0: &[f64],
    dts: &[f64],
    t_end: f64,
    scheme: Scheme,
) -> Result<OrderStudy> {
    let ladder = check_ladder(dts, t_end)?;
    assert_eq!(
        f0.len(),
        grid.n_points(),
        "initial state must live on the grid: {} vs {}",
        f0.len(),
        grid.n_points()
    );

    let dt_fine = ladder.last().unwrap().0 / REFERENCE_REFINEMENT;
    let n_fine = (t_end / dt_fine).round() as usize;
    let fine = RefStepper::new(eq, grid.clone(), dt_fine, Scheme::CrankNicolson)?;
    let reference = fine.run(f0, n_fine)?.pop().unwrap();

    let mut errors = Vec::with_capacity(ladder.len());
    for &(dt, n) in &ladder {
        let stepper = RefStepper::new(eq, grid.clone(), dt, scheme)?;
        let last = stepper.run(f0, n)?.pop().unwrap();
        let err = rel_l2(&last, &reference);
        if !(err.is_finite() && err > 0.0) {
            return Err(Error::NonFinite(format!(
                "order study error at step size {dt} is {err}; cannot fit a slope"
            )));
        }
        errors.push(err);
    }

    // Least-squares slope of log(error) against log(Δt).
    let xs: Vec<f64> = ladder.iter().map(|(dt, _)| dt.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - xbar) * (y - ybar);
        sxx += (x - xbar) * (x - xbar);
    }
    let slope = sxy / sxx;

    Ok(OrderStudy {
        dts: ladder.into_iter().map(|(dt, _)| dt).collect(),
        errors,
        slope,
    })
}

/// Refinement study for the trapezoidal (Crank–Nicolson) stepper.
pub fn cn_order_study(
    eq: Equation,
    grid: &Grid,
    f0: &[f64],
    dts: &[f64],
    t_end: f64,
) -> Result<OrderStudy> {
    order_study(eq, grid, f0, dts, t_end, Scheme::CrankNicolson)
}

/// Refinement study for the backward-Euler stepper.
pub fn be_order_study(
    eq: Equation,
    grid: &Grid,
    f0: &[f64],
    dts: &[f64],
    t_end: f64,
) -> Result<OrderStudy> {
    order_study(eq, grid, f0, dts, t_end, Scheme::BackwardEuler)
}

/// Stock refinement-study problem: a nonlinear reaction–diffusion run
/// on 64 interior-resolved points with a smooth two-mode initial state,
/// over the standard ladder `{0.4, 0.2, 0.1, 0.05}`.
pub fn default_study_problem() -> (Equation, Grid, Vec<f64>, Vec<f64>, f64) {
    let eq = Equation::rd(0.05, 0.05);
    let grid = Grid::dirichlet(64);
    let f0 = grid
        .points()
        .iter()
        .map(|x| {
            let x = x[0];
            0.5 * (std::f64::consts::PI * x).sin() + 0.2 * (2.0 * std::f64::consts::PI * x).sin()
        })
        .collect();
    (eq, grid, f0, vec![0.4, 0.2, 0.1, 0.05], 0.8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoidal_stepper_is_second_order_on_linear_heat() {
        let (_, grid, f0, dts, t_end) = default_study_problem();
        let heat = Equation::rd(0.05, 0.0);
        let study = cn_order_study(heat, &grid, &f0, &dts, t_end).unwrap();
        assert!(
            (1.9..=2.1).contains(&study.slope),
            "slope {} errors {:?}",
            study.slope,
            study.errors
        );
        // Errors must shrink monotonically down the ladder.
        for w in study.errors.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn backward_euler_stepper_is_first_order_on_linear_heat() {
        let (_, grid, f0, dts, t_end) = default_study_problem();
        let heat = Equation::rd(0.05, 0.0);
        let study = be_order_study(heat, &grid, &f0, &dts, t_end).unwrap();
        assert!(
            (0.9..=1.1).contains(&study.slope),
            "slope {} errors {:?}",
            study.slope,
            study.errors
        );
    }

    #[test]
    fn nonlinear_reaction_keeps_the_trapezoidal_order() {
        let (eq, grid, f0, dts, t_end) = default_study_problem();
        let study = cn_order_study(eq, &grid, &f0, &dts, t_end).unwrap();
        assert!(
            (1.8..=2.2).contains(&study.slope),
            "slope {} errors {:?}",
            study.slope,
            study.errors
        );
    }

    #[test]
    fn short_or_crooked_ladders_are_rejected() {
        let (eq, grid, f0, _, t_end) = default_study_problem();
        assert!(matches!(
            cn_order_study(eq, &grid, &f0, &[0.4], t_end),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cn_order_study(eq, &grid, &f0, &[0.4, 0.2], t_end),
            Err(Error::Config(_))
        ));
        // Not geometric.
        assert!(matches!(
            cn_order_study(eq, &grid, &f0, &[0.4, 0.2, 0.15], t_end),
            Err(Error::Config(_))
        ));
        // Does not divide the horizon.
        assert!(matches!(
            cn_order_study(eq, &grid, &f0, &[0.6, 0.3, 0.15], 0.8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn study_is_deterministic() {
        let (eq, grid, f0, dts, t_end) = default_study_problem();
        let a = cn_order_study(eq, &grid, &f0, &dts, t_end).unwrap();
        let b = cn_order_study(eq, &grid, &f0, &dts, t_end).unwrap();
        assert_eq!(a, b);
    }
}
