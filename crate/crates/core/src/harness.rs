//! Randomized numeric check of the long-time stability bounds.
//!
//! For a non-expansive linear propagator `P` (operator norm ≤ 1) and a
//! surrogate `P_NN = P(I+E)` whose one-step relative error satisfies
//! `sup_{‖f‖=1} ‖P⁻¹P_NN f − f‖ = ‖E‖ ≤ δ`, the accumulated error after
//! `K` steps obeys
//!
//! * always: `‖P^K − P_NN^K‖ ≤ δ·K·(1+δ)^K`, and
//! * when `‖P‖ ≤ η < 1` and `δ ≤ (1−η)/2`: `‖P^K − P_NN^K‖ ≤ δ·K·((1+η)/2)^{K−1}`.
//!
//! Each trial draws a dense Gaussian matrix rescaled to operator norm
//! `η`, a Gaussian perturbation rescaled to norm `δ`, and estimates the
//! left-hand supremum by probing `P^K − P_NN^K` with 200 random unit
//! vectors plus its top right singular vector. A sampled supremum can
//! only underestimate the true one, which is conservative when hunting
//! for violations of an upper bound.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Number of random unit-vector probes per trial, in addition to the
/// top singular vector.
const N_PROBES: usize = 200;

/// Trial-suite description for the stability-bound harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundHarnessConfig {
    /// State dimension of the random linear propagators.
    pub n: usize,
    /// Target operator norm of the propagator, `0 < η ≤ 1`.
    pub eta: f64,
    /// One-step relative error of the surrogate, `δ ≥ 0`.
    pub delta: f64,
    /// Number of composed steps.
    pub k: usize,
    /// Number of independent random trials.
    pub trials: usize,
    /// Seed for the trial stream.
    pub seed: u64,
}

/// Outcome of a harness run.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Trials performed.
    pub trials: usize,
    /// Whether the contraction-regime bound applied (`η < 1` and `δ ≤ (1−η)/2`).
    pub contraction_bound_applies: bool,
    /// Trials whose observed supremum exceeded `δK(1+δ)^K`.
    pub general_violations: usize,
    /// Trials whose observed supremum exceeded `δK((1+η)/2)^{K−1}`;
    /// zero when that bound does not apply.
    pub contraction_violations: usize,
    /// Worst observed/bound ratio against the general bound.
    pub worst_general_ratio: f64,
    /// Worst observed/bound ratio against the contraction bound (0 when
    /// it does not apply).
    pub worst_contraction_ratio: f64,
    /// Largest observed supremum across all trials.
    pub max_observed: f64,
}

/// `δ·K·(1+δ)^K` — holds whenever the exact propagator is non-expansive.
pub fn general_bound(delta: f64, k: usize) -> f64 {
    delta * k as f64 * (1.0 + delta).powi(k as i32)
}

/// `δ·K·((1+η)/2)^{K−1}` — holds in the strict-contraction regime.
pub fn contraction_bound(delta: f64, eta: f64, k: usize) -> f64 {
    delta * k as f64 * ((1.0 + eta) / 2.0).powi(k as i32 - 1)
}

/// Whether the contraction-regime bound is in force for `(η, δ)`.
pub fn contraction_bound_applies(eta: f64, delta: f64) -> bool {
    eta < 1.0 && delta <= 0.5 * (1.0 - eta)
}

fn gaussian_matrix(n: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn top_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

fn mat_pow(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Estimates `sup_{‖f‖=1} ‖D f‖` by probing with random unit vectors and
/// the top right singular vector of `D`.
fn observed_sup(d: &DMatrix<f64>, rng: &mut ChaCha20Rng) -> f64 {
    let n = d.ncols();
    let mut best: f64 = 0.0;
    for _ in 0..N_PROBES {
        let mut v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        v /= norm;
        best = best.max((d * &v).norm());
    }
    let svd = d.clone().svd(false, true);
    let (top, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, 0.0_f64), |(bi, bv), (i, &s)| {
            if s > bv {
                (i, s)
            } else {
                (bi, bv)
            }
        });
    if let Some(v_t) = svd.v_t {
        let v = v_t.row(top).transpose();
        let norm = v.norm();
        if norm > 0.0 {
            best = best.max((d * (v / norm)).norm());
        }
    }
    best
}

/// Runs the randomized trial suite and tallies bound violations.
pub fn bound_check(cfg: &BoundHarnessConfig) -> Result<BoundReport> {
    if cfg.n == 0 || cfg.k == 0 || cfg.trials == 0 {
        return Err(Error::Config(
            "bound harness needs n ≥ 1, K ≥ 1, trials ≥ 1".into(),
        ));
    }
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        return Err(Error::Config(format!(
            "operator norm target η must satisfy 0 < η ≤ 1, got {}",
            cfg.eta
        )));
    }
    if !(cfg.delta >= 0.0 && cfg.delta.is_finite()) {
        return Err(Error::Config(format!(
            "one-step error δ must be finite and ≥ 0, got {}",
            cfg.delta
        )));
    }

    let g_bound = general_bound(cfg.delta, cfg.k);
    let applies = contraction_bound_applies(cfg.eta, cfg.delta);
    let c_bound = contraction_bound(cfg.delta, cfg.eta, cfg.k);

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut report = BoundReport {
        trials: cfg.trials,
        contraction_bound_applies: applies,
        general_violations: 0,
        contraction_violations: 0,
        worst_general_ratio: 0.0,
        worst_contraction_ratio: 0.0,
        max_observed: 0.0,
    };

    for trial in 0..cfg.trials {
        let raw = gaussian_matrix(cfg.n, &mut rng);
        let s = top_singular_value(&raw);
        if s == 0.0 {
            return Err(Error::Solver {
                context: format!("bound harness trial {trial}: degenerate random matrix"),
                iterations: 0,
                residual: 0.0,
            });
        }
        let p = raw * (cfg.eta / s);

        let e = if cfg.delta == 0.0 {
            DMatrix::zeros(cfg.n, cfg.n)
        } else {
            let raw_e = gaussian_matrix(cfg.n, &mut rng);
            let se = top_singular_value(&raw_e);
            if se == 0.0 {
                return Err(Error::Solver {
                    context: format!("bound harness trial {trial}: degenerate perturbation"),
                    iterations: 0,
                    residual: 0.0,
                });
            }
            raw_e * (cfg.delta / se)
        };

        let p_nn = &p * (DMatrix::identity(cfg.n, cfg.n) + &e);
        let diff = mat_pow(&p, cfg.k) - mat_pow(&p_nn, cfg.k);
        let observed = observed_sup(&diff, &mut rng);
        report.max_observed = report.max_observed.max(observed);

        let g_ratio = if g_bound == 0.0 {
            if observed == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            observed / g_bound
        };
        report.worst_general_ratio = report.worst_general_ratio.max(g_ratio);
        if observed > g_bound {
            report.general_violations += 1;
        }

        if applies {
            let c_ratio = if c_bound == 0.0 {
                if observed == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                observed / c_bound
            };
            report.worst_contraction_ratio = report.worst_contraction_ratio.max(c_ratio);
            if observed > c_bound {
                report.contraction_violations += 1;
            }
        }
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_formulas_evaluate_as_written() {
        // Direct arithmetic of both closed-form bounds.
        let delta = 0.04;
        let eta = 0.9;
        let k = 50;
        let want_general = 0.04 * 50.0 * 1.04_f64.powi(50);
        assert_eq!(general_bound(delta, k), want_general);
        let want_contraction = 0.04 * 50.0 * 0.95_f64.powi(49);
        assert_eq!(contraction_bound(delta, eta, k), want_contraction);
        assert!(contraction_bound_applies(0.9, 0.04));
        // Exactly representable boundary: (1 − 0.5)/2 = 0.25.
        assert!(contraction_bound_applies(0.5, 0.25));
        assert!(!contraction_bound_applies(0.5, 0.2501));
        assert!(!contraction_bound_applies(1.0, 0.01));
    }

    #[test]
    fn sup_estimator_matches_diagonal_oracle() {
        // For diagonal P = diag(a_i) and E = diag(e_i), the K-step
        // difference is diag(a_i^K − (a_i(1+e_i))^K) and the exact
        // operator norm is the largest |entry|.
        let a = [0.9, 0.5, -0.7, 0.3];
        let e = [0.02, -0.03, 0.01, 0.04];
        let k = 7;
        let p = DMatrix::from_diagonal(&DVector::from_row_slice(&a));
        let p_nn = DMatrix::from_diagonal(&DVector::from_iterator(
            4,
            a.iter().zip(&e).map(|(ai, ei)| ai * (1.0 + ei)),
        ));
        let diff = mat_pow(&p, k) - mat_pow(&p_nn, k);
        let want = a
            .iter()
            .zip(&e)
            .map(|(ai, ei)| (ai.powi(k as i32) - (ai * (1.0 + ei)).powi(k as i32)).abs())
            .fold(0.0_f64, f64::max);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let got = observed_sup(&diff, &mut rng);
        assert!(
            (got - want).abs() <= 1e-12 * want,
            "estimator {got} vs oracle {want}"
        );
    }

    #[test]
    fn exact_surrogate_never_violates() {
        let cfg = BoundHarnessConfig {
            n: 8,
            eta: 0.9,
            delta: 0.0,
            k: 10,
            trials: 50,
            seed: 1,
        };
        let report = bound_check(&cfg).unwrap();
        assert_eq!(report.general_violations, 0);
        assert_eq!(report.contraction_violations, 0);
        assert_eq!(report.max_observed, 0.0);
        assert_eq!(report.worst_general_ratio, 0.0);
    }

    #[test]
    fn single_step_suite_respects_the_general_bound() {
        let cfg = BoundHarnessConfig {
            n: 10,
            eta: 1.0,
            delta: 0.05,
            k: 1,
            trials: 100,
            seed: 2,
        };
        let report = bound_check(&cfg).unwrap();
        // One step: ‖P − P(I+E)‖ = ‖PE‖ ≤ δ < δ(1+δ).
        assert_eq!(report.general_violations, 0);
        assert!(!report.contraction_bound_applies);
        assert!(report.max_observed <= cfg.delta * (1.0 + 1e-12));
    }

    #[test]
    fn contraction_regime_suite_has_no_violations() {
        let cfg = BoundHarnessConfig {
            n: 20,
            eta: 0.9,
            delta: 0.04,
            k: 50,
            trials: 100,
            seed: 7,
        };
        let report = bound_check(&cfg).unwrap();
        assert!(report.contraction_bound_applies);
        assert_eq!(report.general_violations, 0);
        assert_eq!(report.contraction_violations, 0);
        assert!(report.worst_contraction_ratio <= 1.0);
        assert!(report.worst_contraction_ratio > 0.0);
    }

    #[test]
    fn non_expansive_suite_respects_the_general_bound() {
        let cfg = BoundHarnessConfig {
            n: 20,
            eta: 1.0,
            delta: 0.05,
            k: 30,
            trials: 100,
            seed: 11,
        };
        let report = bound_check(&cfg).unwrap();
        assert!(!report.contraction_bound_applies);
        assert_eq!(report.general_violations, 0);
        assert!(report.worst_general_ratio <= 1.0);
    }

    #[test]
    fn same_seed_reproduces_the_report() {
        let cfg = BoundHarnessConfig {
            n: 12,
            eta: 0.8,
            delta: 0.03,
            k: 20,
            trials: 25,
            seed: 99,
        };
        let a = bound_check(&cfg).unwrap();
        let b = bound_check(&cfg).unwrap();
        assert_eq!(a, b);
        let c = bound_check(&BoundHarnessConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.worst_general_ratio, c.worst_general_ratio);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let good = BoundHarnessConfig {
            n: 5,
            eta: 0.9,
            delta: 0.01,
            k: 5,
            trials: 3,
            seed: 0,
        };
        for bad in [
            BoundHarnessConfig { n: 0, ..good },
            BoundHarnessConfig { k: 0, ..good },
            BoundHarnessConfig { trials: 0, ..good },
            BoundHarnessConfig { eta: 0.0, ..good },
            BoundHarnessConfig { eta: 1.2, ..good },
            BoundHarnessConfig { delta: -0.1, ..good },
            BoundHarnessConfig {
                delta: f64::NAN,
                ..good
            },
        ] {
            assert!(matches!(bound_check(&bad), Err(Error::Config(_))));
        }
    }
}
