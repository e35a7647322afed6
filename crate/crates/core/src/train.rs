//! Minibatch Adam training over the physics-informed losses.
//!
//! Every training entry point runs the same loop: draw a seeded
//! minibatch of collocation pairs (with replacement), differentiate the
//! loss on it, take one Adam step, and every 100 iterations evaluate
//! the loss on the full pair set. The full-set value drives the
//! stopping rule — converged when it falls below `loss_tol`, aborted
//! with the recorded history when it exceeds the divergence limit —
//! and is what the history rows `(iteration, learning rate, loss)`
//! record.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::adam::{AdamState, TrainSchedule};
use crate::deeponet::{ContModel, DeepONetModel, RteOperatorModel};
use crate::equation::{Equation, Grid};
use crate::error::{Error, HistoryRow, Result};
use crate::loss::{
    cont_loss, cont_loss_grad, pi_loss, pi_loss_grad, rte_loss, rte_loss_grad, StepLossSpec,
};

/// Full-set loss beyond this aborts training as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Full-set evaluation / history cadence, in iterations.
pub const RECORD_EVERY: usize = 100;

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// `(iteration, learning rate, full-set loss)` rows; the first is
    /// the starting point at iteration 0, iterations strictly increase.
    pub history: Vec<HistoryRow>,
    /// Adam steps actually taken.
    pub iterations: usize,
    /// Last recorded full-set loss.
    pub final_loss: f64,
    /// Whether `final_loss ≤ loss_tol` stopped the run.
    pub converged: bool,
}

/// Shared driver. `eval(flat, Some(batch))` must return the loss and
/// gradient on the batch; `eval(flat, None)` the full-set loss (its
/// gradient slot is ignored). On error the parameters are left at the
/// caller's responsibility — the wrappers restore the initial model.
fn run_adam<F>(
    flat: &mut [f64],
    sched: &TrainSchedule,
    seed: u64,
    pairs: &[(usize, usize)],
    mut eval: F,
) -> Result<TrainReport>
where
    F: FnMut(&[f64], Option<&[(usize, usize)]>) -> Result<(f64, Vec<f64>)>,
{
    sched.validate()?;
    assert!(!pairs.is_empty(), "training needs at least one collocation pair");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut state = AdamState::new(flat.len());
    let mut history: Vec<HistoryRow> = Vec::new();

    let (mut full, _) = eval(flat, None)?;
    history.push((0, state.lr(sched), full));
    if !full.is_finite() || full > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            iteration: 0,
            loss: full,
            history,
        });
    }
    if full <= sched.loss_tol {
        return Ok(TrainReport {
            history,
            iterations: 0,
            final_loss: full,
            converged: true,
        });
    }

    let mut batch = vec![(0usize, 0usize); sched.batch];
    let mut iterations = 0;
    while iterations < sched.max_iters {
        for slot in batch.iter_mut() {
            *slot = pairs[rng.gen_range(0..pairs.len())];
        }
        let (_, grads) = eval(flat, Some(&batch))?;
        state.apply(flat, &grads, sched)?;
        iterations += 1;

        if iterations % RECORD_EVERY == 0 || iterations == sched.max_iters {
            let (value, _) = eval(flat, None)?;
            full = value;
            history.push((iterations, state.lr(sched), full));
            if !full.is_finite() || full > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    iteration: iterations,
                    loss: full,
                    history,
                });
            }
            if full <= sched.loss_tol {
                return Ok(TrainReport {
                    history,
                    iterations,
                    final_loss: full,
                    converged: true,
                });
            }
        }
    }

    Ok(TrainReport {
        history,
        iterations,
        final_loss: full,
        converged: false,
    })
}

/// Train a single-step propagator network in place. On error the model
/// is restored to its incoming parameters; the history travels inside
/// the divergence error.
pub fn train_deeponet(
    model: &mut DeepONetModel,
    spec: &StepLossSpec,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    let mut flat = Vec::with_capacity(model.n_params());
    model.write_flat(&mut flat);
    let init = flat.clone();
    let outcome = {
        let m = &mut *model;
        run_adam(&mut flat, sched, seed, pairs, move |p, batch| {
            m.read_flat(p, &mut 0);
            match batch {
                Some(b) => pi_loss_grad(m, spec, inputs, b),
                None => pi_loss(m, spec, inputs, pairs).map(|v| (v, Vec::new())),
            }
        })
    };
    match outcome {
        Ok(report) => {
            model.read_flat(&flat, &mut 0);
            Ok(report)
        }
        Err(e) => {
            model.read_flat(&init, &mut 0);
            Err(e)
        }
    }
}

/// Train the composite phase-space model in place.
pub fn train_rte(
    model: &mut RteOperatorModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    let mut flat = Vec::with_capacity(model.n_params());
    model.write_flat(&mut flat);
    let init = flat.clone();
    let outcome = {
        let m = &mut *model;
        run_adam(&mut flat, sched, seed, pairs, move |p, batch| {
            m.read_flat(p, &mut 0);
            match batch {
                Some(b) => rte_loss_grad(m, eq, grid, dt, inputs, b),
                None => rte_loss(m, eq, grid, dt, inputs, pairs).map(|v| (v, Vec::new())),
            }
        })
    };
    match outcome {
        Ok(report) => {
            model.read_flat(&flat, &mut 0);
            Ok(report)
        }
        Err(e) => {
            model.read_flat(&init, &mut 0);
            Err(e)
        }
    }
}

/// Train a whole-horizon solution network in place.
#[allow(clippy::too_many_arguments)]
pub fn train_cont(
    model: &mut ContModel,
    eq: &Equation,
    grid: &Grid,
    n_time_nodes: usize,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    let mut flat = Vec::with_capacity(model.inner.n_params());
    model.inner.write_flat(&mut flat);
    let init = flat.clone();
    let outcome = {
        let m = &mut *model;
        run_adam(&mut flat, sched, seed, pairs, move |p, batch| {
            m.inner.read_flat(p, &mut 0);
            match batch {
                Some(b) => cont_loss_grad(m, eq, grid, n_time_nodes, inputs, b),
                None => {
                    cont_loss(m, eq, grid, n_time_nodes, inputs, pairs).map(|v| (v, Vec::new()))
                }
            }
        })
    };
    match outcome {
        Ok(report) => {
            model.inner.read_flat(&flat, &mut 0);
            Ok(report)
        }
        Err(e) => {
            model.inner.read_flat(&init, &mut 0);
            Err(e)
        }
    }
}
