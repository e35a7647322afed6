//! Rolling one-step propagators forward in time.
//!
//! A [`Propagator`] maps the current state to the next; [`rollout`]
//! drives any of them for `K` steps, recording every state and failing
//! fast on non-finite values. Three engines are provided: the
//! reference implicit solver, the frozen learned operator, and the
//! learned operator with the per-step last-layer refit. The refit
//! engine keeps rolling when a refit fails — the step falls back to
//! the current weights and the event is recorded.

use crate::deeponet::{DeepONetModel, RteOperatorModel};
use crate::equation::{Equation, Grid};
use crate::error::{Error, Result};
use crate::stepper::{RefStepper, Scheme};
use crate::transfer::{tl_update, TlConfig};

/// A discrete-time state map.
pub trait Propagator {
    /// Next state from the current one; `step` counts from 0.
    fn advance(&mut self, f: &[f64], step: usize) -> Result<Vec<f64>>;
}

/// A rolled-out trajectory: `states[0]` is the initial condition,
/// `states[n]` the state after `n` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Physical time of state `n`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// Drive a propagator for `k` steps from `f0`.
pub fn rollout<P: Propagator>(prop: &mut P, f0: &[f64], k: usize, dt: f64) -> Result<Trajectory> {
    assert!(k >= 1, "rollout needs at least one step");
    let mut states = Vec::with_capacity(k + 1);
    states.push(f0.to_vec());
    for step in 0..k {
        let next = match prop.advance(states.last().unwrap(), step) {
            Ok(f) => f,
            Err(Error::NonFinite(context)) => {
                return Err(Error::Rollout { step, context });
            }
            Err(e) => return Err(e),
        };
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::Rollout {
                step,
                context: format!("state entry {i} became non-finite"),
            });
        }
        states.push(next);
    }
    Ok(Trajectory { states, dt })
}

/// The implicit reference solver as a propagator.
pub struct ReferenceProp<'a> {
    pub stepper: &'a RefStepper,
}

impl Propagator for ReferenceProp<'_> {
    fn advance(&mut self, f: &[f64], _step: usize) -> Result<Vec<f64>> {
        self.stepper.step(f)
    }
}

/// The frozen learned operator as a propagator.
pub struct VanillaProp<'a> {
    pub model: &'a DeepONetModel,
    pub grid: &'a Grid,
}

impl Propagator for VanillaProp<'_> {
    fn advance(&mut self, f: &[f64], _step: usize) -> Result<Vec<f64>> {
        self.model.eval_grid(f, self.grid)
    }
}

/// The frozen composite phase-space operator as a propagator.
pub struct KineticProp<'a> {
    pub model: &'a RteOperatorModel,
    pub grid: &'a Grid,
}

impl Propagator for KineticProp<'_> {
    fn advance(&mut self, f: &[f64], _step: usize) -> Result<Vec<f64>> {
        self.model.eval_f_grid(f, self.grid)
    }
}

/// The learned operator with the per-step last-layer refit. Owns its
/// model copy so refits do not touch the caller's weights.
pub struct TlProp {
    pub model: DeepONetModel,
    pub eq: Equation,
    pub grid: Grid,
    pub dt: f64,
    pub scheme: Scheme,
    pub cfg: TlConfig,
    /// Refit cadence: the weights are re-solved before steps
    /// `tl_every, 2·tl_every, …` (1-based), so `tl_every = 1` refits
    /// every step and `tl_every > K` never does.
    pub tl_every: usize,
    /// Weights accepted by each performed refit, in order.
    pub weight_history: Vec<Vec<f64>>,
    /// `(step, reason)` for each refit that failed and fell back to
    /// the current weights.
    pub fallbacks: Vec<(usize, String)>,
}

impl TlProp {
    pub fn new(
        model: DeepONetModel,
        eq: Equation,
        grid: Grid,
        dt: f64,
        scheme: Scheme,
        cfg: TlConfig,
        tl_every: usize,
    ) -> TlProp {
        assert!(tl_every >= 1, "refit cadence must be at least 1");
        TlProp {
            model,
            eq,
            grid,
            dt,
            scheme,
            cfg,
            tl_every,
            weight_history: Vec::new(),
            fallbacks: Vec::new(),
        }
    }
}

impl Propagator for TlProp {
    fn advance(&mut self, f: &[f64], step: usize) -> Result<Vec<f64>> {
        if (step + 1) % self.tl_every == 0 {
            match tl_update(
                &self.model,
                &self.eq,
                &self.grid,
                self.dt,
                self.scheme,
                f,
                &self.cfg,
            ) {
                Ok(w) => {
                    self.model.w = w.clone();
                    self.weight_history.push(w);
                }
                Err(e) => self.fallbacks.push((step, e.to_string())),
            }
        }
        self.model.eval_grid(f, &self.grid)
    }
}

/// Roll the frozen learned operator for `k` steps.
pub fn rollout_vanilla(
    model: &DeepONetModel,
    grid: &Grid,
    f0: &[f64],
    k: usize,
    dt: f64,
) -> Result<Trajectory> {
    rollout(&mut VanillaProp { model, grid }, f0, k, dt)
}

/// Roll the reference solver for `k` steps.
pub fn rollout_reference(stepper: &RefStepper, f0: &[f64], k: usize, dt: f64) -> Result<Trajectory> {
    rollout(&mut ReferenceProp { stepper }, f0, k, dt)
}

/// Roll the learned operator with per-step refits. Returns the
/// trajectory together with the exhausted engine, which carries the
/// weight history and any fallback events.
#[allow(clippy::too_many_arguments)]
pub fn rollout_tl(
    model: &DeepONetModel,
    eq: &Equation,
    grid: &Grid,
    f0: &[f64],
    k: usize,
    dt: f64,
    scheme: Scheme,
    cfg: &TlConfig,
    tl_every: usize,
) -> Result<(Trajectory, TlProp)> {
    let mut prop = TlProp::new(
        model.clone(),
        eq.clone(),
        grid.clone(),
        dt,
        scheme,
        *cfg,
        tl_every,
    );
    let traj = rollout(&mut prop, f0, k, dt)?;
    Ok((traj, prop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deeponet::BoundaryMode;
    use crate::mlp::Activation;
    use crate::tensor::Tensor;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn single_step_equals_one_evaluation() {
        let grid = Grid::dirichlet(12);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model = DeepONetModel::init(
            12,
            4,
            3,
            6,
            3,
            Activation::Tanh,
            BoundaryMode::DirichletMask,
            &mut rng,
        )
        .unwrap();
        let f0: Vec<f64> = grid.xs.iter().map(|&x| x * (1.0 - x)).collect();
        let traj = rollout_vanilla(&model, &grid, &f0, 1, 0.05).unwrap();
        assert_eq!(traj.states.len(), 2);
        assert_eq!(traj.states[1], model.eval_grid(&f0, &grid).unwrap());
        assert_eq!(traj.n_steps(), 1);
        assert_eq!(traj.time(1), 0.05);
    }

    #[test]
    fn zero_weights_give_zero_trajectory_after_first_step() {
        let grid = Grid::dirichlet(10);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let model = DeepONetModel::init(
            10,
            4,
            3,
            6,
            3,
            Activation::Tanh,
            BoundaryMode::DirichletMask,
            &mut rng,
        )
        .unwrap()
        .with_weights(vec![0.0; 3])
        .unwrap();
        let f0 = vec![0.5; 10];
        let traj = rollout_vanilla(&model, &grid, &f0, 4, 0.05).unwrap();
        for n in 1..=4 {
            assert!(traj.states[n].iter().all(|&v| v == 0.0), "step {n}");
        }
    }

    #[test]
    fn reference_propagator_reproduces_the_solver_run() {
        let eq = Equation::rd(0.05, 0.3);
        let grid = Grid::dirichlet(20);
        let stepper = RefStepper::new(eq, grid.clone(), 0.05, Scheme::BackwardEuler).unwrap();
        let f0: Vec<f64> = grid.xs.iter().map(|&x| 0.8 * x * (1.0 - x)).collect();
        let traj = rollout_reference(&stepper, &f0, 12, 0.05).unwrap();
        let oracle = stepper.run(&f0, 12).unwrap();
        assert_eq!(traj.states.len(), oracle.len());
        for (a, b) in traj.states.iter().zip(&oracle) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    /// Constant-branch model whose basis spans the full grid space:
    /// plant `h = I` (p = q = N_x), then orthonormalize the realized
    /// basis through the branch bias so the refit system is square and
    /// well conditioned.
    fn spanning_model(grid: &Grid, seed: u64) -> DeepONetModel {
        let n = grid.n_x();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // The trunk width bounds the basis rank, so keep it above the
        // grid size for a genuinely spanning basis.
        let mut model = DeepONetModel::init(
            n,
            n,
            n,
            2 * n,
            2,
            Activation::Sine,
            BoundaryMode::PeriodicLift,
            &mut rng,
        )
        .unwrap();
        // Default initialization keeps the sine features in their
        // near-linear regime, which is numerically rank-deficient on a
        // 2-coordinate lift. Rescaled weights and random phases give
        // oscillatory, independent features (random Fourier features).
        {
            let first = &mut model.trunk.layers[0];
            for v in first.w.data.iter_mut() {
                *v *= 20.0;
            }
            for v in first.b.data.iter_mut() {
                *v = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            }
        }
        let plant = |model: &mut DeepONetModel, h0: &Tensor| {
            let last = model.branch.layers.last_mut().unwrap();
            let (rows, cols) = (last.w.rows, last.w.cols);
            last.w = Tensor::zeros(rows, cols);
            last.b = Tensor::from_vec(rows, 1, h0.data.clone());
        };
        let mut eye = Tensor::zeros(n, n);
        for j in 0..n {
            *eye.at_mut(j, j) = 1.0;
        }
        plant(&mut model, &eye);
        let b = model.basis_grid(&vec![0.0; n], grid).unwrap();
        let qr = DMatrix::from_row_slice(n, n, &b.data).qr();
        let rinv = qr
            .r()
            .solve_upper_triangular(&DMatrix::<f64>::identity(n, n))
            .expect("grid basis must be independent");
        let mut h0 = Tensor::zeros(n, n);
        for k in 0..n {
            for j in 0..n {
                *h0.at_mut(k, j) = rinv[(k, j)];
            }
        }
        plant(&mut model, &h0);
        // The realized basis must be near-orthonormal, or the span
        // construction silently lost rank.
        let q = model.basis_grid(&vec![0.0; n], grid).unwrap();
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| q.at(i, a) * q.at(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() < 1e-8,
                    "basis not orthonormal: ⟨{a},{b}⟩ = {dot}"
                );
            }
        }
        model
    }

    #[test]
    fn spanning_basis_refit_tracks_the_reference_for_a_hundred_steps() {
        // Periodic heat: with the basis spanning the whole grid space,
        // each refit solves the implicit step exactly, so the refit
        // rollout IS the reference solver up to roundoff.
        let eq = Equation::ac(0.05, 0.0);
        let grid = Grid::periodic(16);
        let dt = 0.1;
        let k = 100;
        let model = spanning_model(&grid, 21);
        let f0: Vec<f64> = grid
            .xs
            .iter()
            .map(|&x| (2.0 * std::f64::consts::PI * x).sin() + 0.3)
            .collect();
        let cfg = TlConfig {
            n_c: 16,
            ..TlConfig::default()
        };
        let (traj, prop) = rollout_tl(
            &model,
            &eq,
            &grid,
            &f0,
            k,
            dt,
            Scheme::BackwardEuler,
            &cfg,
            1,
        )
        .unwrap();
        let stepper = RefStepper::new(eq, grid.clone(), dt, Scheme::BackwardEuler).unwrap();
        let oracle = stepper.run(&f0, k).unwrap();
        let mut worst: f64 = 0.0;
        for (a, b) in traj.states.iter().zip(&oracle) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst <= 1e-6, "largest deviation {worst}");
        assert_eq!(prop.weight_history.len(), k);
        assert!(prop.fallbacks.is_empty());
    }

    #[test]
    fn refit_cadence_beyond_horizon_matches_vanilla() {
        let eq = Equation::ac(0.05, 0.0);
        let grid = Grid::periodic(12);
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let model = DeepONetModel::init(
            12,
            5,
            4,
            8,
            3,
            Activation::Tanh,
            BoundaryMode::PeriodicLift,
            &mut rng,
        )
        .unwrap();
        let f0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).sin()).collect();
        let k = 6;
        let cfg = TlConfig {
            n_c: 12,
            ..TlConfig::default()
        };
        let (tl_traj, prop) = rollout_tl(
            &model,
            &eq,
            &grid,
            &f0,
            k,
            0.05,
            Scheme::BackwardEuler,
            &cfg,
            k + 1,
        )
        .unwrap();
        let vanilla = rollout_vanilla(&model, &grid, &f0, k, 0.05).unwrap();
        assert_eq!(tl_traj, vanilla);
        assert!(prop.weight_history.is_empty());
        assert!(prop.fallbacks.is_empty());
    }

    #[test]
    fn weight_history_counts_the_performed_refits() {
        let eq = Equation::ac(0.05, 0.0);
        let grid = Grid::periodic(12);
        let model = spanning_model(&grid, 5);
        let f0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.5).cos() + 0.1).collect();
        let cfg = TlConfig {
            n_c: 12,
            ..TlConfig::default()
        };
        // Refits before steps 3, 6, 9 of a 10-step rollout.
        let (_, prop) = rollout_tl(
            &model,
            &eq,
            &grid,
            &f0,
            10,
            0.05,
            Scheme::BackwardEuler,
            &cfg,
            3,
        )
        .unwrap();
        assert_eq!(prop.weight_history.len(), 3);
    }

    #[test]
    fn non_finite_states_abort_with_the_step_index() {
        struct Doubler;
        impl Propagator for Doubler {
            fn advance(&mut self, f: &[f64], step: usize) -> Result<Vec<f64>> {
                if step == 3 {
                    return Ok(vec![f64::INFINITY; f.len()]);
                }
                Ok(f.iter().map(|v| v * 2.0).collect())
            }
        }
        let err = rollout(&mut Doubler, &[1.0, 2.0], 10, 0.1).unwrap_err();
        match err {
            Error::Rollout { step, .. } => assert_eq!(step, 3),
            other => panic!("expected a blowup error, got {other:?}"),
        }
    }

    #[test]
    fn failed_refits_fall_back_and_are_recorded() {
        // A zero basis makes every refit degenerate, but evaluation
        // still works: the rollout survives and flags each step.
        let eq = Equation::ac(0.05, 0.0);
        let grid = Grid::periodic(10);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut model = DeepONetModel::init(
            10,
            3,
            3,
            6,
            2,
            Activation::Tanh,
            BoundaryMode::PeriodicLift,
            &mut rng,
        )
        .unwrap();
        let last = model.branch.layers.last_mut().unwrap();
        let (rows, cols) = (last.w.rows, last.w.cols);
        last.w = Tensor::zeros(rows, cols);
        last.b = Tensor::zeros(rows, 1);
        let f0 = vec![0.4; 10];
        let cfg = TlConfig {
            n_c: 10,
            method: crate::transfer::TlMethod::LinearLstsq,
            ..TlConfig::default()
        };
        let (traj, prop) = rollout_tl(
            &model,
            &eq,
            &grid,
            &f0,
            5,
            0.05,
            Scheme::BackwardEuler,
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(traj.n_steps(), 5);
        assert_eq!(prop.fallbacks.len(), 5);
        assert!(prop.weight_history.is_empty());
    }
}
