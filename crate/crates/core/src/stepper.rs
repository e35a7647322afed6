//! Reference one-step propagators: backward Euler and Crank–Nicolson.
//!
//! Each step solves the implicit system
//!
//! ```text
//! backward Euler:  g − Δt·L(g)        = fₙ
//! Crank–Nicolson:  g − (Δt/2)·L(g)    = fₙ + (Δt/2)·L(fₙ)
//! ```
//!
//! Linear right sides get one dense LU factorization at construction,
//! reused for every step. Nonlinear right sides use Newton's method
//! with the exact Jacobian, starting from `fₙ`, to an ∞-norm residual
//! of 1e-12. The kinetic kind steps the full phase-space vector with
//! backward Euler and inflow rows pinned to the boundary data; its
//! system matrix is also factored once. Stepping the micro–macro pair
//! is algebraically the same system, so [`RefStepper::step_micro_macro`]
//! converts, steps, and splits again.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equation::{apply_spatial, laplacian, Equation, Grid, RteOps};
use crate::error::{Error, Result};
use crate::sparse::Csr;

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    BackwardEuler,
    CrankNicolson,
}

impl Scheme {
    /// Implicit weight γ: the coefficient of `L(g)` on the unknown side.
    pub fn gamma(self, dt: f64) -> f64 {
        match self {
            Scheme::BackwardEuler => dt,
            Scheme::CrankNicolson => 0.5 * dt,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::BackwardEuler => "backward_euler",
            Scheme::CrankNicolson => "crank_nicolson",
        }
    }
}

enum Solver {
    /// Cached factorization of `I − γ·A` for linear right sides.
    Linear {
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        a: Csr,
    },
    /// Newton with exact Jacobian for nonlinear right sides.
    Newton { lap: Csr },
    /// Factored phase-space transport system with pinned inflow rows.
    Kinetic {
        ops: RteOps,
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        eps: f64,
    },
}

pub struct RefStepper {
    pub eq: Equation,
    pub grid: Grid,
    pub dt: f64,
    pub scheme: Scheme,
    solver: Solver,
    last_iters: Cell<usize>,
}

impl RefStepper {
    pub fn new(eq: Equation, grid: Grid, dt: f64, scheme: Scheme) -> Result<RefStepper> {
        eq.validate(&grid)?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let solver = match eq {
            Equation::Rte1d { eps, .. } => {
                if scheme != Scheme::BackwardEuler {
                    return Err(Error::Config(
                        "the kinetic kind only supports the backward Euler scheme".into(),
                    ));
                }
                let ops = RteOps::new(&eq, &grid)?;
                let lu = build_kinetic_matrix(&ops, &grid, eps, dt).lu();
                Solver::Kinetic { ops, lu, eps }
            }
            _ if eq.is_linear() => {
                let a = linear_operator(&eq, &grid);
                let n = grid.n_points();
                let gamma = scheme.gamma(dt);
                let mut m = DMatrix::<f64>::identity(n, n);
                for r in 0..n {
                    for (c, v) in a.row(r) {
                        m[(r, c)] -= gamma * v;
                    }
                }
                Solver::Linear { lu: m.lu(), a }
            }
            _ => Solver::Newton {
                lap: laplacian(&eq, &grid),
            },
        };
        Ok(RefStepper {
            eq,
            grid,
            dt,
            scheme,
            solver,
            last_iters: Cell::new(0),
        })
    }

    /// Newton iterations used by the most recent [`step`](Self::step)
    /// (zero for the factored linear paths).
    pub fn last_newton_iters(&self) -> usize {
        self.last_iters.get()
    }

    /// Advance one state vector by Δt. For the kinetic kind the state
    /// is the flattened phase-space vector `f`.
    pub fn step(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.step_inner(f)?;
        // The pinned Dirichlet values are exact by construction; scrub
        // the elimination roundoff the dense LU may have left there.
        if self.grid.boundary == crate::equation::Boundary::Dirichlet0 {
            out[0] = f[0];
            let last = out.len() - 1;
            out[last] = f[last];
        }
        Ok(out)
    }

    fn step_inner(&self, f: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n_points();
        assert_eq!(f.len(), n, "state length {} != grid size {}", f.len(), n);
        match &self.solver {
            Solver::Linear { lu, a } => {
                self.last_iters.set(0);
                let mut rhs = f.to_vec();
                if self.scheme == Scheme::CrankNicolson {
                    let af = a.matvec(f);
                    for (r, &v) in rhs.iter_mut().zip(&af) {
                        *r += 0.5 * self.dt * v;
                    }
                }
                let sol = lu
                    .solve(&DVector::from_vec(rhs))
                    .ok_or_else(|| Error::Solver {
                        context: "factored implicit step".into(),
                        iterations: 0,
                        residual: f64::NAN,
                    })?;
                Ok(sol.data.into())
            }
            Solver::Newton { lap } => self.newton_step(f, lap),
            Solver::Kinetic { ops, lu, eps } => {
                self.last_iters.set(0);
                let mut rhs: Vec<f64> = f.iter().map(|v| v * eps * eps / self.dt).collect();
                for (&row, &val) in ops.inflow.iter().zip(&ops.inflow_values) {
                    rhs[row] = val;
                }
                let sol = lu
                    .solve(&DVector::from_vec(rhs))
                    .ok_or_else(|| Error::Solver {
                        context: "factored transport step".into(),
                        iterations: 0,
                        residual: f64::NAN,
                    })?;
                Ok(sol.data.into())
            }
        }
    }

    /// Advance the micro–macro pair `(ρ, g)` one backward Euler step
    /// (kinetic kind only). The updated `g` is re-projected so its
    /// velocity average is exactly zero.
    pub fn step_micro_macro(&self, rho: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let Solver::Kinetic { ops, eps, .. } = &self.solver else {
            return Err(Error::Config(
                "micro–macro stepping requires the kinetic kind".into(),
            ));
        };
        let f = ops.recompose(rho, g, *eps);
        let f_next = self.step(&f)?;
        let (rho_next, mut g_next) = ops.decompose(&f_next, *eps);
        // Remove the O(u_round) residue of the velocity average.
        let avg_g = ops.avg.matvec(&g_next);
        let lifted = ops.lift.matvec(&avg_g);
        for (gv, lv) in g_next.iter_mut().zip(&lifted) {
            *gv -= lv;
        }
        Ok((rho_next, g_next))
    }

    /// Trajectory `[f⁰, f¹, …, f^K]` from the initial state.
    pub fn run(&self, f0: &[f64], n_steps: usize) -> Result<Vec<Vec<f64>>> {
        let mut traj = Vec::with_capacity(n_steps + 1);
        traj.push(f0.to_vec());
        for step in 0..n_steps {
            let next = self.step(traj.last().unwrap()).map_err(|e| Error::Rollout {
                step,
                context: e.to_string(),
            })?;
            traj.push(next);
        }
        Ok(traj)
    }

    /// Scheme-aware defect of a candidate `g` for one step from `f`:
    /// `g − γ·L(g) − f − γ'·L(f)` with `(γ, γ') = (Δt, 0)` for backward
    /// Euler and `(Δt/2, Δt/2)` for Crank–Nicolson. The kinetic kind
    /// reports the assembled-system defect with inflow rows pinned.
    pub fn residual(&self, g: &[f64], f: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), f.len(), "candidate/state length mismatch");
        if let Solver::Kinetic { ops, eps, .. } = &self.solver {
            let m = build_kinetic_matrix(ops, &self.grid, *eps, self.dt);
            let mg = &m * DVector::from_vec(g.to_vec());
            let mut res: Vec<f64> = mg
                .iter()
                .zip(f)
                .map(|(mv, fv)| mv - fv * eps * eps / self.dt)
                .collect();
            for (&row, &val) in ops.inflow.iter().zip(&ops.inflow_values) {
                res[row] = g[row] - val;
            }
            return res;
        }
        let gamma = self.scheme.gamma(self.dt);
        let lg = apply_spatial(&self.eq, &self.grid, g);
        let mut res: Vec<f64> = g
            .iter()
            .zip(f)
            .zip(&lg)
            .map(|((&gv, &fv), &lgv)| gv - gamma * lgv - fv)
            .collect();
        if self.scheme == Scheme::CrankNicolson {
            let lf = apply_spatial(&self.eq, &self.grid, f);
            for (r, &v) in res.iter_mut().zip(&lf) {
                *r -= 0.5 * self.dt * v;
            }
        }
        res
    }

    fn newton_step(&self, f: &[f64], lap: &Csr) -> Result<Vec<f64>> {
        let n = f.len();
        let gamma = self.scheme.gamma(self.dt);
        let mut g = f.to_vec();
        for iter in 0..NEWTON_MAX_ITERS {
            let res = self.residual(&g, f);
            let norm = res.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if !norm.is_finite() {
                return Err(Error::Solver {
                    context: "Newton residual became non-finite".into(),
                    iterations: iter,
                    residual: norm,
                });
            }
            if norm <= NEWTON_TOL {
                self.last_iters.set(iter);
                return Ok(g);
            }
            let jac = self.implicit_jacobian(&g, lap, gamma);
            let delta = jac
                .lu()
                .solve(&DVector::from_vec(res))
                .ok_or_else(|| Error::Solver {
                    context: "singular Newton Jacobian".into(),
                    iterations: iter,
                    residual: norm,
                })?;
            for i in 0..n {
                g[i] -= delta[i];
            }
        }
        let norm = self
            .residual(&g, f)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        Err(Error::Solver {
            context: "Newton failed to converge".into(),
            iterations: NEWTON_MAX_ITERS,
            residual: norm,
        })
    }

    /// Jacobian of the implicit defect: `I − γ·L′(g)`.
    fn implicit_jacobian(&self, g: &[f64], lap: &Csr, gamma: f64) -> DMatrix<f64> {
        let n = g.len();
        let mut jac = DMatrix::<f64>::identity(n, n);
        match self.eq {
            Equation::ReactionDiffusion1d { d, k } => {
                for r in 0..n {
                    for (c, v) in lap.row(r) {
                        jac[(r, c)] -= gamma * d * v;
                    }
                }
                for i in 1..n - 1 {
                    jac[(i, i)] -= gamma * 2.0 * k * g[i];
                }
            }
            Equation::AllenCahn1d { d1, d2 } => {
                for r in 0..n {
                    for (c, v) in lap.row(r) {
                        jac[(r, c)] -= gamma * d1 * v;
                    }
                    jac[(r, r)] -= gamma * d2 * (1.0 - 3.0 * g[r] * g[r]);
                }
            }
            Equation::CahnHilliard1d { d1, d2 } => {
                // d/dg [Δ(−d1·Δg + d2·(g³−g))] = Δ·(−d1·Δ + d2·diag(3g²−1))
                let mut mu_jac = DMatrix::<f64>::zeros(n, n);
                for r in 0..n {
                    for (c, v) in lap.row(r) {
                        mu_jac[(r, c)] -= d1 * v;
                    }
                    mu_jac[(r, r)] += d2 * (3.0 * g[r] * g[r] - 1.0);
                }
                for r in 0..n {
                    for (c, v) in lap.row(r) {
                        for j in 0..n {
                            jac[(r, j)] -= gamma * v * mu_jac[(c, j)];
                        }
                    }
                }
            }
            Equation::Rte1d { .. } => unreachable!("kinetic kind does not use Newton"),
        }
        jac
    }
}

/// Dense matrix of the linear spatial operator (linear kinds only).
fn linear_operator(eq: &Equation, grid: &Grid) -> Csr {
    match *eq {
        Equation::ReactionDiffusion1d { d, k } => {
            assert_eq!(k, 0.0);
            scale_csr(&laplacian(eq, grid), d)
        }
        Equation::AllenCahn1d { d1, d2 } => {
            assert_eq!(d2, 0.0);
            scale_csr(&laplacian(eq, grid), d1)
        }
        Equation::CahnHilliard1d { d1, d2 } => {
            assert_eq!(d2, 0.0);
            // −d1·Δ² assembled as a sparse product of the two stencils.
            let lap = laplacian(eq, grid);
            let n = grid.n_points();
            let mut tri = Vec::new();
            for r in 0..n {
                for (m, vm) in lap.row(r) {
                    for (c, vc) in lap.row(m) {
                        tri.push((r, c, -d1 * vm * vc));
                    }
                }
            }
            Csr::from_triplets(n, n, &tri)
        }
        Equation::Rte1d { .. } => unreachable!("kinetic kind has a dedicated solver"),
    }
}

fn scale_csr(a: &Csr, s: f64) -> Csr {
    let mut out = a.clone();
    for v in &mut out.values {
        *v *= s;
    }
    out
}

/// System matrix of one backward Euler transport step in the
/// phase-space variables, scaled by ε²/Δt:
/// `(ε²/Δt + 1)·I + ε·v∂ₓ − lift·⟨·⟩`, inflow rows replaced by identity.
fn build_kinetic_matrix(ops: &RteOps, grid: &Grid, eps: f64, dt: f64) -> DMatrix<f64> {
    let n = grid.n_points();
    let nv = grid.n_v();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = eps * eps / dt + 1.0;
    }
    for r in 0..n {
        for (c, v) in ops.vdx.row(r) {
            m[(r, c)] += eps * v;
        }
        let ix = r / nv;
        for (c, v) in ops.avg.row(ix) {
            m[(r, c)] -= v;
        }
    }
    for &row in &ops.inflow {
        for c in 0..n {
            m[(row, c)] = 0.0;
        }
        m[(row, row)] = 1.0;
    }
    m
}

/// Steady transport state: the fixed point of the backward Euler step,
/// solved directly from `ε·v∂ₓf = ⟨f⟩ − f` with inflow rows pinned.
pub fn rte_steady_state(eq: &Equation, grid: &Grid) -> Result<Vec<f64>> {
    let Equation::Rte1d { eps, .. } = *eq else {
        return Err(Error::Config("steady transport needs the kinetic kind".into()));
    };
    let ops = RteOps::new(eq, grid)?;
    let n = grid.n_points();
    let nv = grid.n_v();
    let mut m = DMatrix::<f64>::identity(n, n);
    for r in 0..n {
        for (c, v) in ops.vdx.row(r) {
            m[(r, c)] += eps * v;
        }
        let ix = r / nv;
        for (c, v) in ops.avg.row(ix) {
            m[(r, c)] -= v;
        }
    }
    let mut rhs = vec![0.0; n];
    for &row in &ops.inflow {
        for c in 0..n {
            m[(row, c)] = 0.0;
        }
        m[(row, row)] = 1.0;
    }
    for (&row, &val) in ops.inflow.iter().zip(&ops.inflow_values) {
        rhs[row] = val;
    }
    let sol = m
        .lu()
        .solve(&DVector::from_vec(rhs))
        .ok_or_else(|| Error::Solver {
            context: "singular steady transport system".into(),
            iterations: 0,
            residual: f64::NAN,
        })?;
    Ok(sol.data.into())
}

/// Run `n_steps` implicit steps and report the Euclidean norm after
/// each one (index 0 is the initial state). Only meaningful — and only
/// allowed — for kinds whose implicit steps are provably
/// norm-nonincreasing; other kinds get a configuration error.
pub fn dissipativity_check(
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    scheme: Scheme,
    f0: &[f64],
    n_steps: usize,
) -> Result<Vec<f64>> {
    if !eq.is_norm_dissipative() {
        return Err(Error::Config(format!(
            "norm monotonicity is only guaranteed for the diffusion-only kinds; {} with these coefficients is not covered",
            eq.kind_name()
        )));
    }
    let stepper = RefStepper::new(*eq, grid.clone(), dt, scheme)?;
    let traj = stepper.run(f0, n_steps)?;
    Ok(traj
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine_mode(grid: &Grid) -> Vec<f64> {
        grid.xs.iter().map(|&x| (2.0 * PI * x).sin()).collect()
    }

    fn discrete_lambda(grid: &Grid, d: f64) -> f64 {
        let h = grid.h;
        d * 2.0 / (h * h) * ((2.0 * PI * h).cos() - 1.0)
    }

    #[test]
    fn backward_euler_amplifies_eigenmode_exactly() {
        // One step on the sine eigenmode has amplification
        // 1/(1 − Δt·λ_h) to roundoff.
        let grid = Grid::periodic(64);
        let eq = Equation::ac(0.1, 0.0);
        let dt = 0.02;
        let stepper = RefStepper::new(eq, grid.clone(), dt, Scheme::BackwardEuler).unwrap();
        let u = sine_mode(&grid);
        let lam = discrete_lambda(&grid, 0.1);
        let amp = 1.0 / (1.0 - dt * lam);
        let next = stepper.step(&u).unwrap();
        for (n, u0) in next.iter().zip(&u) {
            assert!((n - amp * u0).abs() < 1e-12, "{n} vs {}", amp * u0);
        }
    }

    #[test]
    fn crank_nicolson_amplifies_eigenmode_exactly() {
        let grid = Grid::periodic(64);
        let eq = Equation::ac(0.1, 0.0);
        let dt = 0.02;
        let stepper = RefStepper::new(eq, grid.clone(), dt, Scheme::CrankNicolson).unwrap();
        let u = sine_mode(&grid);
        let lam = discrete_lambda(&grid, 0.1);
        let amp = (1.0 + 0.5 * dt * lam) / (1.0 - 0.5 * dt * lam);
        let next = stepper.step(&u).unwrap();
        for (n, u0) in next.iter().zip(&u) {
            assert!((n - amp * u0).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_converges_fast_on_quadratic_reaction() {
        let grid = Grid::dirichlet(65);
        let eq = Equation::rd(0.01, 0.5);
        let stepper = RefStepper::new(eq, grid.clone(), 0.05, Scheme::BackwardEuler).unwrap();
        let f: Vec<f64> = grid.xs.iter().map(|&x| x * (1.0 - x)).collect();
        let g = stepper.step(&f).unwrap();
        assert!(stepper.last_newton_iters() <= 5, "{} iterations", stepper.last_newton_iters());
        let res = stepper.residual(&g, &f);
        let norm = res.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(norm <= 1e-12, "residual {norm}");
        // Dirichlet values stay pinned.
        assert_eq!(g[0], 0.0);
        assert_eq!(g[64], 0.0);
    }

    #[test]
    fn newton_handles_fourth_order_kind() {
        let grid = Grid::periodic(32);
        let eq = Equation::ch(1e-4, 0.5);
        let stepper = RefStepper::new(eq, grid.clone(), 0.01, Scheme::CrankNicolson).unwrap();
        let f: Vec<f64> = grid.xs.iter().map(|&x| 0.3 * (2.0 * PI * x).cos()).collect();
        let g = stepper.step(&f).unwrap();
        let norm = stepper
            .residual(&g, &f)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(norm <= 1e-12, "residual {norm}");
    }

    #[test]
    fn linear_and_newton_paths_agree_when_reaction_vanishes() {
        // k = 0 dispatches to the cached factorization; forcing the same
        // equation through Newton by a tiny k must approach it.
        let grid = Grid::dirichlet(33);
        let dt = 0.1;
        let f: Vec<f64> = grid.xs.iter().map(|&x| (PI * x).sin()).collect();
        let lin = RefStepper::new(Equation::rd(0.2, 0.0), grid.clone(), dt, Scheme::BackwardEuler)
            .unwrap()
            .step(&f)
            .unwrap();
        let newt = RefStepper::new(Equation::rd(0.2, 1e-300), grid.clone(), dt, Scheme::BackwardEuler)
            .unwrap()
            .step(&f)
            .unwrap();
        for (a, b) in lin.iter().zip(&newt) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn transport_step_reaches_steady_state_and_stays() {
        let eq = Equation::rte(0.1);
        let grid = Grid::phase(32, 8);
        let steady = rte_steady_state(&eq, &grid).unwrap();
        let stepper = RefStepper::new(eq, grid.clone(), 0.05, Scheme::BackwardEuler).unwrap();
        let next = stepper.step(&steady).unwrap();
        for (a, b) in next.iter().zip(&steady) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // Inflow data is imposed exactly.
        let ops = RteOps::new(&eq, &grid).unwrap();
        for (&row, &val) in ops.inflow.iter().zip(&ops.inflow_values) {
            assert!((next[row] - val).abs() < 1e-12);
        }
    }

    #[test]
    fn transport_relaxes_toward_isotropy_in_the_diffusive_regime() {
        // For small ε the collision term drives f toward its velocity
        // average: the anisotropy after a few steps shrinks with ε.
        let grid = Grid::phase(24, 8);
        let mut anis = Vec::new();
        for eps in [1.0, 1e-2] {
            let eq = Equation::rte(eps);
            let ops = RteOps::new(&eq, &grid).unwrap();
            let stepper = RefStepper::new(eq, grid.clone(), 0.02, Scheme::BackwardEuler).unwrap();
            // Anisotropic start: f = 1 + 0.5·v·x(1−x).
            let mut f: Vec<f64> = grid
                .points()
                .iter()
                .map(|p| 1.0 + 0.5 * p[1] * p[0] * (1.0 - p[0]))
                .collect();
            for _ in 0..10 {
                f = stepper.step(&f).unwrap();
            }
            let rho = ops.avg.matvec(&f);
            let lifted = ops.lift.matvec(&rho);
            let num: f64 = f
                .iter()
                .zip(&lifted)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = lifted.iter().map(|v| v * v).sum::<f64>().sqrt();
            anis.push(num / den);
        }
        assert!(anis[1] < anis[0], "anisotropy {anis:?} should fall with eps");
    }

    #[test]
    fn micro_macro_step_matches_full_step_and_projects_g() {
        let eq = Equation::rte(0.5);
        let grid = Grid::phase(16, 6);
        let ops = RteOps::new(&eq, &grid).unwrap();
        let stepper = RefStepper::new(eq, grid.clone(), 0.1, Scheme::BackwardEuler).unwrap();
        let f: Vec<f64> = grid
            .points()
            .iter()
            .map(|p| 1.0 + 0.2 * (3.0 * p[0]).sin() + 0.1 * p[1])
            .collect();
        let (rho, g) = ops.decompose(&f, 0.5);
        let (rho2, g2) = stepper.step_micro_macro(&rho, &g).unwrap();
        let f2 = stepper.step(&f).unwrap();
        let back = ops.recompose(&rho2, &g2, 0.5);
        for (a, b) in back.iter().zip(&f2) {
            assert!((a - b).abs() < 1e-10);
        }
        for v in ops.avg.matvec(&g2) {
            assert!(v.abs() < 1e-13);
        }
    }

    #[test]
    fn diffusion_norms_never_increase() {
        let grid = Grid::periodic(48);
        let eq = Equation::ac(0.05, 0.0);
        let f0: Vec<f64> = grid
            .xs
            .iter()
            .map(|&x| (2.0 * PI * x).sin() + 0.3 * (6.0 * PI * x).cos())
            .collect();
        for scheme in [Scheme::BackwardEuler, Scheme::CrankNicolson] {
            let norms = dissipativity_check(&eq, &grid, 0.05, scheme, &f0, 50).unwrap();
            for w in norms.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn dissipativity_check_rejects_reactive_kinds() {
        let grid = Grid::dirichlet(17);
        let eq = Equation::rd(0.1, 1.0);
        let f0 = vec![0.0; 17];
        let err = dissipativity_check(&eq, &grid, 0.1, Scheme::BackwardEuler, &f0, 3);
        assert!(err.is_err());
    }

    #[test]
    fn crank_nicolson_is_second_order_on_the_heat_kind() {
        // Richardson check on the sine mode against the exact discrete
        // amplification e^{λ_h t}: halving Δt divides the error by ≈4.
        let grid = Grid::periodic(32);
        let eq = Equation::ac(0.05, 0.0);
        let lam = discrete_lambda(&grid, 0.05);
        let u = sine_mode(&grid);
        let t_end = 0.8;
        let exact_amp = (lam * t_end).exp();
        let mut errs = Vec::new();
        for &dt in &[0.1, 0.05] {
            let n = (t_end / dt).round() as usize;
            let stepper = RefStepper::new(eq, grid.clone(), dt, Scheme::CrankNicolson).unwrap();
            let traj = stepper.run(&u, n).unwrap();
            let last = traj.last().unwrap();
            let err: f64 = last
                .iter()
                .zip(&u)
                .map(|(a, u0)| (a - exact_amp * u0).powi(2))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }
}
