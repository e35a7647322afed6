//! Per-step transfer-learning refit of the last-layer weights.
//!
//! During rollout the branch and trunk stay frozen and only the final
//! linear combination `g = Σⱼ wⱼ φⱼ(·; fₙ)` is re-fit so that `g`
//! satisfies the implicit step departing from the current state `fₙ`:
//!
//! ```text
//! minimize over w:   Σᵢ [ (g − γ·L(g))(xᵢ) − bᵢ ]²
//! ```
//!
//! over a subsample of `N_c` sensors `xᵢ`, with `γ` the scheme's
//! implicit weight and `b` the state side (`fₙ`, plus the explicit
//! half-step under the trapezoidal scheme).
//!
//! For state-linear kinds the problem is a least-squares system
//! `A w ≈ b`, solved in closed form by a truncated-SVD minimum-norm
//! solve. Reaction terms make the residual polynomial in `w`, handled
//! by a damped Gauss–Newton (Levenberg–Marquardt) iteration.
//!
//! The expensive part — evaluating every basis function at the
//! subsampled sensors and their stencil neighbours — is done once per
//! refit in [`TlWorkspace`], so each solver iteration costs only the
//! small dense algebra in `w`. The assembly touches `O(N_c)` stencil
//! sites regardless of the full sensor count.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::deeponet::DeepONetModel;
use crate::equation::{apply_spatial, laplacian, Equation, Grid};
use crate::error::{Error, Result};
use crate::sparse::Csr;
use crate::stepper::Scheme;
use crate::tensor::Tensor;

/// Initial Levenberg–Marquardt damping.
const LAMBDA_INIT: f64 = 1e-3;
/// Damping beyond this aborts the iteration as stagnated.
const LAMBDA_MAX: f64 = 1e12;

/// How the per-step refit solves for the last-layer weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TlMethod {
    /// Closed-form truncated-SVD least squares (state-linear kinds).
    LinearLstsq,
    /// Damped Gauss–Newton iteration (reaction terms present).
    NonlinearLm,
}

/// Refit configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TlConfig {
    /// Sensors kept for the refit (uniform stride unless seeded).
    #[serde(rename = "N_c")]
    pub n_c: usize,
    pub method: TlMethod,
    /// Relative singular-value cutoff for the closed-form solve.
    pub rcond: f64,
    /// Stop when the relative cost decrease falls below this.
    pub ftol: f64,
    /// Stop when the step norm falls below `xtol·‖w‖`.
    pub xtol: f64,
    pub lm_max_iters: usize,
    /// Seeded-random sensor subsampling instead of the uniform stride.
    pub subsample_seed: Option<u64>,
}

impl Default for TlConfig {
    fn default() -> Self {
        // The damped Gauss–Newton refit handles every equation kind
        // (for state-linear ones it converges in a single step), so it
        // is the safe default; the closed-form solve is an opt-in for
        // kinds it supports.
        TlConfig {
            n_c: 64,
            method: TlMethod::NonlinearLm,
            rcond: 1e-6,
            ftol: 1e-5,
            xtol: 1e-5,
            lm_max_iters: 200,
            subsample_seed: None,
        }
    }
}

impl TlConfig {
    /// Default configuration with the method matched to the kind.
    pub fn for_equation(eq: &Equation, n_c: usize) -> TlConfig {
        TlConfig {
            n_c,
            method: if eq.is_linear() {
                TlMethod::LinearLstsq
            } else {
                TlMethod::NonlinearLm
            },
            ..TlConfig::default()
        }
    }
}

/// Pick `n_c` of `n_p` sensor indices: uniform stride `⌊i·N_p/N_c⌋`
/// by default, or a seeded random draw without replacement (sorted).
pub fn subsample_sensors(n_p: usize, n_c: usize, seed: Option<u64>) -> Result<Vec<usize>> {
    if n_c == 0 || n_c > n_p {
        return Err(Error::Config(format!(
            "need 1 ≤ N_c ≤ N_p, got N_c = {n_c} with N_p = {n_p}"
        )));
    }
    match seed {
        None => Ok((0..n_c).map(|i| i * n_p / n_c).collect()),
        Some(s) => {
            let mut rng = ChaCha20Rng::seed_from_u64(s);
            let mut idx: Vec<usize> = (0..n_p).collect();
            for i in 0..n_c {
                let j = rng.gen_range(i..n_p);
                idx.swap(i, j);
            }
            let mut out = idx[..n_c].to_vec();
            out.sort_unstable();
            Ok(out)
        }
    }
}

/// Result of the iterative refit.
#[derive(Clone, Debug)]
pub struct NonlinearFit {
    pub w: Vec<f64>,
    /// Sum-of-squares cost after each accepted step, starting with the
    /// incoming cost; non-increasing by construction.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
}

/// Basis data at the subsampled sensors and their stencil neighbours,
/// built once per refit: the basis is frozen, only `w` moves.
#[derive(Debug)]
pub struct TlWorkspace {
    eq: Equation,
    gamma: f64,
    /// Subsampled sensor indices (rows of the fit).
    pub selected: Vec<usize>,
    /// State side `b` at the selected sensors.
    b: Vec<f64>,
    lap: Csr,
    /// Evaluated grid indices (selected ∪ stencil neighbours).
    halo: Vec<usize>,
    /// Grid index → slot in `halo` (`usize::MAX` when absent).
    pos: Vec<usize>,
    /// Inner-Laplacian targets for the fourth-order kind; empty otherwise.
    mid: Vec<usize>,
    /// Basis at the halo points, `[n_halo × q]`.
    phi: Tensor,
    /// Basis at the selected sensors, `[N_c × q]`.
    phi_sel: Tensor,
    /// `Δφⱼ` at the selected sensors (second-order kinds), `[N_c × q]`.
    lap_phi_sel: Tensor,
    /// `Δ²φⱼ` at the selected sensors (fourth-order kind), `[N_c × q]`.
    bih_phi_sel: Tensor,
}

impl TlWorkspace {
    pub fn new(
        model: &DeepONetModel,
        eq: &Equation,
        grid: &Grid,
        dt: f64,
        scheme: Scheme,
        f_n: &[f64],
        selected: &[usize],
    ) -> Result<TlWorkspace> {
        if matches!(eq, Equation::Rte1d { .. }) {
            return Err(Error::Config(
                "the last-layer refit is not defined for the kinetic kind; \
                 roll the composite model forward without refitting"
                    .into(),
            ));
        }
        eq.validate(grid)?;
        let n = grid.n_x();
        if model.n_sensors != n {
            return Err(Error::Config(format!(
                "model expects {} sensors, grid has {n}",
                model.n_sensors
            )));
        }
        if f_n.len() != n {
            return Err(Error::Config(format!(
                "state has {} entries, grid has {n}",
                f_n.len()
            )));
        }
        if selected.is_empty() {
            return Err(Error::Config("need at least one refit sensor".into()));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("sensor index {bad} out of range")));
        }
        let fourth_order = matches!(eq, Equation::CahnHilliard1d { .. });
        let lap = laplacian(eq, grid);

        // Stencil closure: selected → neighbours (→ neighbours again
        // for the fourth-order kind). `included` doubles as dedup.
        let mut included = vec![false; n];
        let mut level0: Vec<usize> = Vec::with_capacity(selected.len());
        for &i in selected {
            if !included[i] {
                included[i] = true;
                level0.push(i);
            }
        }
        let expand = |included: &mut Vec<bool>, from: &[usize]| -> Vec<usize> {
            let mut next = Vec::new();
            for &i in from {
                for (c, _) in lap.row(i) {
                    if !included[c] {
                        included[c] = true;
                        next.push(c);
                    }
                }
            }
            next
        };
        let ring1 = expand(&mut included, &level0);
        let mut mid = Vec::new();
        if fourth_order {
            let mut level1: Vec<usize> = level0.iter().chain(&ring1).copied().collect();
            level1.sort_unstable();
            expand(&mut included, &level1);
            mid = level1;
        }
        let halo: Vec<usize> = (0..n).filter(|&i| included[i]).collect();
        let mut pos = vec![usize::MAX; n];
        for (slot, &gi) in halo.iter().enumerate() {
            pos[gi] = slot;
        }

        // One basis evaluation per halo point.
        let pts: Vec<[f64; 2]> = halo.iter().map(|&gi| [grid.xs[gi], 0.0]).collect();
        let phi = model.basis_at_points(f_n, &pts)?;
        let q = model.q;

        let pick = |rows: &[usize]| {
            let mut t = Tensor::zeros(rows.len(), q);
            for (r, &gi) in rows.iter().enumerate() {
                for j in 0..q {
                    *t.at_mut(r, j) = phi.at(pos[gi], j);
                }
            }
            t
        };
        let phi_sel = pick(selected);
        // Δ of each column at a target set, reading values through `pos`.
        let lap_of = |src: &Tensor, src_rows: &[usize], targets: &[usize]| {
            let mut src_pos = vec![usize::MAX; n];
            for (slot, &gi) in src_rows.iter().enumerate() {
                src_pos[gi] = slot;
            }
            let mut t = Tensor::zeros(targets.len(), q);
            for (r, &gi) in targets.iter().enumerate() {
                for (c, coef) in lap.row(gi) {
                    let slot = src_pos[c];
                    assert!(slot != usize::MAX, "stencil left the evaluated halo");
                    for j in 0..q {
                        *t.at_mut(r, j) += coef * src.at(slot, j);
                    }
                }
            }
            t
        };
        let (lap_phi_sel, bih_phi_sel) = if fourth_order {
            let lap_phi_mid = lap_of(&phi, &halo, &mid);
            let bih_phi_sel = lap_of(&lap_phi_mid, &mid, selected);
            (Tensor::zeros(0, 0), bih_phi_sel)
        } else {
            (lap_of(&phi, &halo, selected), Tensor::zeros(0, 0))
        };

        // State side: fₙ, plus its explicit half-step under the
        // trapezoidal scheme.
        let gamma = scheme.gamma(dt);
        let b = match scheme {
            Scheme::BackwardEuler => selected.iter().map(|&i| f_n[i]).collect(),
            Scheme::CrankNicolson => {
                let lf = apply_spatial(eq, grid, f_n);
                selected.iter().map(|&i| f_n[i] + gamma * lf[i]).collect()
            }
        };

        Ok(TlWorkspace {
            eq: eq.clone(),
            gamma,
            selected: selected.to_vec(),
            b,
            lap,
            halo,
            pos,
            mid,
            phi,
            phi_sel,
            lap_phi_sel,
            bih_phi_sel,
        })
    }

    pub fn n_c(&self) -> usize {
        self.selected.len()
    }

    pub fn q(&self) -> usize {
        self.phi.cols
    }

    /// The least-squares system `(A, b)` with
    /// `A[i,j] = (φⱼ − γ·L(φⱼ))(xᵢ)`. Only state-linear kinds admit it.
    pub fn system(&self) -> Result<(Tensor, Vec<f64>)> {
        if !self.eq.is_linear() {
            return Err(Error::Config(
                "the closed-form refit needs a state-linear kind; use the iterative method".into(),
            ));
        }
        let (n_c, q) = (self.n_c(), self.q());
        let mut a = Tensor::zeros(n_c, q);
        match self.eq {
            Equation::ReactionDiffusion1d { d, .. } => {
                for i in 0..n_c {
                    for j in 0..q {
                        *a.at_mut(i, j) =
                            self.phi_sel.at(i, j) - self.gamma * d * self.lap_phi_sel.at(i, j);
                    }
                }
            }
            Equation::AllenCahn1d { d1, .. } => {
                for i in 0..n_c {
                    for j in 0..q {
                        *a.at_mut(i, j) =
                            self.phi_sel.at(i, j) - self.gamma * d1 * self.lap_phi_sel.at(i, j);
                    }
                }
            }
            Equation::CahnHilliard1d { d1, .. } => {
                for i in 0..n_c {
                    for j in 0..q {
                        *a.at_mut(i, j) =
                            self.phi_sel.at(i, j) + self.gamma * d1 * self.bih_phi_sel.at(i, j);
                    }
                }
            }
            Equation::Rte1d { .. } => unreachable!("rejected in the constructor"),
        }
        Ok((a, self.b.clone()))
    }

    /// `g` at every halo slot for the given weights.
    fn g_halo(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.q(), "weight count mismatch");
        let mut g = vec![0.0; self.halo.len()];
        for (slot, gv) in g.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..self.q() {
                acc += self.phi.at(slot, j) * w[j];
            }
            *gv = acc;
        }
        g
    }

    /// Fit residual `r(w)[i] = (g − γ·L(g))(xᵢ) − bᵢ`.
    pub fn residual(&self, w: &[f64]) -> Vec<f64> {
        let g = self.g_halo(w);
        let lap_at = |values: &dyn Fn(usize) -> f64, gi: usize| -> f64 {
            self.lap.row(gi).map(|(c, coef)| coef * values(c)).sum()
        };
        let g_of = |gi: usize| g[self.pos[gi]];
        self.selected
            .iter()
            .enumerate()
            .map(|(i, &gi)| {
                let gs = g_of(gi);
                let lg = match self.eq {
                    Equation::ReactionDiffusion1d { d, k } => {
                        d * lap_at(&g_of, gi) + k * gs * gs
                    }
                    Equation::AllenCahn1d { d1, d2 } => {
                        d1 * lap_at(&g_of, gi) + d2 * (gs - gs.powi(3))
                    }
                    Equation::CahnHilliard1d { d1, d2 } => {
                        // Chemical potential on the inner ring, then Δ.
                        let mu = |m: usize| -> f64 {
                            let gm = g_of(m);
                            -d1 * lap_at(&g_of, m) + d2 * (gm.powi(3) - gm)
                        };
                        lap_at(&mu, gi)
                    }
                    Equation::Rte1d { .. } => unreachable!(),
                };
                gs - self.gamma * lg - self.b[i]
            })
            .collect()
    }

    /// Jacobian `J[i,j] = φⱼ(xᵢ) − γ·(L′(g)φⱼ)(xᵢ)` of the residual.
    pub fn jacobian(&self, w: &[f64]) -> Tensor {
        let g = self.g_halo(w);
        let (n_c, q) = (self.n_c(), self.q());
        let mut jac = Tensor::zeros(n_c, q);
        match self.eq {
            Equation::ReactionDiffusion1d { d, k } => {
                for (i, &gi) in self.selected.iter().enumerate() {
                    let gs = g[self.pos[gi]];
                    let diag = 1.0 - self.gamma * 2.0 * k * gs;
                    for j in 0..q {
                        *jac.at_mut(i, j) = diag * self.phi_sel.at(i, j)
                            - self.gamma * d * self.lap_phi_sel.at(i, j);
                    }
                }
            }
            Equation::AllenCahn1d { d1, d2 } => {
                for (i, &gi) in self.selected.iter().enumerate() {
                    let gs = g[self.pos[gi]];
                    let diag = 1.0 - self.gamma * d2 * (1.0 - 3.0 * gs * gs);
                    for j in 0..q {
                        *jac.at_mut(i, j) = diag * self.phi_sel.at(i, j)
                            - self.gamma * d1 * self.lap_phi_sel.at(i, j);
                    }
                }
            }
            Equation::CahnHilliard1d { d1, d2 } => {
                // L′(g)v = Δ(−d1·Δv + d2(3g²−1)v): the biharmonic part
                // is precomputed; the pointwise part needs one more Δ.
                let mut mid_pos = vec![usize::MAX; self.pos.len()];
                for (slot, &gi) in self.mid.iter().enumerate() {
                    mid_pos[gi] = slot;
                }
                let well: Vec<f64> = self
                    .mid
                    .iter()
                    .map(|&m| {
                        let gm = g[self.pos[m]];
                        d2 * (3.0 * gm * gm - 1.0)
                    })
                    .collect();
                for (i, &gi) in self.selected.iter().enumerate() {
                    for j in 0..q {
                        let mut lw = 0.0;
                        for (c, coef) in self.lap.row(gi) {
                            let slot = mid_pos[c];
                            assert!(slot != usize::MAX, "stencil left the inner ring");
                            lw += coef * well[slot] * self.phi.at(self.pos[c], j);
                        }
                        *jac.at_mut(i, j) = self.phi_sel.at(i, j)
                            - self.gamma * (-d1 * self.bih_phi_sel.at(i, j) + lw);
                    }
                }
            }
            Equation::Rte1d { .. } => unreachable!(),
        }
        jac
    }
}

/// Assemble the linear refit system at the given sensors.
pub fn assemble_tl_system(
    model: &DeepONetModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    scheme: Scheme,
    f_n: &[f64],
    selected: &[usize],
) -> Result<(Tensor, Vec<f64>)> {
    TlWorkspace::new(model, eq, grid, dt, scheme, f_n, selected)?.system()
}

/// Minimum-norm least squares via SVD with relative cutoff `rcond`;
/// returns the solution and the retained rank.
fn min_norm_lstsq(a: &Tensor, b: &[f64], rcond: f64) -> Result<(Vec<f64>, usize)> {
    assert_eq!(a.rows, b.len(), "system shape mismatch");
    let m = DMatrix::from_row_slice(a.rows, a.cols, &a.data);
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("left vectors requested");
    let vt = svd.v_t.as_ref().expect("right vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rcond * smax;
    let mut w = vec![0.0; a.cols];
    let mut kept = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            kept += 1;
            let mut ub = 0.0;
            for r in 0..a.rows {
                ub += u[(r, i)] * b[r];
            }
            let scale = ub / s;
            for c in 0..a.cols {
                w[c] += vt[(i, c)] * scale;
            }
        }
    }
    if kept == 0 {
        return Err(Error::Solver {
            context: "every basis direction fell below the conditioning cutoff".into(),
            iterations: 0,
            residual: smax,
        });
    }
    Ok((w, kept))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Closed-form refit for state-linear kinds. Returns weights that
/// never fit worse than the incoming ones.
pub fn tl_update_linear(
    model: &DeepONetModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    scheme: Scheme,
    f_n: &[f64],
    cfg: &TlConfig,
) -> Result<Vec<f64>> {
    let selected = subsample_sensors(grid.n_x(), cfg.n_c, cfg.subsample_seed)?;
    let ws = TlWorkspace::new(model, eq, grid, dt, scheme, f_n, &selected)?;
    let (a, b) = ws.system()?;
    let (w_star, _) = min_norm_lstsq(&a, &b, cfg.rcond)?;
    // Truncation can, in rank-deficient corners, fit worse than the
    // incoming weights; keep those in that case.
    let res_of = |w: &[f64]| {
        let mut r = 0.0;
        for i in 0..a.rows {
            let mut ri = -b[i];
            for j in 0..a.cols {
                ri += a.at(i, j) * w[j];
            }
            r += ri * ri;
        }
        r
    };
    if res_of(&w_star) > res_of(&model.w) {
        return Ok(model.w.clone());
    }
    Ok(w_star)
}

/// Iterative refit for kinds with reaction terms: damped Gauss–Newton
/// from the model's current weights.
pub fn tl_update_nonlinear(
    model: &DeepONetModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    scheme: Scheme,
    f_n: &[f64],
    cfg: &TlConfig,
) -> Result<NonlinearFit> {
    let selected = subsample_sensors(grid.n_x(), cfg.n_c, cfg.subsample_seed)?;
    let ws = TlWorkspace::new(model, eq, grid, dt, scheme, f_n, &selected)?;
    lm_fit(&ws, &model.w, cfg)
}

fn lm_fit(ws: &TlWorkspace, w0: &[f64], cfg: &TlConfig) -> Result<NonlinearFit> {
    let q = ws.q();
    assert_eq!(w0.len(), q, "weight count mismatch");
    let mut w = w0.to_vec();
    let mut r = ws.residual(&w);
    let mut cost = sq_norm(&r);
    let mut trace = vec![cost];
    let mut lambda = LAMBDA_INIT;

    for iter in 0..cfg.lm_max_iters {
        if cost <= f64::MIN_POSITIVE {
            return Ok(NonlinearFit {
                w,
                cost_trace: trace,
                iterations: iter,
            });
        }
        let jac = ws.jacobian(&w);
        // Normal-equation pieces J'J and J'r.
        let mut jtj = DMatrix::<f64>::zeros(q, q);
        let mut jtr = vec![0.0; q];
        for i in 0..jac.rows {
            for a in 0..q {
                let ja = jac.at(i, a);
                jtr[a] += ja * r[i];
                for b in a..q {
                    jtj[(a, b)] += ja * jac.at(i, b);
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }

        // Escalate damping until a step lowers the cost.
        let (new_w, new_r, new_cost, step_sq) = loop {
            let mut damped = jtj.clone();
            for a in 0..q {
                damped[(a, a)] += lambda;
            }
            let step = damped.clone().cholesky().map(|ch| {
                let rhs = DMatrix::from_column_slice(q, 1, &jtr);
                ch.solve(&rhs)
            });
            if let Some(delta) = step {
                let cand: Vec<f64> = (0..q).map(|a| w[a] - delta[(a, 0)]).collect();
                let cand_r = ws.residual(&cand);
                let cand_cost = sq_norm(&cand_r);
                if cand_cost < cost {
                    let step_sq: f64 = (0..q).map(|a| delta[(a, 0)] * delta[(a, 0)]).sum();
                    lambda = (lambda / 10.0).max(f64::MIN_POSITIVE);
                    break (cand, cand_r, cand_cost, step_sq);
                }
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                return Err(Error::Convergence {
                    context: "refit stagnated: no damping lowered the cost".into(),
                    iterations: iter,
                    cost,
                    best: w,
                });
            }
        };

        let prev_cost = cost;
        w = new_w;
        r = new_r;
        cost = new_cost;
        trace.push(cost);

        let rel_decrease = (prev_cost - cost) / prev_cost;
        let w_norm = sq_norm(&w).sqrt();
        if rel_decrease < cfg.ftol || step_sq.sqrt() < cfg.xtol * (w_norm + cfg.xtol) {
            return Ok(NonlinearFit {
                w,
                cost_trace: trace,
                iterations: iter + 1,
            });
        }
    }
    Ok(NonlinearFit {
        w,
        cost_trace: trace,
        iterations: cfg.lm_max_iters,
    })
}

/// Refit dispatch on the configured method.
pub fn tl_update(
    model: &DeepONetModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    scheme: Scheme,
    f_n: &[f64],
    cfg: &TlConfig,
) -> Result<Vec<f64>> {
    match cfg.method {
        TlMethod::LinearLstsq => tl_update_linear(model, eq, grid, dt, scheme, f_n, cfg),
        TlMethod::NonlinearLm => {
            Ok(tl_update_nonlinear(model, eq, grid, dt, scheme, f_n, cfg)?.w)
        }
    }
}
