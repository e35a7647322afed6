//! Evolution equations, grids and discrete spatial operators.
//!
//! Four one-dimensional dissipative model problems are supported:
//!
//! * reaction–diffusion  `∂ₜf = d·Δf + k·f²` on \[0,1\], zero Dirichlet;
//! * Allen–Cahn          `∂ₜf = d₁·Δf + d₂·(f − f³)`, periodic;
//! * Cahn–Hilliard       `∂ₜf = Δ(−d₁·Δf + d₂·(f³ − f))`, periodic;
//! * kinetic transport   `ε∂ₜf + v∂ₓf = (⟨f⟩ − f)/ε` on \[0,1\]×\[−1,1\]
//!   with inflow data `f(0, v>0) = φ_L`, `f(1, v<0) = φ_R`.
//!
//! Space is discretized with second-order central differences on a
//! uniform grid (the fourth-order operator is the Laplacian applied
//! twice). Dirichlet grids include both endpoints; those rows are
//! pinned and their operator rows vanish. Periodic grids store points
//! `i/n` and wrap. The kinetic problem lives on the tensor grid of
//! spatial nodes and Gauss–Legendre velocity nodes, with first-order
//! upwinding in `x` by the sign of `v`; `⟨·⟩` is the normalized
//! Gauss–Legendre average (weights summing to 2, divided by 2, so
//! ⟨1⟩ = 1). Its micro–macro split `f = ρ + εg`, `ρ = ⟨f⟩` is what
//! [`apply_spatial`] reports for that kind.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::Csr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero Dirichlet; grid includes both endpoints, state pinned there.
    Dirichlet0,
    /// Periodic on [0,1); grid excludes the right endpoint.
    Periodic,
    /// Kinetic inflow boundary on the phase-space grid.
    Inflow,
}

/// Uniform spatial (or phase-space) grid. For purely spatial grids the
/// velocity block is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub h: f64,
    pub boundary: Boundary,
    pub vs: Vec<f64>,
    pub v_weights: Vec<f64>,
}

impl Grid {
    /// Dirichlet grid with `n` nodes including both endpoints of [0,1].
    pub fn dirichlet(n: usize) -> Grid {
        assert!(n >= 3, "dirichlet grid needs at least 3 nodes");
        let h = 1.0 / (n - 1) as f64;
        Grid {
            xs: (0..n).map(|i| i as f64 * h).collect(),
            h,
            boundary: Boundary::Dirichlet0,
            vs: Vec::new(),
            v_weights: Vec::new(),
        }
    }

    /// Periodic grid with nodes `i/n`, `i = 0…n−1`.
    pub fn periodic(n: usize) -> Grid {
        assert!(n >= 3, "periodic grid needs at least 3 nodes");
        let h = 1.0 / n as f64;
        Grid {
            xs: (0..n).map(|i| i as f64 * h).collect(),
            h,
            boundary: Boundary::Periodic,
            vs: Vec::new(),
            v_weights: Vec::new(),
        }
    }

    /// Phase-space grid: `n_x` spatial nodes including endpoints of
    /// [0,1] and `n_v` Gauss–Legendre velocity nodes on [−1,1].
    pub fn phase(n_x: usize, n_v: usize) -> Grid {
        assert!(n_x >= 3 && n_v >= 2, "phase grid too small");
        let h = 1.0 / (n_x - 1) as f64;
        let (vs, v_weights) = gauss_legendre(n_v);
        Grid {
            xs: (0..n_x).map(|i| i as f64 * h).collect(),
            h,
            boundary: Boundary::Inflow,
            vs,
            v_weights,
        }
    }

    pub fn n_x(&self) -> usize {
        self.xs.len()
    }

    pub fn n_v(&self) -> usize {
        self.vs.len()
    }

    /// Number of state entries: spatial nodes, or spatial × velocity.
    pub fn n_points(&self) -> usize {
        self.xs.len() * self.vs.len().max(1)
    }

    /// Flattened coordinates `(x, v)` in state order (x-major, v inner;
    /// `v = 0` for purely spatial grids).
    pub fn points(&self) -> Vec<[f64; 2]> {
        if self.vs.is_empty() {
            self.xs.iter().map(|&x| [x, 0.0]).collect()
        } else {
            let mut pts = Vec::with_capacity(self.n_points());
            for &x in &self.xs {
                for &v in &self.vs {
                    pts.push([x, v]);
                }
            }
            pts
        }
    }
}

/// Gauss–Legendre nodes and weights on [−1, 1]; weights sum to 2.
/// Newton iteration on the Legendre recurrence, accurate to ~1e-15.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        xs[n - 1 - i] = x;
        ws[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Equation {
    /// `∂ₜf = d·Δf + k·f²`, zero Dirichlet.
    ReactionDiffusion1d { d: f64, k: f64 },
    /// `∂ₜf = d1·Δf + d2·(f − f³)`, periodic.
    AllenCahn1d { d1: f64, d2: f64 },
    /// `∂ₜf = Δ(−d1·Δf + d2·(f³ − f))`, periodic.
    CahnHilliard1d { d1: f64, d2: f64 },
    /// Scaled kinetic transport with isotropizing collisions and fixed
    /// inflow data `phi_left`, `phi_right`.
    Rte1d {
        eps: f64,
        phi_left: f64,
        phi_right: f64,
    },
}

impl Equation {
    pub fn rd(d: f64, k: f64) -> Equation {
        Equation::ReactionDiffusion1d { d, k }
    }

    pub fn ac(d1: f64, d2: f64) -> Equation {
        Equation::AllenCahn1d { d1, d2 }
    }

    pub fn ch(d1: f64, d2: f64) -> Equation {
        Equation::CahnHilliard1d { d1, d2 }
    }

    /// Kinetic transport with the standard inflow data (1 on the left,
    /// 1/2 on the right).
    pub fn rte(eps: f64) -> Equation {
        Equation::Rte1d {
            eps,
            phi_left: 1.0,
            phi_right: 0.5,
        }
    }

    pub fn boundary(&self) -> Boundary {
        match self {
            Equation::ReactionDiffusion1d { .. } => Boundary::Dirichlet0,
            Equation::AllenCahn1d { .. } | Equation::CahnHilliard1d { .. } => Boundary::Periodic,
            Equation::Rte1d { .. } => Boundary::Inflow,
        }
    }

    /// True when the right side is linear in the state, so implicit
    /// steps reduce to one cached factorization.
    pub fn is_linear(&self) -> bool {
        match *self {
            Equation::ReactionDiffusion1d { k, .. } => k == 0.0,
            Equation::AllenCahn1d { d2, .. } | Equation::CahnHilliard1d { d2, .. } => d2 == 0.0,
            Equation::Rte1d { .. } => true,
        }
    }

    /// True when `∫ f·L(f) ≤ 0` holds discretely for every state — the
    /// diffusion-only kinds whose implicit steps cannot grow the norm.
    pub fn is_norm_dissipative(&self) -> bool {
        match *self {
            Equation::ReactionDiffusion1d { k, .. } => k == 0.0,
            Equation::AllenCahn1d { d2, .. } | Equation::CahnHilliard1d { d2, .. } => d2 == 0.0,
            Equation::Rte1d { .. } => false,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Equation::ReactionDiffusion1d { .. } => "rd1d",
            Equation::AllenCahn1d { .. } => "ac1d",
            Equation::CahnHilliard1d { .. } => "ch1d",
            Equation::Rte1d { .. } => "rte1d",
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if grid.boundary != self.boundary() {
            return Err(Error::Config(format!(
                "{} expects {:?} grid, got {:?}",
                self.kind_name(),
                self.boundary(),
                grid.boundary
            )));
        }
        let params_ok = match *self {
            Equation::ReactionDiffusion1d { d, .. } => d >= 0.0,
            Equation::AllenCahn1d { d1, .. } => d1 >= 0.0,
            Equation::CahnHilliard1d { d1, .. } => d1 >= 0.0,
            Equation::Rte1d { eps, .. } => eps > 0.0,
        };
        if !params_ok {
            return Err(Error::Config(format!(
                "non-physical coefficients for {}",
                self.kind_name()
            )));
        }
        Ok(())
    }
}

/// Interior bump `A(x) = x(1−x)`: vanishes at both walls.
pub fn rte_mask_a(x: f64) -> f64 {
    x * (1.0 - x)
}

/// Outflow bump `B(x,v) = R(v)·x + R(−v)·(1−x)` with `R = max(·,0)`:
/// vanishes exactly on the inflow pairs `(0, v>0)` and `(1, v<0)`.
pub fn rte_mask_b(x: f64, v: f64) -> f64 {
    v.max(0.0) * x + (-v).max(0.0) * (1.0 - x)
}

/// Inflow interpolant `C(x) = φ_L·(1−x) + φ_R·x`: matches the boundary
/// data at both walls.
pub fn rte_mask_c(x: f64, phi_left: f64, phi_right: f64) -> f64 {
    phi_left * (1.0 - x) + phi_right * x
}

/// Second-order Laplacian on a Dirichlet grid; boundary rows are zero
/// because boundary values are pinned.
pub fn lap_dirichlet(grid: &Grid) -> Csr {
    let n = grid.n_x();
    let c = 1.0 / (grid.h * grid.h);
    let mut tri = Vec::with_capacity(3 * n);
    for i in 1..n - 1 {
        tri.push((i, i - 1, c));
        tri.push((i, i, -2.0 * c));
        tri.push((i, i + 1, c));
    }
    Csr::from_triplets(n, n, &tri)
}

/// Second-order Laplacian with periodic wrap.
pub fn lap_periodic(grid: &Grid) -> Csr {
    let n = grid.n_x();
    let c = 1.0 / (grid.h * grid.h);
    let mut tri = Vec::with_capacity(3 * n);
    for i in 0..n {
        tri.push((i, (i + n - 1) % n, c));
        tri.push((i, i, -2.0 * c));
        tri.push((i, (i + 1) % n, c));
    }
    Csr::from_triplets(n, n, &tri)
}

/// The grid's Laplacian for the equation's boundary type.
pub fn laplacian(eq: &Equation, grid: &Grid) -> Csr {
    match eq.boundary() {
        Boundary::Dirichlet0 => lap_dirichlet(grid),
        Boundary::Periodic => lap_periodic(grid),
        Boundary::Inflow => panic!("laplacian() is not defined for phase-space grids"),
    }
}

/// Cached sparse operators for the kinetic problem on one phase grid.
/// State layout is x-major with the velocity index innermost.
pub struct RteOps {
    /// Normalized velocity average: `[n_x × n_x·n_v]`, `⟨1⟩ = 1`.
    pub avg: Rc<Csr>,
    /// Replicate a spatial vector across velocities: `[n_x·n_v × n_x]`.
    pub lift: Rc<Csr>,
    /// `v·∂ₓ` with first-order upwinding by the sign of `v`; rows whose
    /// upwind neighbor is outside the grid fall back to the inward
    /// one-sided difference (those rows are boundary rows anyway).
    pub vdx: Rc<Csr>,
    /// Flattened indices of the inflow boundary pairs
    /// `(x=0, v>0)` and `(x=1, v<0)`.
    pub inflow: Vec<usize>,
    /// Inflow data value for each entry of `inflow`.
    pub inflow_values: Vec<f64>,
}

impl RteOps {
    pub fn new(eq: &Equation, grid: &Grid) -> Result<RteOps> {
        let Equation::Rte1d {
            phi_left,
            phi_right,
            ..
        } = *eq
        else {
            return Err(Error::Config("RteOps requires the kinetic kind".into()));
        };
        eq.validate(grid)?;
        let (nx, nv) = (grid.n_x(), grid.n_v());
        let n = nx * nv;
        let idx = |ix: usize, iv: usize| ix * nv + iv;

        let mut avg_tri = Vec::with_capacity(n);
        let mut lift_tri = Vec::with_capacity(n);
        for ix in 0..nx {
            for iv in 0..nv {
                avg_tri.push((ix, idx(ix, iv), grid.v_weights[iv] / 2.0));
                lift_tri.push((idx(ix, iv), ix, 1.0));
            }
        }

        let hinv = 1.0 / grid.h;
        let mut vdx_tri = Vec::with_capacity(2 * n);
        for iv in 0..nv {
            let v = grid.vs[iv];
            for ix in 0..nx {
                let row = idx(ix, iv);
                // Upwind by sign of v; inward one-sided at the wall the
                // stencil would leave.
                let (lo, hi) = if v > 0.0 {
                    if ix == 0 {
                        (idx(0, iv), idx(1, iv))
                    } else {
                        (idx(ix - 1, iv), idx(ix, iv))
                    }
                } else if ix == nx - 1 {
                    (idx(nx - 2, iv), idx(nx - 1, iv))
                } else {
                    (idx(ix, iv), idx(ix + 1, iv))
                };
                vdx_tri.push((row, hi, v * hinv));
                vdx_tri.push((row, lo, -v * hinv));
            }
        }

        let mut inflow = Vec::new();
        let mut inflow_values = Vec::new();
        for iv in 0..nv {
            if grid.vs[iv] > 0.0 {
                inflow.push(idx(0, iv));
                inflow_values.push(phi_left);
            } else {
                inflow.push(idx(nx - 1, iv));
                inflow_values.push(phi_right);
            }
        }

        Ok(RteOps {
            avg: Rc::new(Csr::from_triplets(nx, n, &avg_tri)),
            lift: Rc::new(Csr::from_triplets(n, nx, &lift_tri)),
            vdx: Rc::new(Csr::from_triplets(n, n, &vdx_tri)),
            inflow,
            inflow_values,
        })
    }

    /// `ρ = ⟨f⟩` and `g = (f − ρ)/ε`, the micro–macro split.
    pub fn decompose(&self, f: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
        let rho = self.avg.matvec(f);
        let lifted = self.lift.matvec(&rho);
        let g = f
            .iter()
            .zip(&lifted)
            .map(|(fv, rv)| (fv - rv) / eps)
            .collect();
        (rho, g)
    }

    /// `f = ρ + εg`.
    pub fn recompose(&self, rho: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let lifted = self.lift.matvec(rho);
        lifted.iter().zip(g).map(|(rv, gv)| rv + eps * gv).collect()
    }
}

/// Discrete right side `L(u)` of `∂ₜu = L(u)`.
///
/// For the spatial kinds `state` is the grid vector. For the kinetic
/// kind `state` is the stacked micro–macro pair `[ρ; g]` (lengths
/// `n_x` and `n_x·n_v`) and the result stacks their time derivatives:
///
/// ```text
/// ∂ₜρ = −⟨v∂ₓg⟩
/// ∂ₜg = (⟨g⟩ − g − ε(v∂ₓg − ⟨v∂ₓg⟩) − v∂ₓρ) / ε²
/// ```
pub fn apply_spatial(eq: &Equation, grid: &Grid, state: &[f64]) -> Vec<f64> {
    match *eq {
        Equation::ReactionDiffusion1d { d, k } => {
            assert_eq!(state.len(), grid.n_x(), "state length mismatch");
            let lap = lap_dirichlet(grid);
            let mut out = lap.matvec(state);
            let n = state.len();
            for i in 0..n {
                out[i] *= d;
                // Boundary rows stay zero: the state is pinned there.
                if i != 0 && i != n - 1 {
                    out[i] += k * state[i] * state[i];
                }
            }
            out
        }
        Equation::AllenCahn1d { d1, d2 } => {
            assert_eq!(state.len(), grid.n_x(), "state length mismatch");
            let lap = lap_periodic(grid);
            let mut out = lap.matvec(state);
            for (o, &u) in out.iter_mut().zip(state) {
                *o = d1 * *o + d2 * (u - u * u * u);
            }
            out
        }
        Equation::CahnHilliard1d { d1, d2 } => {
            assert_eq!(state.len(), grid.n_x(), "state length mismatch");
            let lap = lap_periodic(grid);
            let inner_lap = lap.matvec(state);
            let mu: Vec<f64> = state
                .iter()
                .zip(&inner_lap)
                .map(|(&u, &lu)| -d1 * lu + d2 * (u * u * u - u))
                .collect();
            lap.matvec(&mu)
        }
        Equation::Rte1d { eps, .. } => {
            let ops = RteOps::new(eq, grid).expect("valid kinetic setup");
            let nx = grid.n_x();
            let n = grid.n_points();
            assert_eq!(state.len(), nx + n, "state must stack [rho; g]");
            let (rho, g) = state.split_at(nx);
            let vdxg = ops.vdx.matvec(g);
            let avg_vdxg = ops.avg.matvec(&vdxg);
            let lift_avg_vdxg = ops.lift.matvec(&avg_vdxg);
            let avg_g = ops.avg.matvec(g);
            let lift_avg_g = ops.lift.matvec(&avg_g);
            let vdx_rho = ops.vdx.matvec(&ops.lift.matvec(rho));
            let mut out = Vec::with_capacity(nx + n);
            out.extend(avg_vdxg.iter().map(|x| -x));
            for i in 0..n {
                out.push(
                    (lift_avg_g[i] - g[i] - eps * (vdxg[i] - lift_avg_vdxg[i]) - vdx_rho[i])
                        / (eps * eps),
                );
            }
            out
        }
    }
}

/// Directional derivative `L′(u)·w` of the spatial operator at state
/// `u` (spatial kinds only; the kinetic operator is linear).
pub fn apply_spatial_linearized(eq: &Equation, grid: &Grid, u: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(u.len(), w.len(), "state/direction length mismatch");
    match *eq {
        Equation::ReactionDiffusion1d { d, k } => {
            let lap = lap_dirichlet(grid);
            let mut out = lap.matvec(w);
            let n = u.len();
            for i in 0..n {
                out[i] *= d;
                if i != 0 && i != n - 1 {
                    out[i] += 2.0 * k * u[i] * w[i];
                }
            }
            out
        }
        Equation::AllenCahn1d { d1, d2 } => {
            let lap = lap_periodic(grid);
            let mut out = lap.matvec(w);
            for i in 0..u.len() {
                out[i] = d1 * out[i] + d2 * (1.0 - 3.0 * u[i] * u[i]) * w[i];
            }
            out
        }
        Equation::CahnHilliard1d { d1, d2 } => {
            let lap = lap_periodic(grid);
            let lw = lap.matvec(w);
            let dmu: Vec<f64> = u
                .iter()
                .zip(w)
                .zip(&lw)
                .map(|((&uv, &wv), &lwv)| -d1 * lwv + d2 * (3.0 * uv * uv - 1.0) * wv)
                .collect();
            lap.matvec(&dmu)
        }
        Equation::Rte1d { .. } => panic!("linearization is only defined for the spatial kinds"),
    }
}
