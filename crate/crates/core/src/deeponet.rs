//! Operator networks mapping a sensor vector and a coordinate to the
//! propagated value, with the final linear layer held explicitly.
//!
//! The surrogate evaluates
//!
//! ```text
//! G(f)(x) = mask(x) · Σⱼ wⱼ Σₖ h_{k,j}(f) · t_k(x)
//! ```
//!
//! where `h ∈ ℝ^{p×q}` is the branch network's output reshaped, `t(x)`
//! is the trunk output, and `w ∈ ℝ^q` is the explicit last layer. The
//! functions `φⱼ(x; f) = mask(x)·Σₖ h_{k,j} t_k(x)` act as a basis
//! adapted to the input `f`, and `G(f) = Σⱼ wⱼ φⱼ` is linear in `w` —
//! the property the fast transfer refit exploits.
//!
//! Boundary conditions are built into the architecture, not penalized:
//! Dirichlet models multiply by `x(1−x)`, periodic models feed
//! `(cos 2πx, sin 2πx)` to the trunk, and the kinetic composite model
//! blends two networks with the fixed masks `A`, `B`, `C` so the inflow
//! data is exact for every parameter value. Sensors coincide with the
//! solver grid, so a model's grid evaluation feeds straight back in as
//! the next step's sensor vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::equation::{rte_mask_a, rte_mask_b, rte_mask_c, Boundary, Grid};
use crate::error::{Error, Result};
use crate::mlp::{Activation, MLPParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Multiply the output by `x(1−x)`; exact zero Dirichlet data.
    DirichletMask,
    /// Feed `(cos 2πx, sin 2πx)` to the trunk; exactly 1-periodic.
    PeriodicLift,
    /// Raw coordinates, no mask (used inside the kinetic composite).
    None,
}

impl BoundaryMode {
    pub fn from_boundary(b: Boundary) -> BoundaryMode {
        match b {
            Boundary::Dirichlet0 => BoundaryMode::DirichletMask,
            Boundary::Periodic => BoundaryMode::PeriodicLift,
            Boundary::Inflow => BoundaryMode::None,
        }
    }

    /// Trunk features produced from the spatial coordinate.
    pub fn lift_dim(&self) -> usize {
        match self {
            BoundaryMode::PeriodicLift => 2,
            _ => 1,
        }
    }

    /// Write the lifted coordinate into `out` (length `lift_dim`).
    pub fn lift(&self, x: f64, out: &mut [f64]) {
        match self {
            BoundaryMode::PeriodicLift => {
                // Reduce to [0,1) first so shifted coordinates hit the
                // same trunk input up to the caller's own rounding.
                let xr = x - x.floor();
                let ang = 2.0 * std::f64::consts::PI * xr;
                out[0] = ang.cos();
                out[1] = ang.sin();
            }
            _ => out[0] = x,
        }
    }

    pub fn mask(&self, x: f64) -> f64 {
        match self {
            BoundaryMode::DirichletMask => x * (1.0 - x),
            _ => 1.0,
        }
    }
}

/// Branch/trunk operator network with an explicit last layer.
#[derive(Clone, Debug)]
pub struct DeepONetModel {
    /// Sensor vector `[n_sensors]` → flattened feature matrix `[p·q]`.
    pub branch: MLPParams,
    /// Lifted coordinate → `[p]` trunk features.
    pub trunk: MLPParams,
    /// Explicit last-layer weights `[q]`.
    pub w: Vec<f64>,
    pub p: usize,
    pub q: usize,
    pub n_sensors: usize,
    pub boundary: BoundaryMode,
    /// Trunk consumes `(x, v)` pairs instead of a lifted `x`.
    pub phase_input: bool,
}

impl DeepONetModel {
    pub fn new(
        branch: MLPParams,
        trunk: MLPParams,
        w: Vec<f64>,
        boundary: BoundaryMode,
        phase_input: bool,
    ) -> Result<DeepONetModel> {
        let n_sensors = branch.in_dim();
        let pq = branch.out_dim();
        let p = trunk.out_dim();
        if pq % p != 0 {
            return Err(Error::Config(format!(
                "branch output {pq} is not a multiple of trunk output {p}"
            )));
        }
        let q = pq / p;
        if w.len() != q {
            return Err(Error::Config(format!(
                "last layer has {} weights, feature matrix implies q = {q}",
                w.len()
            )));
        }
        let want_in = if phase_input { 2 } else { boundary.lift_dim() };
        if trunk.in_dim() != want_in {
            return Err(Error::Config(format!(
                "trunk input dimension {} does not match coordinate lift {want_in}",
                trunk.in_dim()
            )));
        }
        Ok(DeepONetModel {
            branch,
            trunk,
            w,
            p,
            q,
            n_sensors,
            boundary,
            phase_input,
        })
    }

    /// Fresh model: branch `[n_sensors, width×(depth−1), p·q]`, trunk
    /// `[lift, width×(depth−1), p]`, both gated when depth ≥ 3, last
    /// layer Glorot-initialized over its fan `q`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        n_sensors: usize,
        p: usize,
        q: usize,
        width: usize,
        depth: usize,
        activation: Activation,
        boundary: BoundaryMode,
        rng: &mut R,
    ) -> Result<DeepONetModel> {
        Self::init_with_trunk_input(
            n_sensors,
            p,
            q,
            width,
            depth,
            activation,
            boundary,
            boundary.lift_dim(),
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn init_with_trunk_input<R: Rng>(
        n_sensors: usize,
        p: usize,
        q: usize,
        width: usize,
        depth: usize,
        activation: Activation,
        boundary: BoundaryMode,
        trunk_in: usize,
        rng: &mut R,
    ) -> Result<DeepONetModel> {
        if depth < 2 {
            return Err(Error::Config("need at least two weight layers".into()));
        }
        let mut branch_dims = vec![n_sensors];
        branch_dims.extend(std::iter::repeat(width).take(depth - 1));
        branch_dims.push(p * q);
        let mut trunk_dims = vec![trunk_in];
        trunk_dims.extend(std::iter::repeat(width).take(depth - 1));
        trunk_dims.push(p);
        let branch = MLPParams::glorot(&branch_dims, activation, rng)?;
        let trunk = MLPParams::glorot(&trunk_dims, activation, rng)?;
        let bound = (6.0 / (q as f64 + 1.0)).sqrt();
        let w = (0..q).map(|_| rng.gen_range(-bound..bound)).collect();
        // The trunk may take extra inputs (a time prefix, or the phase
        // coordinate pair), so construct directly; `new` enforces the
        // plain spatial layout only.
        Ok(DeepONetModel {
            branch,
            trunk,
            w,
            p,
            q,
            n_sensors,
            boundary,
            phase_input: trunk_in == 2 && boundary == BoundaryMode::None,
        })
    }

    /// Feature matrix `h(f) ∈ [p×q]`, `h[k][j] = branch(f)[k·q + j]`.
    pub fn h_matrix(&self, f_sensors: &[f64]) -> Result<Tensor> {
        if f_sensors.len() != self.n_sensors {
            return Err(Error::Shape {
                op: "branch input",
                details: format!("got {} sensors, model expects {}", f_sensors.len(), self.n_sensors),
            });
        }
        let flat = self.branch.forward(f_sensors)?;
        Ok(Tensor::from_vec(self.p, self.q, flat))
    }

    fn trunk_input(&self, x: f64, v: f64) -> Vec<f64> {
        if self.phase_input {
            vec![x, v]
        } else {
            let mut buf = vec![0.0; self.boundary.lift_dim()];
            self.boundary.lift(x, &mut buf);
            buf
        }
    }

    /// Trunk features for a batch of coordinates: `[p × n]`.
    fn trunk_batch(&self, coords: &[[f64; 2]]) -> Result<Tensor> {
        let d = self.trunk.in_dim();
        let mut x = Tensor::zeros(d, coords.len());
        for (c, pt) in coords.iter().enumerate() {
            for (r, val) in self.trunk_input(pt[0], pt[1]).into_iter().enumerate() {
                *x.at_mut(r, c) = val;
            }
        }
        self.trunk.forward_batch(&x)
    }

    /// `G(f)(x)`.
    pub fn eval(&self, f_sensors: &[f64], x: f64) -> Result<f64> {
        self.eval_at(f_sensors, x, 0.0)
    }

    /// `G(f)(x, v)` for phase-space trunks (`v` ignored otherwise).
    pub fn eval_at(&self, f_sensors: &[f64], x: f64, v: f64) -> Result<f64> {
        let h = self.h_matrix(f_sensors)?;
        let t = self.trunk.forward(&self.trunk_input(x, v))?;
        Ok(self.combine(&h, &t) * self.boundary.mask(x))
    }

    fn combine(&self, h: &Tensor, t: &[f64]) -> f64 {
        // t'·h·w
        let mut acc = 0.0;
        for k in 0..self.p {
            let row = &h.data[k * self.q..(k + 1) * self.q];
            let hw: f64 = row.iter().zip(&self.w).map(|(a, b)| a * b).sum();
            acc += t[k] * hw;
        }
        acc
    }

    /// Basis value `φⱼ(x; f)` (mask included); `G(f) = Σⱼ wⱼ φⱼ`.
    pub fn basis(&self, f_sensors: &[f64], x: f64, j: usize) -> Result<f64> {
        if j >= self.q {
            return Err(Error::Shape {
                op: "basis index",
                details: format!("j = {j} out of range for q = {}", self.q),
            });
        }
        let h = self.h_matrix(f_sensors)?;
        let t = self.trunk.forward(&self.trunk_input(x, 0.0))?;
        let mut acc = 0.0;
        for k in 0..self.p {
            acc += t[k] * h.at(k, j);
        }
        Ok(acc * self.boundary.mask(x))
    }

    /// All basis functions on the grid: `Φ ∈ [n_points × q]`, mask
    /// included. Column `j` is `φⱼ` sampled at the grid points.
    pub fn basis_grid(&self, f_sensors: &[f64], grid: &Grid) -> Result<Tensor> {
        let pts = grid.points();
        self.basis_at_points(f_sensors, &pts)
    }

    /// Basis functions at arbitrary coordinates: `[len × q]`.
    pub fn basis_at_points(&self, f_sensors: &[f64], pts: &[[f64; 2]]) -> Result<Tensor> {
        let h = self.h_matrix(f_sensors)?;
        let t = self.trunk_batch(pts)?;
        let mut phi = Tensor::zeros(pts.len(), self.q);
        for (i, pt) in pts.iter().enumerate() {
            let mask = self.boundary.mask(pt[0]);
            for j in 0..self.q {
                let mut acc = 0.0;
                for k in 0..self.p {
                    acc += t.at(k, i) * h.at(k, j);
                }
                *phi.at_mut(i, j) = acc * mask;
            }
        }
        Ok(phi)
    }

    /// `G(f)` sampled at every grid point; the result is directly
    /// usable as the next step's sensor vector.
    pub fn eval_grid(&self, f_sensors: &[f64], grid: &Grid) -> Result<Vec<f64>> {
        let pts = grid.points();
        let h = self.h_matrix(f_sensors)?;
        let t = self.trunk_batch(&pts)?;
        let mut out = vec![0.0; pts.len()];
        // hw = h·w once, then one dot per point.
        let mut hw = vec![0.0; self.p];
        for k in 0..self.p {
            let row = &h.data[k * self.q..(k + 1) * self.q];
            hw[k] = row.iter().zip(&self.w).map(|(a, b)| a * b).sum();
        }
        for (i, pt) in pts.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..self.p {
                acc += t.at(k, i) * hw[k];
            }
            out[i] = acc * self.boundary.mask(pt[0]);
        }
        Ok(out)
    }

    /// Total trainable parameters: branch, trunk, and last layer.
    pub fn n_params(&self) -> usize {
        self.branch.n_params() + self.trunk.n_params() + self.q
    }

    /// Append all trainable parameters in flattening order
    /// (branch, trunk, last layer).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.branch.write_flat(out);
        self.trunk.write_flat(out);
        out.extend_from_slice(&self.w);
    }

    /// Read parameters back in flattening order; advances `pos`.
    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        self.branch.read_flat(src, pos);
        self.trunk.read_flat(src, pos);
        self.w.copy_from_slice(&src[*pos..*pos + self.q]);
        *pos += self.q;
    }

    /// Replace the last layer, keeping everything else shared.
    pub fn with_weights(&self, w: Vec<f64>) -> Result<DeepONetModel> {
        if w.len() != self.q {
            return Err(Error::Shape {
                op: "last layer",
                details: format!("got {} weights, expected {}", w.len(), self.q),
            });
        }
        let mut m = self.clone();
        m.w = w;
        Ok(m)
    }
}

/// Time-continuous variant: the trunk consumes `(t, lifted x)` and the
/// model maps an initial state to the whole solution on `[0, t0]`.
#[derive(Clone, Debug)]
pub struct ContModel {
    pub inner: DeepONetModel,
    pub t0: f64,
}

impl ContModel {
    pub fn init<R: Rng>(
        n_sensors: usize,
        p: usize,
        q: usize,
        width: usize,
        depth: usize,
        activation: Activation,
        boundary: BoundaryMode,
        t0: f64,
        rng: &mut R,
    ) -> Result<ContModel> {
        if !(t0.is_finite() && t0 > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {t0}")));
        }
        let inner = DeepONetModel::init_with_trunk_input(
            n_sensors,
            p,
            q,
            width,
            depth,
            activation,
            boundary,
            1 + boundary.lift_dim(),
            rng,
        )?;
        Ok(ContModel { inner, t0 })
    }

    fn trunk_input(&self, t: f64, x: f64) -> Vec<f64> {
        let m = &self.inner;
        let mut buf = vec![0.0; m.boundary.lift_dim()];
        m.boundary.lift(x, &mut buf);
        let mut input = Vec::with_capacity(1 + buf.len());
        input.push(t);
        input.extend_from_slice(&buf);
        input
    }

    /// `G(f)(t, x)` for `t ∈ [0, t0]`.
    pub fn eval(&self, f_sensors: &[f64], t: f64, x: f64) -> Result<f64> {
        let m = &self.inner;
        let h = m.h_matrix(f_sensors)?;
        let tr = m.trunk.forward(&self.trunk_input(t, x))?;
        Ok(m.combine(&h, &tr) * m.boundary.mask(x))
    }

    /// Snapshot of `G(f)(t, ·)` on the grid.
    pub fn eval_grid(&self, f_sensors: &[f64], t: f64, grid: &Grid) -> Result<Vec<f64>> {
        grid.xs
            .iter()
            .map(|&x| self.eval(f_sensors, t, x))
            .collect()
    }
}

/// Composite phase-space model: two operator networks blended with the
/// fixed masks so the inflow data holds identically,
///
/// ```text
/// f(x,v) = 𝒩₁(x)·A(x) + C(x) + ε·𝒩₂(x,v)·B(x,v)
/// ρ(x)   = 𝒩₁(x)·A(x) + C(x) + ε·⟨𝒩₂B⟩(x)
/// g(x,v) = 𝒩₂(x,v)·B(x,v) − ⟨𝒩₂B⟩(x)
/// ```
///
/// with `A(x) = x(1−x)`, `B` vanishing on the inflow pairs, and
/// `C` interpolating the inflow data.
#[derive(Clone, Debug)]
pub struct RteOperatorModel {
    /// Isotropic part; trunk input `x`.
    pub net1: DeepONetModel,
    /// Anisotropic part; trunk input `(x, v)`.
    pub net2: DeepONetModel,
    pub eps: f64,
    pub phi_left: f64,
    pub phi_right: f64,
}

impl RteOperatorModel {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        grid: &Grid,
        p: usize,
        q: usize,
        width: usize,
        depth: usize,
        activation: Activation,
        eps: f64,
        phi_left: f64,
        phi_right: f64,
        rng: &mut R,
    ) -> Result<RteOperatorModel> {
        let n_sensors = grid.n_points();
        let net1 = DeepONetModel::init_with_trunk_input(
            n_sensors,
            p,
            q,
            width,
            depth,
            activation,
            BoundaryMode::None,
            1,
            rng,
        )?;
        let net2 = DeepONetModel::init_with_trunk_input(
            n_sensors,
            p,
            q,
            width,
            depth,
            activation,
            BoundaryMode::None,
            2,
            rng,
        )?;
        Ok(RteOperatorModel {
            net1,
            net2,
            eps,
            phi_left,
            phi_right,
        })
    }

    /// Raw network outputs on the grid: `𝒩₁` per spatial node and
    /// `𝒩₂·B` per phase node.
    fn parts(&self, f_sensors: &[f64], grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
        let n1_pts: Vec<[f64; 2]> = grid.xs.iter().map(|&x| [x, 0.0]).collect();
        let h1 = self.net1.h_matrix(f_sensors)?;
        let t1 = self.net1.trunk_batch(&n1_pts)?;
        let mut n1 = vec![0.0; grid.n_x()];
        for (i, n) in n1.iter_mut().enumerate() {
            let t_col: Vec<f64> = (0..self.net1.p).map(|k| t1.at(k, i)).collect();
            *n = self.net1.combine(&h1, &t_col);
        }

        let pts = grid.points();
        let h2 = self.net2.h_matrix(f_sensors)?;
        let t2 = self.net2.trunk_batch(&pts)?;
        let mut n2b = vec![0.0; pts.len()];
        for (i, pt) in pts.iter().enumerate() {
            let t_col: Vec<f64> = (0..self.net2.p).map(|k| t2.at(k, i)).collect();
            n2b[i] = self.net2.combine(&h2, &t_col) * rte_mask_b(pt[0], pt[1]);
        }
        Ok((n1, n2b))
    }

    /// Full phase-space prediction `f` on the grid.
    pub fn eval_f_grid(&self, f_sensors: &[f64], grid: &Grid) -> Result<Vec<f64>> {
        let (n1, n2b) = self.parts(f_sensors, grid)?;
        let nv = grid.n_v();
        let mut f = vec![0.0; grid.n_points()];
        for (i, fv) in f.iter_mut().enumerate() {
            let ix = i / nv;
            let x = grid.xs[ix];
            *fv = n1[ix] * rte_mask_a(x)
                + rte_mask_c(x, self.phi_left, self.phi_right)
                + self.eps * n2b[i];
        }
        Ok(f)
    }

    pub fn n_params(&self) -> usize {
        self.net1.n_params() + self.net2.n_params()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.net1.write_flat(out);
        self.net2.write_flat(out);
    }

    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        self.net1.read_flat(src, pos);
        self.net2.read_flat(src, pos);
    }

    /// Micro–macro prediction `(ρ, g)` on the grid; `⟨g⟩ = 0` by
    /// construction.
    pub fn eval_rho_g(&self, f_sensors: &[f64], grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n1, n2b) = self.parts(f_sensors, grid)?;
        let nv = grid.n_v();
        // ⟨𝒩₂B⟩ per spatial node.
        let mut avg = vec![0.0; grid.n_x()];
        for (ix, a) in avg.iter_mut().enumerate() {
            *a = (0..nv)
                .map(|iv| grid.v_weights[iv] * n2b[ix * nv + iv])
                .sum::<f64>()
                / 2.0;
        }
        let rho: Vec<f64> = (0..grid.n_x())
            .map(|ix| {
                let x = grid.xs[ix];
                n1[ix] * rte_mask_a(x)
                    + rte_mask_c(x, self.phi_left, self.phi_right)
                    + self.eps * avg[ix]
            })
            .collect();
        let g: Vec<f64> = (0..grid.n_points())
            .map(|i| n2b[i] - avg[i / nv])
            .collect();
        Ok((rho, g))
    }
}
