//! Physics-informed training losses.
//!
//! The single-step loss asks the model's one-step prediction
//! `g = G(fₛ)` to satisfy the implicit scheme at a set of collocation
//! points:
//!
//! ```text
//! loss = (1/2S) Σₛ [ meanᵢ residual(g, fₛ)(xᵢ)²  (+ boundary term) ]
//! ```
//!
//! with `S` the number of distinct input functions in the evaluation,
//! the mean running over each sample's own selected points, and the
//! residual the scheme's defect (`g − Δt·L(g) − fₛ` for backward Euler,
//! its trapezoidal analogue for Crank–Nicolson). The boundary term is
//! off by default because the architectures enforce their boundary
//! conditions identically.
//!
//! The time-continuous variant replaces the one-step defect by the PDE
//! residual `∂ₜu − L(u)` on a uniform time grid over `[0, t0]`, with
//! `∂ₜ` taken as second-order finite differences in the trunk's time
//! input, plus a mean-square initial-condition fit at `t = 0`.
//!
//! The phase-space loss applies the same single-step principle to the
//! assembled transport system; inflow rows are exact by construction
//! and contribute nothing.
//!
//! Every loss comes in a value-only and a value-plus-gradient form.
//! Gradients flow through a fresh reverse-mode tape per call, with the
//! parameter layout matching each model's flattening order.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::deeponet::{BoundaryMode, ContModel, DeepONetModel, RteOperatorModel};
use crate::equation::{laplacian, rte_mask_a, rte_mask_b, rte_mask_c, Equation, Grid, RteOps};
use crate::error::{Error, Result};
use crate::sparse::Csr;
use crate::stepper::Scheme;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Setup shared by the single-step losses.
#[derive(Clone, Copy, Debug)]
pub struct StepLossSpec<'a> {
    pub eq: &'a Equation,
    pub grid: &'a Grid,
    pub dt: f64,
    pub scheme: Scheme,
    /// Add the boundary-defect mean-square (off by default: the
    /// architectures satisfy their boundary conditions identically).
    pub boundary_penalty: bool,
}

/// Map an evaluation's collocation pairs `(function index, point)` to
/// local column slots, preserving first-appearance order of functions.
struct PairLayout {
    /// Distinct global function indices in local slot order.
    fn_slots: Vec<usize>,
    /// `(point, local slot)` per pair.
    local_pairs: Vec<(usize, usize)>,
    /// Pairs per local slot.
    per_slot: Vec<usize>,
}

impl PairLayout {
    fn new(pairs: &[(usize, usize)], n_functions: usize, n_points: usize) -> PairLayout {
        assert!(!pairs.is_empty(), "loss needs at least one collocation pair");
        let mut slot_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut fn_slots = Vec::new();
        let mut local_pairs = Vec::with_capacity(pairs.len());
        for &(f, p) in pairs {
            assert!(f < n_functions, "function index {f} out of range");
            assert!(p < n_points, "collocation point {p} out of range");
            let s = *slot_of.entry(f).or_insert_with(|| {
                fn_slots.push(f);
                fn_slots.len() - 1
            });
            local_pairs.push((p, s));
        }
        let mut per_slot = vec![0usize; fn_slots.len()];
        for &(_, s) in &local_pairs {
            per_slot[s] += 1;
        }
        PairLayout {
            fn_slots,
            local_pairs,
            per_slot,
        }
    }

    fn n_slots(&self) -> usize {
        self.fn_slots.len()
    }

    /// Per-pair weights realizing `(1/2S)Σₛ meanᵢ(·)`.
    fn weights(&self) -> Vec<f64> {
        let s = self.n_slots() as f64;
        self.local_pairs
            .iter()
            .map(|&(_, slot)| 1.0 / (2.0 * s * self.per_slot[slot] as f64))
            .collect()
    }

    /// Input functions packed as tape-leaf columns `[n_points × S]`.
    fn input_matrix(&self, inputs: &[Vec<f64>], n_points: usize) -> Tensor {
        let s = self.n_slots();
        let mut x = Tensor::zeros(n_points, s);
        for (slot, &f) in self.fn_slots.iter().enumerate() {
            assert_eq!(inputs[f].len(), n_points, "input function length mismatch");
            for (r, &v) in inputs[f].iter().enumerate() {
                *x.at_mut(r, slot) = v;
            }
        }
        x
    }
}

/// Branch → per-function feature·w columns → `[p × S]`.
fn branch_combine(
    tape: &mut Tape,
    branch: &crate::mlp::MLPNodes,
    x_id: NodeId,
    w_id: NodeId,
    p: usize,
    q: usize,
    n_slots: usize,
) -> Result<NodeId> {
    let flat = branch.forward(tape, x_id)?; // [p·q × S]
    let mut cols = Vec::with_capacity(n_slots);
    for s in 0..n_slots {
        let c = tape.col(flat, s);
        let h = tape.reshape(c, p, q);
        cols.push(tape.matmul(h, w_id)); // [p × 1]
    }
    Ok(tape.hstack_cols(&cols))
}

/// Trunk features over a set of already-lifted inputs `[d × n]`.
fn trunk_over(
    tape: &mut Tape,
    trunk: &crate::mlp::MLPNodes,
    lifted: Tensor,
) -> Result<NodeId> {
    let x_id = tape.leaf(lifted);
    trunk.forward(tape, x_id)
}

fn lifted_grid_inputs(boundary: BoundaryMode, grid: &Grid) -> Tensor {
    let mut x = Tensor::zeros(boundary.lift_dim(), grid.n_x());
    let mut buf = [0.0; 2];
    for (c, &xv) in grid.xs.iter().enumerate() {
        boundary.lift(xv, &mut buf[..boundary.lift_dim()]);
        for r in 0..boundary.lift_dim() {
            *x.at_mut(r, c) = buf[r];
        }
    }
    x
}

/// Spatial operator `L(G)` as tape ops on a grid-values matrix.
fn spatial_on_tape(tape: &mut Tape, eq: &Equation, lap: &Rc<Csr>, g: NodeId) -> NodeId {
    match *eq {
        Equation::ReactionDiffusion1d { d, k } => {
            let lg = tape.spmm(Rc::clone(lap), g);
            let diff = tape.scale(lg, d);
            if k == 0.0 {
                diff
            } else {
                // G vanishes on the masked boundary rows, so G² does too.
                let g2 = tape.square(g);
                let reac = tape.scale(g2, k);
                tape.add(diff, reac)
            }
        }
        Equation::AllenCahn1d { d1, d2 } => {
            let lg = tape.spmm(Rc::clone(lap), g);
            let diff = tape.scale(lg, d1);
            if d2 == 0.0 {
                diff
            } else {
                let g2 = tape.square(g);
                let g3 = tape.hadamard(g2, g);
                let lin = tape.sub(g, g3);
                let reac = tape.scale(lin, d2);
                tape.add(diff, reac)
            }
        }
        Equation::CahnHilliard1d { d1, d2 } => {
            let lg = tape.spmm(Rc::clone(lap), g);
            let inner = if d2 == 0.0 {
                tape.scale(lg, -d1)
            } else {
                let g2 = tape.square(g);
                let g3 = tape.hadamard(g2, g);
                let well = tape.sub(g3, g);
                let a = tape.scale(lg, -d1);
                let b = tape.scale(well, d2);
                tape.add(a, b)
            };
            tape.spmm(Rc::clone(lap), inner)
        }
        Equation::Rte1d { .. } => unreachable!("phase-space loss has its own assembly"),
    }
}

fn scan_residual_finite(tape: &Tape, r: NodeId, layout: &PairLayout) -> Result<()> {
    let v = tape.value(r);
    for slot in 0..v.cols {
        for row in 0..v.rows {
            if !v.at(row, slot).is_finite() {
                return Err(Error::NonFinite(format!(
                    "residual for sample {} (grid point {row})",
                    layout.fn_slots[slot]
                )));
            }
        }
    }
    Ok(())
}

/// Weighted sum of squared gathered entries.
fn weighted_square_sum(
    tape: &mut Tape,
    matrix: NodeId,
    entries: Vec<(usize, usize)>,
    weights: Vec<f64>,
) -> NodeId {
    assert_eq!(entries.len(), weights.len());
    let n = entries.len();
    let picked = tape.gather(matrix, Rc::new(entries));
    let squared = tape.square(picked);
    let w_leaf = tape.leaf(Tensor::from_vec(n, 1, weights));
    let weighted = tape.hadamard(squared, w_leaf);
    tape.sum(weighted)
}

/// Build the single-step loss graph; returns the tape and loss node.
fn step_loss_tape(
    model: &DeepONetModel,
    spec: &StepLossSpec,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<(Tape, NodeId)> {
    let eq = spec.eq;
    let grid = spec.grid;
    eq.validate(grid)?;
    if matches!(eq, Equation::Rte1d { .. }) {
        return Err(Error::Config(
            "use the phase-space loss for the kinetic kind".into(),
        ));
    }
    let expected = BoundaryMode::from_boundary(eq.boundary());
    if model.boundary != expected {
        return Err(Error::Config(format!(
            "model boundary mode {:?} does not match the equation's {:?}",
            model.boundary, expected
        )));
    }
    if model.n_sensors != grid.n_x() {
        return Err(Error::Config(format!(
            "model expects {} sensors, grid has {}",
            model.n_sensors,
            grid.n_x()
        )));
    }
    if spec.boundary_penalty && model.boundary != BoundaryMode::DirichletMask {
        return Err(Error::Config(
            "the boundary penalty is only defined for Dirichlet-mask models".into(),
        ));
    }

    let layout = PairLayout::new(pairs, inputs.len(), grid.n_x());
    let s_count = layout.n_slots();

    let mut tape = Tape::new();
    // Registration must mirror the model's flattening order.
    let branch_nodes = model.branch.register(&mut tape);
    let trunk_nodes = model.trunk.register(&mut tape);
    let w_id = tape.param(Tensor::from_vec(model.q, 1, model.w.clone()));

    let f_mat = layout.input_matrix(inputs, grid.n_x());
    let f_id = tape.leaf(f_mat.clone());
    let x_b = tape.leaf(f_mat);
    let hw = branch_combine(&mut tape, &branch_nodes, x_b, w_id, model.p, model.q, s_count)?;
    let t = trunk_over(&mut tape, &trunk_nodes, lifted_grid_inputs(model.boundary, grid))?;
    let tt = tape.transpose(t);
    let g_raw = tape.matmul(tt, hw); // [N_x × S]
    let g = if model.boundary == BoundaryMode::DirichletMask {
        let mask: Vec<f64> = grid.xs.iter().map(|&x| x * (1.0 - x)).collect();
        let m_id = tape.leaf(Tensor::from_vec(grid.n_x(), 1, mask));
        tape.hadamard_col_bcast(g_raw, m_id)
    } else {
        g_raw
    };

    let lap = Rc::new(laplacian(eq, grid));
    let lg = spatial_on_tape(&mut tape, eq, &lap, g);
    let gamma = spec.scheme.gamma(spec.dt);
    let lg_scaled = tape.scale(lg, gamma);
    let g_implicit = tape.sub(g, lg_scaled);
    let r = match spec.scheme {
        Scheme::BackwardEuler => tape.sub(g_implicit, f_id),
        Scheme::CrankNicolson => {
            // Constant side: fₛ + (Δt/2)·L(fₛ), computed outside the tape.
            let mut c = Tensor::zeros(grid.n_x(), s_count);
            for (slot, &fidx) in layout.fn_slots.iter().enumerate() {
                let lf = crate::equation::apply_spatial(eq, grid, &inputs[fidx]);
                for i in 0..grid.n_x() {
                    *c.at_mut(i, slot) = inputs[fidx][i] + 0.5 * spec.dt * lf[i];
                }
            }
            let c_id = tape.leaf(c);
            tape.sub(g_implicit, c_id)
        }
    };
    scan_residual_finite(&tape, r, &layout)?;

    let mut loss = weighted_square_sum(
        &mut tape,
        r,
        layout.local_pairs.clone(),
        layout.weights(),
    );

    if spec.boundary_penalty {
        // Mean-square boundary defect per sample (identically zero for
        // the masked architecture; kept for the ablation switch).
        let n = grid.n_x();
        let mut entries = Vec::with_capacity(2 * s_count);
        let mut weights = Vec::with_capacity(2 * s_count);
        for slot in 0..s_count {
            entries.push((0, slot));
            entries.push((n - 1, slot));
            let w = 1.0 / (2.0 * s_count as f64 * 2.0);
            weights.push(w);
            weights.push(w);
        }
        let pen = weighted_square_sum(&mut tape, g, entries, weights);
        loss = tape.add(loss, pen);
    }
    Ok((tape, loss))
}

/// Single-step physics-informed loss value.
pub fn pi_loss(
    model: &DeepONetModel,
    spec: &StepLossSpec,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let (tape, loss) = step_loss_tape(model, spec, inputs, pairs)?;
    Ok(tape.scalar(loss))
}

/// Single-step loss with gradients in the model's flattening order.
pub fn pi_loss_grad(
    model: &DeepONetModel,
    spec: &StepLossSpec,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<(f64, Vec<f64>)> {
    let (tape, loss) = step_loss_tape(model, spec, inputs, pairs)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads))
}

/// Build the phase-space single-step loss graph.
fn rte_loss_tape(
    model: &RteOperatorModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<(Tape, NodeId)> {
    let Equation::Rte1d {
        eps,
        phi_left,
        phi_right,
    } = *eq
    else {
        return Err(Error::Config("phase-space loss needs the kinetic kind".into()));
    };
    eq.validate(grid)?;
    if (model.eps - eps).abs() > 0.0 || model.phi_left != phi_left || model.phi_right != phi_right
    {
        return Err(Error::Config(
            "model scaling/inflow data disagree with the equation".into(),
        ));
    }
    let n = grid.n_points();
    if model.net1.n_sensors != n || model.net2.n_sensors != n {
        return Err(Error::Config(format!(
            "model expects {} sensors, phase grid has {n}",
            model.net1.n_sensors
        )));
    }
    let ops = RteOps::new(eq, grid)?;
    let layout = PairLayout::new(pairs, inputs.len(), n);
    let s_count = layout.n_slots();

    let mut tape = Tape::new();
    let b1 = model.net1.branch.register(&mut tape);
    let t1 = model.net1.trunk.register(&mut tape);
    let w1 = tape.param(Tensor::from_vec(model.net1.q, 1, model.net1.w.clone()));
    let b2 = model.net2.branch.register(&mut tape);
    let t2 = model.net2.trunk.register(&mut tape);
    let w2 = tape.param(Tensor::from_vec(model.net2.q, 1, model.net2.w.clone()));

    let f_mat = layout.input_matrix(inputs, n);
    let f_id = tape.leaf(f_mat.clone());
    let x_b = tape.leaf(f_mat);

    // 𝒩₁ on the spatial nodes, masked by A.
    let hw1 = branch_combine(&mut tape, &b1, x_b, w1, model.net1.p, model.net1.q, s_count)?;
    let mut x1 = Tensor::zeros(1, grid.n_x());
    for (c, &xv) in grid.xs.iter().enumerate() {
        *x1.at_mut(0, c) = xv;
    }
    let tr1 = trunk_over(&mut tape, &t1, x1)?;
    let tr1t = tape.transpose(tr1);
    let n1 = tape.matmul(tr1t, hw1); // [N_x × S]
    let a_vec: Vec<f64> = grid.xs.iter().map(|&x| rte_mask_a(x)).collect();
    let a_id = tape.leaf(Tensor::from_vec(grid.n_x(), 1, a_vec));
    let n1a = tape.hadamard_col_bcast(n1, a_id);

    // 𝒩₂ on the phase nodes, masked by B.
    let hw2 = branch_combine(&mut tape, &b2, x_b, w2, model.net2.p, model.net2.q, s_count)?;
    let pts = grid.points();
    let mut x2 = Tensor::zeros(2, n);
    for (c, pt) in pts.iter().enumerate() {
        *x2.at_mut(0, c) = pt[0];
        *x2.at_mut(1, c) = pt[1];
    }
    let tr2 = trunk_over(&mut tape, &t2, x2)?;
    let tr2t = tape.transpose(tr2);
    let n2 = tape.matmul(tr2t, hw2); // [N × S]
    let b_vec: Vec<f64> = pts.iter().map(|p| rte_mask_b(p[0], p[1])).collect();
    let b_id = tape.leaf(Tensor::from_vec(n, 1, b_vec));
    let n2b = tape.hadamard_col_bcast(n2, b_id);

    // f = lift(𝒩₁A) + C + ε·𝒩₂B
    let lifted = tape.spmm(Rc::clone(&ops.lift), n1a);
    let scaled = tape.scale(n2b, eps);
    let partial = tape.add(lifted, scaled);
    let c_vec: Vec<f64> = pts
        .iter()
        .map(|p| rte_mask_c(p[0], phi_left, phi_right))
        .collect();
    let c_id = tape.leaf(Tensor::from_vec(n, 1, c_vec));
    let f_pred = tape.add_col_bcast(partial, c_id);

    // Assembled-system defect, scaled by ε²/Δt like the solver matrix:
    // (ε²/Δt + 1)f + ε·v∂ₓf − ⟨f⟩ − (ε²/Δt)fₙ; inflow rows hold
    // identically (masks) and are skipped below.
    let c0 = eps * eps / dt;
    let term_id = tape.scale(f_pred, c0 + 1.0);
    let vdxf = tape.spmm(Rc::clone(&ops.vdx), f_pred);
    let vdxf_s = tape.scale(vdxf, eps);
    let avg_f = tape.spmm(Rc::clone(&ops.avg), f_pred);
    let lift_avg = tape.spmm(Rc::clone(&ops.lift), avg_f);
    let sum1 = tape.add(term_id, vdxf_s);
    let sum2 = tape.sub(sum1, lift_avg);
    let f_scaled = tape.scale(f_id, c0);
    let r = tape.sub(sum2, f_scaled);
    scan_residual_finite(&tape, r, &layout)?;

    // Keep each sample's mean over its full point selection; inflow
    // points contribute exactly zero, so they are simply not gathered.
    let inflow: std::collections::HashSet<usize> = ops.inflow.iter().copied().collect();
    let weights_all = layout.weights();
    let mut entries = Vec::new();
    let mut weights = Vec::new();
    for (k, &(pt, slot)) in layout.local_pairs.iter().enumerate() {
        if !inflow.contains(&pt) {
            entries.push((pt, slot));
            weights.push(weights_all[k]);
        }
    }
    if entries.is_empty() {
        return Err(Error::Config(
            "all collocation points fell on inflow rows; nothing to fit".into(),
        ));
    }
    let loss = weighted_square_sum(&mut tape, r, entries, weights);
    Ok((tape, loss))
}

/// Phase-space single-step loss value.
pub fn rte_loss(
    model: &RteOperatorModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let (tape, loss) = rte_loss_tape(model, eq, grid, dt, inputs, pairs)?;
    Ok(tape.scalar(loss))
}

/// Phase-space loss with gradients (net1 then net2 flattening order).
pub fn rte_loss_grad(
    model: &RteOperatorModel,
    eq: &Equation,
    grid: &Grid,
    dt: f64,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<(f64, Vec<f64>)> {
    let (tape, loss) = rte_loss_tape(model, eq, grid, dt, inputs, pairs)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads))
}

/// Second-order time-difference matrix on the stacked `(time, space)`
/// layout: central differences inside, one-sided at both ends.
fn time_difference(n_nodes: usize, n_x: usize, dtau: f64) -> Csr {
    assert!(n_nodes >= 3, "need at least 3 time nodes");
    let n = n_nodes * n_x;
    let c = 1.0 / (2.0 * dtau);
    let mut tri = Vec::with_capacity(3 * n);
    for j in 0..n_x {
        let at = |i: usize| i * n_x + j;
        tri.push((at(0), at(0), -3.0 * c));
        tri.push((at(0), at(1), 4.0 * c));
        tri.push((at(0), at(2), -c));
        for i in 1..n_nodes - 1 {
            tri.push((at(i), at(i - 1), -c));
            tri.push((at(i), at(i + 1), c));
        }
        let last = n_nodes - 1;
        tri.push((at(last), at(last), 3.0 * c));
        tri.push((at(last), at(last - 1), -4.0 * c));
        tri.push((at(last), at(last - 2), c));
    }
    Csr::from_triplets(n, n, &tri)
}

/// Block-diagonal copy of a spatial stencil over the time nodes.
fn block_diag(lap: &Csr, n_nodes: usize) -> Csr {
    let n_x = lap.rows;
    let n = n_nodes * n_x;
    let mut tri = Vec::new();
    for b in 0..n_nodes {
        for r in 0..n_x {
            for (c, v) in lap.row(r) {
                tri.push((b * n_x + r, b * n_x + c, v));
            }
        }
    }
    Csr::from_triplets(n, n, &tri)
}

/// Build the time-continuous loss graph (reaction–diffusion only).
fn cont_loss_tape(
    model: &ContModel,
    eq: &Equation,
    grid: &Grid,
    n_time_nodes: usize,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<(Tape, NodeId)> {
    let Equation::ReactionDiffusion1d { d, k } = *eq else {
        return Err(Error::Config(
            "the time-continuous loss is wired for the reaction–diffusion kind".into(),
        ));
    };
    eq.validate(grid)?;
    if n_time_nodes < 3 {
        return Err(Error::Config("need at least 3 time nodes".into()));
    }
    let inner = &model.inner;
    if inner.boundary != BoundaryMode::DirichletMask {
        return Err(Error::Config(
            "time-continuous models use the Dirichlet mask here".into(),
        ));
    }
    let n_x = grid.n_x();
    if inner.n_sensors != n_x {
        return Err(Error::Config(format!(
            "model expects {} sensors, grid has {n_x}",
            inner.n_sensors
        )));
    }
    let layout = PairLayout::new(pairs, inputs.len(), n_x);
    let s_count = layout.n_slots();
    let dtau = model.t0 / (n_time_nodes - 1) as f64;

    let mut tape = Tape::new();
    let branch_nodes = inner.branch.register(&mut tape);
    let trunk_nodes = inner.trunk.register(&mut tape);
    let w_id = tape.param(Tensor::from_vec(inner.q, 1, inner.w.clone()));

    let f_mat = layout.input_matrix(inputs, n_x);
    let x_b = tape.leaf(f_mat.clone());
    let hw = branch_combine(&mut tape, &branch_nodes, x_b, w_id, inner.p, inner.q, s_count)?;

    // Trunk over the (t, x) tensor grid, time-major.
    let total = n_time_nodes * n_x;
    let mut xt = Tensor::zeros(2, total);
    for i in 0..n_time_nodes {
        for (j, &x) in grid.xs.iter().enumerate() {
            *xt.at_mut(0, i * n_x + j) = i as f64 * dtau;
            *xt.at_mut(1, i * n_x + j) = x;
        }
    }
    let t = trunk_over(&mut tape, &trunk_nodes, xt)?;
    let tt = tape.transpose(t);
    let u_raw = tape.matmul(tt, hw); // [n_t·N_x × S]
    let mask: Vec<f64> = (0..total)
        .map(|idx| {
            let x = grid.xs[idx % n_x];
            x * (1.0 - x)
        })
        .collect();
    let m_id = tape.leaf(Tensor::from_vec(total, 1, mask));
    let u = tape.hadamard_col_bcast(u_raw, m_id);

    // R = ∂ₜu − d·Δu − k·u² on the space-time stack.
    let dt_mat = Rc::new(time_difference(n_time_nodes, n_x, dtau));
    let lap_blocks = Rc::new(block_diag(&laplacian(eq, grid), n_time_nodes));
    let dudt = tape.spmm(dt_mat, u);
    let lu = tape.spmm(lap_blocks, u);
    let lu_s = tape.scale(lu, d);
    let lin = tape.sub(dudt, lu_s);
    let r = if k == 0.0 {
        lin
    } else {
        let u2 = tape.square(u);
        let reac = tape.scale(u2, k);
        tape.sub(lin, reac)
    };
    scan_residual_finite(&tape, r, &layout)?;

    // PDE term: each sample's collocation points at every time node.
    let s_f = s_count as f64;
    let mut entries = Vec::with_capacity(layout.local_pairs.len() * n_time_nodes);
    let mut weights = Vec::with_capacity(entries.capacity());
    for (kp, &(pt, slot)) in layout.local_pairs.iter().enumerate() {
        let _ = kp;
        let w = 1.0
            / (2.0 * s_f * (layout.per_slot[slot] * n_time_nodes) as f64);
        for i in 0..n_time_nodes {
            entries.push((i * n_x + pt, slot));
            weights.push(w);
        }
    }
    let pde_term = weighted_square_sum(&mut tape, r, entries, weights);

    // Initial-condition term: mean-square of u(0,·) − fₛ over all sensors.
    let mut ic_entries = Vec::with_capacity(s_count * n_x);
    for slot in 0..s_count {
        for j in 0..n_x {
            ic_entries.push((j, slot));
        }
    }
    let u0 = tape.gather(u, Rc::new(ic_entries));
    let mut f0 = Vec::with_capacity(s_count * n_x);
    for slot in 0..s_count {
        f0.extend_from_slice(&inputs[layout.fn_slots[slot]]);
    }
    let f0_id = tape.leaf(Tensor::from_vec(s_count * n_x, 1, f0));
    let diff = tape.sub(u0, f0_id);
    let sq = tape.square(diff);
    let wt = vec![1.0 / (2.0 * s_f * n_x as f64); s_count * n_x];
    let wt_id = tape.leaf(Tensor::from_vec(s_count * n_x, 1, wt));
    let weighted = tape.hadamard(sq, wt_id);
    let ic_term = tape.sum(weighted);

    let loss = tape.add(pde_term, ic_term);
    Ok((tape, loss))
}

/// Time-continuous loss value.
pub fn cont_loss(
    model: &ContModel,
    eq: &Equation,
    grid: &Grid,
    n_time_nodes: usize,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let (tape, loss) = cont_loss_tape(model, eq, grid, n_time_nodes, inputs, pairs)?;
    Ok(tape.scalar(loss))
}

/// Time-continuous loss with gradients.
pub fn cont_loss_grad(
    model: &ContModel,
    eq: &Equation,
    grid: &Grid,
    n_time_nodes: usize,
    inputs: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<(f64, Vec<f64>)> {
    let (tape, loss) = cont_loss_tape(model, eq, grid, n_time_nodes, inputs, pairs)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deeponet::{BoundaryMode, DeepONetModel};
    use crate::equation::apply_spatial;
    use crate::mlp::Activation;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Straight-line recomputation of the single-step loss through the
    /// pure (non-tape) model evaluation path.
    fn scripted_step_loss(
        model: &DeepONetModel,
        spec: &StepLossSpec,
        inputs: &[Vec<f64>],
        pairs: &[(usize, usize)],
    ) -> f64 {
        use std::collections::BTreeMap;
        let mut by_fn: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(f, p) in pairs {
            by_fn.entry(f).or_default().push(p);
        }
        let s = by_fn.len() as f64;
        let gamma = spec.scheme.gamma(spec.dt);
        let mut total = 0.0;
        for (f, pts) in by_fn {
            let g = model.eval_grid(&inputs[f], spec.grid).unwrap();
            let lg = apply_spatial(spec.eq, spec.grid, &g);
            let lf = apply_spatial(spec.eq, spec.grid, &inputs[f]);
            let mut acc = 0.0;
            for &p in &pts {
                let mut r = g[p] - gamma * lg[p] - inputs[f][p];
                if spec.scheme == Scheme::CrankNicolson {
                    r -= gamma * lf[p];
                }
                acc += r * r;
            }
            total += acc / pts.len() as f64;
        }
        total / (2.0 * s)
    }

    fn rd_setup() -> (Equation, Grid, DeepONetModel, Vec<Vec<f64>>) {
        let eq = Equation::rd(0.05, 0.8);
        let grid = Grid::dirichlet(17);
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let model = DeepONetModel::init(
            17,
            6,
            4,
            8,
            3,
            Activation::Tanh,
            BoundaryMode::DirichletMask,
            &mut rng,
        )
        .unwrap();
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|s| {
                grid.xs
                    .iter()
                    .map(|&x| (1.0 + s as f64) * x * (1.0 - x) * (3.0 * x + s as f64).sin())
                    .collect()
            })
            .collect();
        (eq, grid, model, inputs)
    }

    #[test]
    fn step_loss_matches_scripted_recomputation() {
        let (eq, grid, model, inputs) = rd_setup();
        let pairs: Vec<(usize, usize)> =
            vec![(0, 3), (0, 8), (0, 12), (1, 1), (1, 15), (2, 7), (2, 7), (2, 2)];
        for scheme in [Scheme::BackwardEuler, Scheme::CrankNicolson] {
            let spec = StepLossSpec {
                eq: &eq,
                grid: &grid,
                dt: 0.05,
                scheme,
                boundary_penalty: false,
            };
            let fast = pi_loss(&model, &spec, &inputs, &pairs).unwrap();
            let slow = scripted_step_loss(&model, &spec, &inputs, &pairs);
            assert!(
                (fast - slow).abs() <= 1e-13 * slow.max(1.0),
                "{scheme:?}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn zero_model_on_zero_data_gives_zero_loss() {
        let (eq, grid, model, _) = rd_setup();
        let model = model.with_weights(vec![0.0; 4]).unwrap();
        let inputs = vec![vec![0.0; 17]];
        let pairs = vec![(0, 4), (0, 9)];
        let spec = StepLossSpec {
            eq: &eq,
            grid: &grid,
            dt: 0.05,
            scheme: Scheme::BackwardEuler,
            boundary_penalty: false,
        };
        assert_eq!(pi_loss(&model, &spec, &inputs, &pairs).unwrap(), 0.0);
    }

    #[test]
    fn boundary_penalty_is_zero_for_masked_models_and_rejected_elsewhere() {
        let (eq, grid, model, inputs) = rd_setup();
        let pairs = vec![(0, 4), (1, 9)];
        let with = StepLossSpec {
            eq: &eq,
            grid: &grid,
            dt: 0.05,
            scheme: Scheme::BackwardEuler,
            boundary_penalty: true,
        };
        let without = StepLossSpec {
            boundary_penalty: false,
            ..with
        };
        let a = pi_loss(&model, &with, &inputs, &pairs).unwrap();
        let b = pi_loss(&model, &without, &inputs, &pairs).unwrap();
        assert_eq!(a, b, "mask makes the penalty exactly zero");

        // Periodic models reject the penalty flag.
        let eq2 = Equation::ac(0.01, 0.5);
        let grid2 = Grid::periodic(16);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let m2 = DeepONetModel::init(
            16,
            6,
            4,
            8,
            3,
            Activation::Tanh,
            BoundaryMode::PeriodicLift,
            &mut rng,
        )
        .unwrap();
        let spec2 = StepLossSpec {
            eq: &eq2,
            grid: &grid2,
            dt: 0.05,
            scheme: Scheme::BackwardEuler,
            boundary_penalty: true,
        };
        let inputs2 = vec![vec![0.1; 16]];
        assert!(pi_loss(&m2, &spec2, &inputs2, &[(0, 3)]).is_err());
    }

    #[test]
    fn step_loss_gradient_matches_finite_differences() {
        let (eq, grid, mut model, inputs) = rd_setup();
        let pairs = vec![(0, 3), (1, 8), (2, 12), (2, 5)];
        let spec = StepLossSpec {
            eq: &eq,
            grid: &grid,
            dt: 0.05,
            scheme: Scheme::CrankNicolson,
            boundary_penalty: false,
        };
        let (_, grads) = pi_loss_grad(&model, &spec, &inputs, &pairs).unwrap();
        assert_eq!(grads.len(), model.n_params());

        let mut flat = Vec::new();
        model.write_flat(&mut flat);
        let h = 1e-6;
        let g_inf = grads.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        // Spot-check a spread of parameters.
        let n = flat.len();
        for &i in &[0usize, n / 5, n / 2, 3 * n / 4, n - 1, n - 4] {
            let mut plus = flat.clone();
            plus[i] += h;
            model.read_flat(&plus, &mut 0);
            let lp = pi_loss(&model, &spec, &inputs, &pairs).unwrap();
            let mut minus = flat.clone();
            minus[i] -= h;
            model.read_flat(&minus, &mut 0);
            let lm = pi_loss(&model, &spec, &inputs, &pairs).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grads[i] - fd).abs() <= 1e-6 * g_inf.max(1e-12),
                "param {i}: tape {} vs fd {fd}",
                grads[i]
            );
        }
        model.read_flat(&flat, &mut 0);
    }

    #[test]
    fn allen_cahn_and_fourth_order_losses_match_scripted_values() {
        let grid = Grid::periodic(20);
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let model = DeepONetModel::init(
            20,
            5,
            3,
            8,
            3,
            Activation::Tanh,
            BoundaryMode::PeriodicLift,
            &mut rng,
        )
        .unwrap();
        let inputs: Vec<Vec<f64>> = (0..2)
            .map(|s| {
                grid.xs
                    .iter()
                    .map(|&x| 0.4 * (2.0 * std::f64::consts::PI * x + s as f64).sin())
                    .collect()
            })
            .collect();
        let pairs = vec![(0, 2), (0, 11), (1, 7), (1, 19)];
        for eq in [Equation::ac(0.02, 0.9), Equation::ch(1e-3, 0.6)] {
            let spec = StepLossSpec {
                eq: &eq,
                grid: &grid,
                dt: 0.02,
                scheme: Scheme::BackwardEuler,
                boundary_penalty: false,
            };
            let fast = pi_loss(&model, &spec, &inputs, &pairs).unwrap();
            let slow = scripted_step_loss(&model, &spec, &inputs, &pairs);
            assert!(
                (fast - slow).abs() <= 1e-13 * slow.max(1.0),
                "{}: {fast} vs {slow}",
                eq.kind_name()
            );
        }
    }

    #[test]
    fn phase_space_loss_matches_scripted_recomputation_and_fd() {
        let eq = Equation::rte(0.5);
        let grid = Grid::phase(7, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let mut model = RteOperatorModel::init(
            &grid,
            4,
            3,
            6,
            3,
            Activation::Tanh,
            0.5,
            1.0,
            0.5,
            &mut rng,
        )
        .unwrap();
        let n = grid.n_points();
        let inputs: Vec<Vec<f64>> = (0..2)
            .map(|s| (0..n).map(|i| 0.8 + 0.01 * (i + s) as f64).collect())
            .collect();
        let pairs: Vec<(usize, usize)> = vec![(0, 5), (0, 13), (1, 9), (1, 20), (1, 0)];
        let dt = 0.1;
        let fast = rte_loss(&model, &eq, &grid, dt, &inputs, &pairs).unwrap();

        // Scripted: solver-defect recomputation through the pure path.
        let stepper =
            crate::stepper::RefStepper::new(eq, grid.clone(), dt, Scheme::BackwardEuler).unwrap();
        let mut slow = 0.0;
        for (s, input) in inputs.iter().enumerate() {
            let g = model.eval_f_grid(input, &grid).unwrap();
            let res = stepper.residual(&g, input);
            let pts: Vec<usize> = pairs.iter().filter(|&&(f, _)| f == s).map(|&(_, p)| p).collect();
            let acc: f64 = pts.iter().map(|&p| res[p] * res[p]).sum();
            slow += acc / pts.len() as f64;
        }
        slow /= 2.0 * inputs.len() as f64;
        assert!(
            (fast - slow).abs() <= 1e-12 * slow.max(1.0),
            "{fast} vs {slow}"
        );

        // Gradient spot-check.
        let (_, grads) = rte_loss_grad(&model, &eq, &grid, dt, &inputs, &pairs).unwrap();
        assert_eq!(grads.len(), model.n_params());
        let mut flat = Vec::new();
        model.write_flat(&mut flat);
        let g_inf = grads.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        let h = 1e-6;
        let npar = flat.len();
        for &i in &[0usize, npar / 3, npar / 2, npar - 2] {
            let mut plus = flat.clone();
            plus[i] += h;
            model.read_flat(&plus, &mut 0);
            let lp = rte_loss(&model, &eq, &grid, dt, &inputs, &pairs).unwrap();
            let mut minus = flat.clone();
            minus[i] -= h;
            model.read_flat(&minus, &mut 0);
            let lm = rte_loss(&model, &eq, &grid, dt, &inputs, &pairs).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grads[i] - fd).abs() <= 2e-6 * g_inf.max(1e-12),
                "param {i}: tape {} vs fd {fd}",
                grads[i]
            );
        }
        model.read_flat(&flat, &mut 0);
    }

    #[test]
    fn continuous_loss_matches_scripted_recomputation() {
        let eq = Equation::rd(0.03, 0.5);
        let grid = Grid::dirichlet(13);
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let model = ContModel::init(
            13,
            5,
            3,
            8,
            3,
            Activation::Tanh,
            BoundaryMode::DirichletMask,
            1.0,
            &mut rng,
        )
        .unwrap();
        let inputs: Vec<Vec<f64>> = (0..2)
            .map(|s| {
                grid.xs
                    .iter()
                    .map(|&x| (0.5 + s as f64) * x * (1.0 - x))
                    .collect()
            })
            .collect();
        let pairs = vec![(0, 3), (0, 9), (1, 6)];
        let n_nodes = 5;
        let fast = cont_loss(&model, &eq, &grid, n_nodes, &inputs, &pairs).unwrap();

        // Scripted recomputation with explicit finite differences.
        let dtau = model.t0 / (n_nodes - 1) as f64;
        let mut u = vec![Vec::new(); inputs.len()];
        for (s, input) in inputs.iter().enumerate() {
            for i in 0..n_nodes {
                u[s].push(model.eval_grid(input, i as f64 * dtau, &grid).unwrap());
            }
        }
        let mut slow = 0.0;
        let s_count = inputs.len() as f64;
        for (s, input) in inputs.iter().enumerate() {
            let pts: Vec<usize> = pairs.iter().filter(|&&(f, _)| f == s).map(|&(_, p)| p).collect();
            let mut acc = 0.0;
            for i in 0..n_nodes {
                let lu = apply_spatial(&eq, &grid, &u[s][i]);
                for &p in &pts {
                    let dudt = if i == 0 {
                        (-3.0 * u[s][0][p] + 4.0 * u[s][1][p] - u[s][2][p]) / (2.0 * dtau)
                    } else if i == n_nodes - 1 {
                        (3.0 * u[s][i][p] - 4.0 * u[s][i - 1][p] + u[s][i - 2][p]) / (2.0 * dtau)
                    } else {
                        (u[s][i + 1][p] - u[s][i - 1][p]) / (2.0 * dtau)
                    };
                    let r = dudt - lu[p];
                    acc += r * r;
                }
            }
            let mut ic = 0.0;
            for j in 0..grid.n_x() {
                let d = u[s][0][j] - input[j];
                ic += d * d;
            }
            slow += acc / (pts.len() * n_nodes) as f64 + ic / grid.n_x() as f64;
        }
        slow /= 2.0 * s_count;
        assert!(
            (fast - slow).abs() <= 1e-13 * slow.max(1.0),
            "{fast} vs {slow}"
        );
    }

    #[test]
    fn continuous_loss_gradient_matches_finite_differences() {
        let eq = Equation::rd(0.03, 0.5);
        let grid = Grid::dirichlet(9);
        let mut rng = ChaCha20Rng::seed_from_u64(56);
        let mut model = ContModel::init(
            9,
            4,
            3,
            6,
            3,
            Activation::Tanh,
            BoundaryMode::DirichletMask,
            1.0,
            &mut rng,
        )
        .unwrap();
        let inputs = vec![grid
            .xs
            .iter()
            .map(|&x| x * (1.0 - x) * 1.3)
            .collect::<Vec<f64>>()];
        let pairs = vec![(0, 2), (0, 6)];
        let (_, grads) = cont_loss_grad(&model, &eq, &grid, 5, &inputs, &pairs).unwrap();
        let mut flat = Vec::new();
        model.inner.write_flat(&mut flat);
        let g_inf = grads.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        let h = 1e-6;
        for &i in &[0usize, flat.len() / 2, flat.len() - 1] {
            let mut plus = flat.clone();
            plus[i] += h;
            model.inner.read_flat(&plus, &mut 0);
            let lp = cont_loss(&model, &eq, &grid, 5, &inputs, &pairs).unwrap();
            let mut minus = flat.clone();
            minus[i] -= h;
            model.inner.read_flat(&minus, &mut 0);
            let lm = cont_loss(&model, &eq, &grid, 5, &inputs, &pairs).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grads[i] - fd).abs() <= 1e-6 * g_inf.max(1e-12),
                "param {i}: tape {} vs fd {fd}"
            ,
                grads[i]
            );
        }
        model.inner.read_flat(&flat, &mut 0);
    }

    #[test]
    fn diffusion_mode_injected_solution_has_small_continuous_residual() {
        // u(t,x) = e^{d·λ_h·t}·sin(πx)… checked through the scripted
        // pieces: the discrete-λ eigenmode of the Dirichlet Laplacian
        // makes ∂ₜu − d·Δu vanish up to the time-difference error O(Δτ²).
        let d = 0.4;
        let grid = Grid::dirichlet(33);
        let eq = Equation::rd(d, 0.0);
        let lap = laplacian(&eq, &grid);
        let mode: Vec<f64> = grid.xs.iter().map(|&x| (std::f64::consts::PI * x).sin()).collect();
        // Discrete eigenvalue of the interior stencil for sin(πx).
        let h = grid.h;
        let lam = 2.0 / (h * h) * ((std::f64::consts::PI * h).cos() - 1.0);
        let n_nodes = 9;
        let dtau = 1.0 / (n_nodes - 1) as f64;
        let mut worst: f64 = 0.0;
        for i in 1..n_nodes - 1 {
            let t = i as f64 * dtau;
            let up: Vec<f64> = mode.iter().map(|m| (d * lam * (t + dtau)).exp() * m).collect();
            let um: Vec<f64> = mode.iter().map(|m| (d * lam * (t - dtau)).exp() * m).collect();
            let uc: Vec<f64> = mode.iter().map(|m| (d * lam * t).exp() * m).collect();
            let lu = lap.matvec(&uc);
            for p in 1..grid.n_x() - 1 {
                let dudt = (up[p] - um[p]) / (2.0 * dtau);
                let r = dudt - d * lu[p];
                worst = worst.max(r.abs());
            }
        }
        // Second-order differences: error ≈ (d·λ)³·Δτ²/6 · u ≤ bound.
        let bound = (d * lam).abs().powi(3) * dtau * dtau / 6.0 * 1.1;
        assert!(worst <= bound, "residual {worst} vs Taylor bound {bound}");
    }
}
