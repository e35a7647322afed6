//! Eagerly-evaluated reverse-mode differentiation tape.
//!
//! Every operation computes its value when it is recorded, so a tape
//! doubles as a forward evaluator; `backward` then walks the nodes in
//! reverse and accumulates adjoints. Gradients are only materialized
//! for nodes on a path from a parameter leaf to the loss.
//!
//! The op set is deliberately small: dense/sparse products, pointwise
//! maps, column stacking/extraction, gathers and reductions — enough to
//! express the network forward passes and the discrete residual losses
//! without any per-scalar graph nodes.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::sparse::Csr;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    /// a · b
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// matrix + column vector broadcast over columns
    AddColBcast(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// matrix ⊙ column vector broadcast over columns
    HadamardColBcast(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    /// sparse · a
    SpMM(NodeId, Rc<Csr>),
    Transpose(NodeId),
    HStackCols(Vec<NodeId>),
    Col(NodeId, usize),
    Reshape(NodeId),
    /// pick entries (row, col) into a column vector
    Gather(NodeId, Rc<Vec<(usize, usize)>>),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape. Parameters registered through [`Tape::param`]
/// receive gradients in registration order from [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable input; gradient is returned by `backward` in
    /// registration order.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.params.push(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.data[0]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_nn(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Add(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Sub(a, b), v, self.needs(a) || self.needs(b))
    }

    /// `a + c·1ᵀ` where `c` is a column vector broadcast across columns.
    pub fn add_col_bcast(&mut self, a: NodeId, c: NodeId) -> NodeId {
        let (va, vc) = (self.value(a), self.value(c));
        assert_eq!(vc.cols, 1, "broadcast operand must be a column");
        assert_eq!(va.rows, vc.rows, "broadcast row mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            let cr = vc.data[r];
            for x in &mut v.data[r * v.cols..(r + 1) * v.cols] {
                *x += cr;
            }
        }
        self.push(Op::AddColBcast(a, c), v, self.needs(a) || self.needs(c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            (va.rows, va.cols),
            (vb.rows, vb.cols),
            "hadamard shape mismatch"
        );
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Hadamard(a, b), v, self.needs(a) || self.needs(b))
    }

    /// `a ⊙ (c·1ᵀ)` with `c` a column vector broadcast across columns.
    pub fn hadamard_col_bcast(&mut self, a: NodeId, c: NodeId) -> NodeId {
        let (va, vc) = (self.value(a), self.value(c));
        assert_eq!(vc.cols, 1, "broadcast operand must be a column");
        assert_eq!(va.rows, vc.rows, "broadcast row mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            let cr = vc.data[r];
            for x in &mut v.data[r * v.cols..(r + 1) * v.cols] {
                *x *= cr;
            }
        }
        self.push(
            Op::HadamardColBcast(a, c),
            v,
            self.needs(a) || self.needs(c),
        )
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * s).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Scale(a, s), v, self.needs(a))
    }

    /// `1 − a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| 1.0 - x).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::OneMinus(a), v, self.needs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.tanh()).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Tanh(a), v, self.needs(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.sin()).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Sin(a), v, self.needs(a))
    }

    /// Sparse stencil applied from the left: `S · a`.
    pub fn spmm(&mut self, s: Rc<Csr>, a: NodeId) -> NodeId {
        let v = s.matmul(self.value(a));
        let needs = self.needs(a);
        self.push(Op::SpMM(a, s), v, needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, self.needs(a))
    }

    /// Concatenate column vectors/matrices side by side.
    pub fn hstack_cols(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "hstack of nothing");
        let rows = self.value(ids[0]).rows;
        let total: usize = ids.iter().map(|&i| self.value(i).cols).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut at = 0;
        let mut needs = false;
        for &id in ids {
            let src = self.value(id);
            assert_eq!(src.rows, rows, "hstack row mismatch");
            for r in 0..rows {
                let dst = r * total + at;
                v.data[dst..dst + src.cols]
                    .copy_from_slice(&src.data[r * src.cols..(r + 1) * src.cols]);
            }
            at += src.cols;
            needs |= self.needs(id);
        }
        self.push(Op::HStackCols(ids.to_vec()), v, needs)
    }

    pub fn col(&mut self, a: NodeId, j: usize) -> NodeId {
        let v = self.value(a).column(j);
        self.push(Op::Col(a, j), v, self.needs(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size mismatch");
        let v = Tensor::from_vec(rows, cols, va.data.clone());
        self.push(Op::Reshape(a), v, self.needs(a))
    }

    /// Pick entries `(row, col)` of `a` into a column vector; duplicate
    /// entries are allowed and their adjoints accumulate.
    pub fn gather(&mut self, a: NodeId, entries: Rc<Vec<(usize, usize)>>) -> NodeId {
        let va = self.value(a);
        let data = entries
            .iter()
            .map(|&(r, c)| {
                assert!(r < va.rows && c < va.cols, "gather index out of range");
                va.data[r * va.cols + c]
            })
            .collect::<Vec<_>>();
        let v = Tensor::from_vec(data.len(), 1, data);
        let needs = self.needs(a);
        self.push(Op::Gather(a, entries), v, needs)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::from_vec(1, 1, vec![s]), self.needs(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(!va.is_empty(), "mean of empty tensor");
        let s: f64 = va.data.iter().sum::<f64>() / va.len() as f64;
        self.push(Op::Mean(a), Tensor::from_vec(1, 1, vec![s]), self.needs(a))
    }

    /// Convenience: elementwise square.
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.hadamard(a, a)
    }

    /// Error if the node's value contains a NaN/∞; `context` names the
    /// layer or stage for diagnosis.
    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<()> {
        if self.value(id).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Reverse sweep from scalar node `loss`. Returns the gradients of
    /// all registered parameters, flattened in registration order
    /// (row-major within each parameter tensor).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            // Parameters keep their gradient for collection below.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut flat = Vec::new();
        for &pid in &self.params {
            match &grads[pid] {
                Some(g) => flat.extend_from_slice(&g.data),
                None => flat.extend(std::iter::repeat(0.0).take(self.value(pid).len())),
            }
        }
        if flat.iter().all(|x| x.is_finite()) {
            Ok(flat)
        } else {
            Err(Error::NonFinite("gradient".to_string()))
        }
    }

    fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => {
                assert_eq!(g.len(), delta.len(), "gradient shape mismatch");
                for (x, d) in g.data.iter_mut().zip(delta.data) {
                    *x += d;
                }
            }
            None => grads[id] = Some(delta),
        }
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    Self::add_grad(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::add_grad(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let mut neg = g.clone();
                    for x in &mut neg.data {
                        *x = -*x;
                    }
                    Self::add_grad(grads, *b, neg);
                }
            }
            Op::AddColBcast(a, c) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.clone());
                }
                if self.needs(*c) {
                    let mut gc = Tensor::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        gc.data[r] = g.data[r * g.cols..(r + 1) * g.cols].iter().sum();
                    }
                    Self::add_grad(grads, *c, gc);
                }
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    let data = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                    Self::add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let data = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                    Self::add_grad(grads, *b, Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::HadamardColBcast(a, c) => {
                let (va, vc) = (self.value(*a), self.value(*c));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        let cr = vc.data[r];
                        for x in &mut ga.data[r * ga.cols..(r + 1) * ga.cols] {
                            *x *= cr;
                        }
                    }
                    Self::add_grad(grads, *a, ga);
                }
                if self.needs(*c) {
                    let mut gc = Tensor::zeros(vc.rows, 1);
                    for r in 0..g.rows {
                        let mut acc = 0.0;
                        for j in 0..g.cols {
                            acc += g.data[r * g.cols + j] * va.data[r * va.cols + j];
                        }
                        gc.data[r] = acc;
                    }
                    Self::add_grad(grads, *c, gc);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let data = g.data.iter().map(|x| x * s).collect();
                    Self::add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::OneMinus(a) => {
                if self.needs(*a) {
                    let data = g.data.iter().map(|x| -x).collect();
                    Self::add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gx, yx)| gx * (1.0 - yx * yx))
                        .collect();
                    Self::add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::Sin(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gx, xv)| gx * xv.cos())
                        .collect();
                    Self::add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::SpMM(a, s) => {
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(self.value(*a).rows, self.value(*a).cols);
                    s.tmul_add(g, &mut ga);
                    Self::add_grad(grads, *a, ga);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.transpose());
                }
            }
            Op::HStackCols(ids) => {
                let mut at = 0;
                for &src in ids {
                    let sc = self.value(src).cols;
                    if self.needs(src) {
                        let rows = self.value(src).rows;
                        let mut gs = Tensor::zeros(rows, sc);
                        for r in 0..rows {
                            let from = r * g.cols + at;
                            gs.data[r * sc..(r + 1) * sc]
                                .copy_from_slice(&g.data[from..from + sc]);
                        }
                        Self::add_grad(grads, src, gs);
                    }
                    at += sc;
                }
            }
            Op::Col(a, j) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        ga.data[r * va.cols + j] = g.data[r];
                    }
                    Self::add_grad(grads, *a, ga);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    Self::add_grad(
                        grads,
                        *a,
                        Tensor::from_vec(va.rows, va.cols, g.data.clone()),
                    );
                }
            }
            Op::Gather(a, entries) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        ga.data[r * va.cols + c] += g.data[k];
                    }
                    Self::add_grad(grads, *a, ga);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let gs = g.data[0];
                    Self::add_grad(
                        grads,
                        *a,
                        Tensor::from_vec(va.rows, va.cols, vec![gs; va.len()]),
                    );
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let gs = g.data[0] / va.len() as f64;
                    Self::add_grad(
                        grads,
                        *a,
                        Tensor::from_vec(va.rows, va.cols, vec![gs; va.len()]),
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    /// Central finite differences against tape gradients on a composite
    /// expression exercising every op. The expression maps parameters
    /// (W, b, c) and constants through matmul, bias broadcast, tanh/sin,
    /// gating, sparse stencils, stacking, gathers and reductions.
    fn loss_value_and_grad(theta: &[f64]) -> (f64, Vec<f64>) {
        let w = Tensor::from_vec(3, 2, theta[0..6].to_vec());
        let b = Tensor::from_vec(3, 1, theta[6..9].to_vec());
        let c = Tensor::from_vec(3, 1, theta[9..12].to_vec());

        let mut t = Tape::new();
        let wid = t.param(w);
        let bid = t.param(b);
        let cid = t.param(c);
        let x = t.leaf(Tensor::from_vec(2, 2, vec![0.3, -0.7, 1.1, 0.25]));

        let lin = t.matmul(wid, x); // 3×2
        let lin = t.add_col_bcast(lin, bid);
        let h = t.tanh(lin);
        let s = t.sin(lin);
        let z = t.one_minus(h);
        let gate = t.hadamard(z, s);
        let gate = t.hadamard_col_bcast(gate, cid);

        let sten = Rc::new(Csr::from_triplets(
            3,
            3,
            &[(0, 0, 2.0), (0, 1, -1.0), (1, 2, 0.5), (2, 0, 1.5), (2, 2, -2.0)],
        ));
        let applied = t.spmm(sten, gate);
        let tr = t.transpose(applied); // 2×3
        let col0 = t.col(tr, 0);
        let col2 = t.col(tr, 2);
        let stack = t.hstack_cols(&[col0, col2]); // 2×2
        let wide = t.reshape(stack, 1, 4);
        let picked = t.gather(wide, Rc::new(vec![(0, 0), (0, 3), (0, 3)]));
        let sq = t.square(picked);
        let m = t.mean(sq);
        let s2 = t.sum(applied);
        let s2 = t.scale(s2, 0.25);
        let total = t.add(m, s2);

        let grad = t.backward(total).unwrap();
        (t.scalar(total), grad)
    }

    #[test]
    fn gradients_match_central_differences() {
        let theta: Vec<f64> = (0..12).map(|i| 0.1 + 0.07 * i as f64).collect();
        let (_, grad) = loss_value_and_grad(&theta);
        assert_eq!(grad.len(), 12);

        let h = 1e-6;
        let mut max_rel = 0.0_f64;
        let mut fd_scale = 0.0_f64;
        let mut fd = vec![0.0; 12];
        for i in 0..12 {
            let mut tp = theta.clone();
            tp[i] += h;
            let (fp, _) = loss_value_and_grad(&tp);
            tp[i] = theta[i] - h;
            let (fm, _) = loss_value_and_grad(&tp);
            fd[i] = (fp - fm) / (2.0 * h);
            fd_scale = fd_scale.max(fd[i].abs());
        }
        for i in 0..12 {
            max_rel = max_rel.max((grad[i] - fd[i]).abs() / fd_scale.max(1e-10));
        }
        assert!(max_rel < 1e-6, "max relative deviation {max_rel:e}");
    }

    #[test]
    fn gather_duplicates_accumulate() {
        let mut t = Tape::new();
        let p = t.param(Tensor::from_vec(1, 2, vec![2.0, 5.0]));
        let g = t.gather(p, Rc::new(vec![(0, 1), (0, 1)]));
        let s = t.sum(g);
        let grad = t.backward(s).unwrap();
        assert_eq!(grad, vec![0.0, 2.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut t = Tape::new();
        let used = t.param(Tensor::from_vec(1, 1, vec![3.0]));
        let _unused = t.param(Tensor::from_vec(2, 1, vec![1.0, 1.0]));
        let s = t.sum(used);
        let grad = t.backward(s).unwrap();
        assert_eq!(grad, vec![1.0, 0.0, 0.0]);
    }
}
