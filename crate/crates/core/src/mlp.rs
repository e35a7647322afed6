//! Fully-connected network with the two-encoder gated ("modified")
//! forward pass.
//!
//! With layers `(W₁,b₁)…(W_L,b_L)` and encoders `(Wᵤ,bᵤ)`, `(Wᵥ,bᵥ)`:
//!
//! ```text
//! U = σ(Wᵤx + bᵤ)        V = σ(Wᵥx + bᵥ)
//! H₁ = σ(W₁x + b₁)
//! Zₖ = σ(Wₖ₊₁Hₖ + bₖ₊₁)   Hₖ₊₁ = (1−Zₖ)⊙U + Zₖ⊙V     k = 1…L−2
//! out = W_L H_{L−1} + b_L                    (final layer affine)
//! ```
//!
//! A single-layer network is the bare affine map. Without encoders the
//! hidden layers compose plainly (`Hₖ₊₁ = σ(Wₖ₊₁Hₖ + bₖ₊₁)`).
//!
//! Weights are Glorot-uniform from a caller-seeded generator, biases
//! start at zero, and everything is `f64`. Parameter flattening order —
//! used by the optimizer, the gradient tape and the checkpoint format —
//! is: each layer's `W` then `b` in order, then encoder U's `W`,`b`,
//! then encoder V's.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{matmul_nn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sine,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sine => x.sin(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    /// `[out × in]`, row-major.
    pub w: Tensor,
    /// `[out × 1]`.
    pub b: Tensor,
}

impl DenseLayer {
    fn glorot(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> DenseLayer {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-a..a))
            .collect();
        DenseLayer {
            w: Tensor::from_vec(out_dim, in_dim, data),
            b: Tensor::zeros(out_dim, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Clone, Debug)]
pub struct MLPParams {
    pub layers: Vec<DenseLayer>,
    /// Gating encoders (U, V); only consulted when there are at least
    /// two hidden transitions (three weight layers).
    pub encoders: Option<(DenseLayer, DenseLayer)>,
    pub activation: Activation,
}

/// Parameter node ids of one MLP registered on a tape.
pub struct MLPNodes {
    layers: Vec<(NodeId, NodeId)>,
    encoders: Option<((NodeId, NodeId), (NodeId, NodeId))>,
    activation: Activation,
}

impl MLPParams {
    /// Glorot-initialized network over `dims = [in, hidden…, out]` with
    /// gating encoders whenever the architecture has a hidden layer to
    /// gate (three or more weight layers).
    pub fn glorot(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "network needs at least input and output dims".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        let hidden = &dims[1..dims.len() - 1];
        if hidden.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config(
                "gated architecture requires equal hidden widths".into(),
            ));
        }
        let layers = dims
            .windows(2)
            .map(|d| DenseLayer::glorot(d[1], d[0], rng))
            .collect::<Vec<_>>();
        let encoders = if dims.len() >= 4 {
            let u = DenseLayer::glorot(dims[1], dims[0], rng);
            let v = DenseLayer::glorot(dims[1], dims[0], rng);
            Some((u, v))
        } else {
            None
        };
        Ok(MLPParams {
            layers,
            encoders,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim()));
        d
    }

    pub fn n_params(&self) -> usize {
        let mut n: usize = self.layers.iter().map(|l| l.n_params()).sum();
        if let Some((u, v)) = &self.encoders {
            n += u.n_params() + v.n_params();
        }
        n
    }

    /// Append all parameters, row-major, in flattening order.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b.data);
        }
        if let Some((u, v)) = &self.encoders {
            for l in [u, v] {
                out.extend_from_slice(&l.w.data);
                out.extend_from_slice(&l.b.data);
            }
        }
    }

    /// Read parameters back in flattening order; advances `pos`.
    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        let take = |dst: &mut Tensor, pos: &mut usize| {
            let n = dst.len();
            dst.data.copy_from_slice(&src[*pos..*pos + n]);
            *pos += n;
        };
        for l in &mut self.layers {
            take(&mut l.w, pos);
            take(&mut l.b, pos);
        }
        if let Some((u, v)) = &mut self.encoders {
            for l in [u, v] {
                take(&mut l.w, pos);
                take(&mut l.b, pos);
            }
        }
    }

    /// Forward pass on a batch of column inputs `[in × B] → [out × B]`.
    ///
    /// Errors with the offending layer index if a non-finite value
    /// appears in the input, the parameters, or any intermediate.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        assert_eq!(x.rows, self.in_dim(), "input dimension mismatch");
        if !x.all_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        let act = self.activation;
        let affine = |l: &DenseLayer, h: &Tensor| -> Tensor {
            let mut y = matmul_nn(&l.w, h);
            for r in 0..y.rows {
                let br = l.b.data[r];
                for v in &mut y.data[r * y.cols..(r + 1) * y.cols] {
                    *v += br;
                }
            }
            y
        };
        let check = |t: &Tensor, i: usize| -> Result<()> {
            if t.all_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("layer {i}")))
            }
        };

        let n_layers = self.layers.len();
        if n_layers == 1 {
            let y = affine(&self.layers[0], x);
            check(&y, 0)?;
            return Ok(y);
        }

        let gated = self.encoders.as_ref().filter(|_| n_layers >= 3);
        let (u, v) = match gated {
            Some((eu, ev)) => {
                let mut u = affine(eu, x);
                check(&u, 0)?;
                u.data.iter_mut().for_each(|z| *z = act.apply(*z));
                let mut v = affine(ev, x);
                check(&v, 0)?;
                v.data.iter_mut().for_each(|z| *z = act.apply(*z));
                (Some(u), Some(v))
            }
            None => (None, None),
        };

        let mut h = affine(&self.layers[0], x);
        check(&h, 0)?;
        h.data.iter_mut().for_each(|z| *z = act.apply(*z));

        for (i, layer) in self.layers[1..n_layers - 1].iter().enumerate() {
            let mut z = affine(layer, &h);
            check(&z, i + 1)?;
            z.data.iter_mut().for_each(|w| *w = act.apply(*w));
            match (&u, &v) {
                (Some(u), Some(v)) => {
                    // H ← (1−Z)⊙U + Z⊙V
                    for n in 0..z.len() {
                        h.data[n] = (1.0 - z.data[n]) * u.data[n] + z.data[n] * v.data[n];
                    }
                }
                _ => h = z,
            }
        }

        let y = affine(&self.layers[n_layers - 1], &h);
        check(&y, n_layers - 1)?;
        Ok(y)
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_batch(&Tensor::col_vec(x))?;
        Ok(out.data)
    }

    /// Register this network's parameters on a tape, in flattening order.
    pub fn register(&self, tape: &mut Tape) -> MLPNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect();
        let encoders = self.encoders.as_ref().map(|(u, v)| {
            (
                (tape.param(u.w.clone()), tape.param(u.b.clone())),
                (tape.param(v.w.clone()), tape.param(v.b.clone())),
            )
        });
        MLPNodes {
            layers,
            encoders,
            activation: self.activation,
        }
    }
}

impl MLPNodes {
    fn act(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Sine => tape.sin(x),
        }
    }

    /// Differentiable forward pass on the tape, mirroring
    /// [`MLPParams::forward_batch`] exactly.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let affine = |tape: &mut Tape, (w, b): (NodeId, NodeId), h: NodeId| {
            let y = tape.matmul(w, h);
            tape.add_col_bcast(y, b)
        };
        let n_layers = self.layers.len();
        if n_layers == 1 {
            let y = affine(tape, self.layers[0], x);
            tape.check_finite(y, "layer 0")?;
            return Ok(y);
        }

        let gated = self.encoders.filter(|_| n_layers >= 3);
        let uv = match gated {
            Some((eu, ev)) => {
                let u = affine(tape, eu, x);
                let u = self.act(tape, u);
                let v = affine(tape, ev, x);
                let v = self.act(tape, v);
                tape.check_finite(u, "encoder")?;
                tape.check_finite(v, "encoder")?;
                Some((u, v))
            }
            None => None,
        };

        let mut h = affine(tape, self.layers[0], x);
        h = self.act(tape, h);
        tape.check_finite(h, "layer 0")?;

        for (i, &layer) in self.layers[1..n_layers - 1].iter().enumerate() {
            let z = affine(tape, layer, h);
            let z = self.act(tape, z);
            tape.check_finite(z, &format!("layer {}", i + 1))?;
            h = match uv {
                Some((u, v)) => {
                    let omz = tape.one_minus(z);
                    let a = tape.hadamard(omz, u);
                    let b = tape.hadamard(z, v);
                    tape.add(a, b)
                }
                None => z,
            };
        }

        let y = affine(tape, self.layers[n_layers - 1], h);
        tape.check_finite(y, &format!("layer {}", n_layers - 1))?;
        Ok(y)
    }
}
