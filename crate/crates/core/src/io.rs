//! Binary file formats and CSV writers.
//!
//! Three self-describing binary formats, each opening with an 8-byte
//! magic string and a little-endian `u32` version, followed by a typed
//! header and row-major little-endian `f64` arrays in field-declaration
//! order:
//!
//! * **checkpoint** (`PNETCKPT`): an operator-network model — kind tag,
//!   `(p, q, boundary mode, sensor grid)` header plus the generating
//!   equation, Δt, and scheme, then each MLP as activation tag, layer
//!   dims, and weight/bias arrays, then the explicit last-layer weights;
//! * **dataset** (`PNETDATA`): a training set — grid coordinates,
//!   boundary tag, kernel spec, seeds, then the input/target function
//!   arrays and the collocation pairs;
//! * **trajectory** (`PNETTRAJ`): a rollout — equation kind and
//!   parameters, grid, Δt, scheme, then one state array per step.
//!
//! Every multi-byte value is little-endian. Readers reject bad magic,
//! unknown versions or tags, and truncated payloads with
//! [`Error::Format`]. CSV output uses Rust's shortest-roundtrip `f64`
//! formatting, so equal runs produce byte-identical files.

use crate::deeponet::{BoundaryMode, ContModel, DeepONetModel, RteOperatorModel};
use crate::equation::{Boundary, Equation, Grid};
use crate::error::{Error, HistoryRow, Result};
use crate::grf::{KernelSpec, TrainingSet};
use crate::metrics::ErrorReport;
use crate::mlp::{Activation, DenseLayer, MLPParams};
use crate::rollout::Trajectory;
use crate::stepper::Scheme;
use crate::study::OrderStudy;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"PNETCKPT";
const DATA_MAGIC: &[u8; 8] = b"PNETDATA";
const TRAJ_MAGIC: &[u8; 8] = b"PNETTRAJ";
const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------
// Little-endian primitives.

fn w_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Length-prefixed `f64` array.
fn w_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    w_u64(w, vs.len() as u64)?;
    for &v in vs {
        w_f64(w, v)?;
    }
    Ok(())
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn r_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    fill(r, &mut b, what)?;
    Ok(b[0])
}

fn r_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Bounded length read: a corrupt header must not trigger a huge
/// allocation before the payload read fails.
fn r_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let n = r_u64(r, what)?;
    if n > (1 << 32) {
        return Err(Error::Format(format!("implausible {what} length {n}")));
    }
    Ok(n as usize)
}

fn r_f64s<R: Read>(r: &mut R, what: &str) -> Result<Vec<f64>> {
    let n = r_len(r, what)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r_f64(r, what)?);
    }
    Ok(out)
}

fn open_header<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut got = [0u8; 8];
    fill(r, &mut got, "magic")?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Typed blocks shared by the three formats.

fn w_grid<W: Write>(w: &mut W, g: &Grid) -> Result<()> {
    let tag = match g.boundary {
        Boundary::Dirichlet0 => 0u8,
        Boundary::Periodic => 1,
        Boundary::Inflow => 2,
    };
    w_u8(w, tag)?;
    w_f64(w, g.h)?;
    w_f64s(w, &g.xs)?;
    w_f64s(w, &g.vs)?;
    w_f64s(w, &g.v_weights)
}

fn r_grid<R: Read>(r: &mut R) -> Result<Grid> {
    let boundary = match r_u8(r, "grid boundary tag")? {
        0 => Boundary::Dirichlet0,
        1 => Boundary::Periodic,
        2 => Boundary::Inflow,
        t => return Err(Error::Format(format!("unknown grid boundary tag {t}"))),
    };
    let h = r_f64(r, "grid spacing")?;
    let xs = r_f64s(r, "grid x coordinates")?;
    let vs = r_f64s(r, "grid v coordinates")?;
    let v_weights = r_f64s(r, "grid v weights")?;
    if xs.is_empty() || vs.len() != v_weights.len() {
        return Err(Error::Format("inconsistent grid coordinate arrays".into()));
    }
    Ok(Grid {
        xs,
        h,
        boundary,
        vs,
        v_weights,
    })
}

fn w_eq<W: Write>(w: &mut W, eq: &Equation) -> Result<()> {
    let (tag, a, b, c) = match *eq {
        Equation::ReactionDiffusion1d { d, k } => (0u8, d, k, 0.0),
        Equation::AllenCahn1d { d1, d2 } => (1, d1, d2, 0.0),
        Equation::CahnHilliard1d { d1, d2 } => (2, d1, d2, 0.0),
        Equation::Rte1d {
            eps,
            phi_left,
            phi_right,
        } => (3, eps, phi_left, phi_right),
    };
    w_u8(w, tag)?;
    w_f64(w, a)?;
    w_f64(w, b)?;
    w_f64(w, c)
}

fn r_eq<R: Read>(r: &mut R) -> Result<Equation> {
    let tag = r_u8(r, "equation tag")?;
    let a = r_f64(r, "equation parameter")?;
    let b = r_f64(r, "equation parameter")?;
    let c = r_f64(r, "equation parameter")?;
    Ok(match tag {
        0 => Equation::ReactionDiffusion1d { d: a, k: b },
        1 => Equation::AllenCahn1d { d1: a, d2: b },
        2 => Equation::CahnHilliard1d { d1: a, d2: b },
        3 => Equation::Rte1d {
            eps: a,
            phi_left: b,
            phi_right: c,
        },
        t => return Err(Error::Format(format!("unknown equation tag {t}"))),
    })
}

fn w_kernel<W: Write>(w: &mut W, k: &KernelSpec) -> Result<()> {
    let (tag, l) = match *k {
        KernelSpec::SqExp1d { l } => (0u8, l),
        KernelSpec::Periodic1d { l } => (1, l),
        KernelSpec::PhaseSpace1d { l } => (2, l),
    };
    w_u8(w, tag)?;
    w_f64(w, l)
}

fn r_kernel<R: Read>(r: &mut R) -> Result<KernelSpec> {
    let tag = r_u8(r, "kernel tag")?;
    let l = r_f64(r, "kernel length scale")?;
    Ok(match tag {
        0 => KernelSpec::SqExp1d { l },
        1 => KernelSpec::Periodic1d { l },
        2 => KernelSpec::PhaseSpace1d { l },
        t => return Err(Error::Format(format!("unknown kernel tag {t}"))),
    })
}

fn scheme_tag(s: Scheme) -> u8 {
    match s {
        Scheme::BackwardEuler => 0,
        Scheme::CrankNicolson => 1,
    }
}

fn scheme_from(tag: u8) -> Result<Scheme> {
    match tag {
        0 => Ok(Scheme::BackwardEuler),
        1 => Ok(Scheme::CrankNicolson),
        t => Err(Error::Format(format!("unknown scheme tag {t}"))),
    }
}

fn w_dense<W: Write>(w: &mut W, l: &DenseLayer) -> Result<()> {
    w_u32(w, l.out_dim() as u32)?;
    w_u32(w, l.in_dim() as u32)
}

fn r_dense_dims<R: Read>(r: &mut R) -> Result<(usize, usize)> {
    let out = r_u32(r, "layer output dim")? as usize;
    let inp = r_u32(r, "layer input dim")? as usize;
    if out == 0 || inp == 0 || out > (1 << 20) || inp > (1 << 20) {
        return Err(Error::Format(format!("implausible layer dims {out}×{inp}")));
    }
    Ok((out, inp))
}

fn w_dense_arrays<W: Write>(w: &mut W, l: &DenseLayer) -> Result<()> {
    w_f64s(w, &l.w.data)?;
    w_f64s(w, &l.b.data)
}

fn r_dense_arrays<R: Read>(r: &mut R, out: usize, inp: usize) -> Result<DenseLayer> {
    let wd = r_f64s(r, "layer weights")?;
    let bd = r_f64s(r, "layer biases")?;
    if wd.len() != out * inp || bd.len() != out {
        return Err(Error::Format(format!(
            "layer array sizes {}:{} disagree with dims {out}×{inp}",
            wd.len(),
            bd.len()
        )));
    }
    Ok(DenseLayer {
        w: Tensor::from_vec(out, inp, wd),
        b: Tensor::from_vec(out, 1, bd),
    })
}

/// One MLP: activation tag, encoder flag, layer dims, then the arrays
/// in declaration order (layers first, gating encoders after).
fn w_mlp<W: Write>(w: &mut W, m: &MLPParams) -> Result<()> {
    w_u8(
        w,
        match m.activation {
            Activation::Tanh => 0,
            Activation::Sine => 1,
        },
    )?;
    w_u8(w, m.encoders.is_some() as u8)?;
    w_u32(w, m.layers.len() as u32)?;
    for l in &m.layers {
        w_dense(w, l)?;
    }
    if let Some((u, v)) = &m.encoders {
        w_dense(w, u)?;
        w_dense(w, v)?;
    }
    for l in &m.layers {
        w_dense_arrays(w, l)?;
    }
    if let Some((u, v)) = &m.encoders {
        w_dense_arrays(w, u)?;
        w_dense_arrays(w, v)?;
    }
    Ok(())
}

fn r_mlp<R: Read>(r: &mut R) -> Result<MLPParams> {
    let activation = match r_u8(r, "activation tag")? {
        0 => Activation::Tanh,
        1 => Activation::Sine,
        t => return Err(Error::Format(format!("unknown activation tag {t}"))),
    };
    let has_encoders = match r_u8(r, "encoder flag")? {
        0 => false,
        1 => true,
        t => return Err(Error::Format(format!("bad encoder flag {t}"))),
    };
    let n_layers = r_u32(r, "layer count")? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        dims.push(r_dense_dims(r)?);
    }
    for win in dims.windows(2) {
        if win[1].1 != win[0].0 {
            return Err(Error::Format(format!(
                "layer dims do not chain: {}×{} after {}×{}",
                win[1].0, win[1].1, win[0].0, win[0].1
            )));
        }
    }
    let enc_dims = if has_encoders {
        Some((r_dense_dims(r)?, r_dense_dims(r)?))
    } else {
        None
    };
    let mut layers = Vec::with_capacity(n_layers);
    for &(out, inp) in &dims {
        layers.push(r_dense_arrays(r, out, inp)?);
    }
    let encoders = match enc_dims {
        Some(((uo, ui), (vo, vi))) => Some((
            r_dense_arrays(r, uo, ui)?,
            r_dense_arrays(r, vo, vi)?,
        )),
        None => None,
    };
    Ok(MLPParams {
        layers,
        encoders,
        activation,
    })
}

fn boundary_mode_tag(b: BoundaryMode) -> u8 {
    match b {
        BoundaryMode::DirichletMask => 0,
        BoundaryMode::PeriodicLift => 1,
        BoundaryMode::None => 2,
    }
}

fn boundary_mode_from(tag: u8) -> Result<BoundaryMode> {
    match tag {
        0 => Ok(BoundaryMode::DirichletMask),
        1 => Ok(BoundaryMode::PeriodicLift),
        2 => Ok(BoundaryMode::None),
        t => Err(Error::Format(format!("unknown boundary mode tag {t}"))),
    }
}

/// One operator network: `(p, q, boundary mode, phase flag)` header,
/// branch and trunk MLPs, explicit last-layer weights.
fn w_deeponet<W: Write>(w: &mut W, m: &DeepONetModel) -> Result<()> {
    w_u32(w, m.p as u32)?;
    w_u32(w, m.q as u32)?;
    w_u8(w, boundary_mode_tag(m.boundary))?;
    w_u8(w, m.phase_input as u8)?;
    w_mlp(w, &m.branch)?;
    w_mlp(w, &m.trunk)?;
    w_f64s(w, &m.w)
}

/// `extra_trunk_inputs` is 1 for the whole-horizon variant, whose trunk
/// consumes time in front of the lifted coordinate; 0 otherwise.
fn r_deeponet_with<R: Read>(r: &mut R, extra_trunk_inputs: usize) -> Result<DeepONetModel> {
    let p = r_u32(r, "feature count p")? as usize;
    let q = r_u32(r, "weight count q")? as usize;
    let boundary = boundary_mode_from(r_u8(r, "boundary mode")?)?;
    let phase_input = match r_u8(r, "phase flag")? {
        0 => false,
        1 => true,
        t => return Err(Error::Format(format!("bad phase flag {t}"))),
    };
    let branch = r_mlp(r)?;
    let trunk = r_mlp(r)?;
    let w = r_f64s(r, "last-layer weights")?;

    let pq = branch.out_dim();
    if trunk.out_dim() != p || pq != p * q || w.len() != q {
        return Err(Error::Format(format!(
            "checkpoint header says p={p}, q={q} but arrays give branch {pq}, trunk {}, w {}",
            trunk.out_dim(),
            w.len()
        )));
    }
    let want_in =
        if phase_input { 2 } else { boundary.lift_dim() } + extra_trunk_inputs;
    if trunk.in_dim() != want_in {
        return Err(Error::Format(format!(
            "trunk input dimension {} does not match coordinate lift {want_in}",
            trunk.in_dim()
        )));
    }
    let n_sensors = branch.in_dim();
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

fn r_deeponet<R: Read>(r: &mut R) -> Result<DeepONetModel> {
    r_deeponet_with(r, 0)
}

// ---------------------------------------------------------------------
// Checkpoint.

/// The three trainable model shapes a checkpoint can hold.
#[derive(Clone, Debug)]
pub enum ModelKind {
    /// Single-step propagator network.
    Step(DeepONetModel),
    /// Whole-horizon space–time network.
    Cont(ContModel),
    /// Composite phase-space network.
    Kinetic(RteOperatorModel),
}

/// A saved model together with the problem it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub eq: Equation,
    pub grid: Grid,
    pub dt: f64,
    pub scheme: Scheme,
    pub model: ModelKind,
}

/// Writes a model checkpoint (`PNETCKPT` format).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w_u32(&mut w, FORMAT_VERSION)?;
    w_eq(&mut w, &ckpt.eq)?;
    w_grid(&mut w, &ckpt.grid)?;
    w_f64(&mut w, ckpt.dt)?;
    w_u8(&mut w, scheme_tag(ckpt.scheme))?;
    match &ckpt.model {
        ModelKind::Step(m) => {
            w_u8(&mut w, 0)?;
            w_deeponet(&mut w, m)?;
        }
        ModelKind::Cont(m) => {
            w_u8(&mut w, 1)?;
            w_f64(&mut w, m.t0)?;
            w_deeponet(&mut w, &m.inner)?;
        }
        ModelKind::Kinetic(m) => {
            w_u8(&mut w, 2)?;
            w_f64(&mut w, m.eps)?;
            w_f64(&mut w, m.phi_left)?;
            w_f64(&mut w, m.phi_right)?;
            w_deeponet(&mut w, &m.net1)?;
            w_deeponet(&mut w, &m.net2)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a model checkpoint (`PNETCKPT` format).
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    open_header(&mut r, CKPT_MAGIC)?;
    let eq = r_eq(&mut r)?;
    let grid = r_grid(&mut r)?;
    let dt = r_f64(&mut r, "time step")?;
    let scheme = scheme_from(r_u8(&mut r, "scheme tag")?)?;
    let model = match r_u8(&mut r, "model kind tag")? {
        0 => ModelKind::Step(r_deeponet(&mut r)?),
        1 => {
            let t0 = r_f64(&mut r, "horizon t0")?;
            ModelKind::Cont(ContModel {
                inner: r_deeponet_with(&mut r, 1)?,
                t0,
            })
        }
        2 => {
            let eps = r_f64(&mut r, "knudsen number")?;
            let phi_left = r_f64(&mut r, "left inflow")?;
            let phi_right = r_f64(&mut r, "right inflow")?;
            ModelKind::Kinetic(RteOperatorModel {
                net1: r_deeponet(&mut r)?,
                net2: r_deeponet(&mut r)?,
                eps,
                phi_left,
                phi_right,
            })
        }
        t => return Err(Error::Format(format!("unknown model kind tag {t}"))),
    };
    Ok(Checkpoint {
        eq,
        grid,
        dt,
        scheme,
        model,
    })
}

// ---------------------------------------------------------------------
// Dataset.

/// Writes a training set (`PNETDATA` format).
pub fn save_dataset(path: &Path, set: &TrainingSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    w_u32(&mut w, FORMAT_VERSION)?;
    w_eq(&mut w, &set.eq)?;
    w_grid(&mut w, &set.grid)?;
    w_kernel(&mut w, &set.kernel)?;
    w_f64(&mut w, set.dt)?;
    w_u8(&mut w, scheme_tag(set.scheme))?;
    w_u64(&mut w, set.n_base as u64)?;
    w_u64(&mut w, set.n_passes as u64)?;
    w_u64(&mut w, set.seed)?;
    w_u64(&mut w, set.inputs.len() as u64)?;
    for f in &set.inputs {
        w_f64s(&mut w, f)?;
    }
    for f in &set.targets {
        w_f64s(&mut w, f)?;
    }
    w_u64(&mut w, set.pairs.len() as u64)?;
    for &(s, p) in &set.pairs {
        w_u64(&mut w, s as u64)?;
        w_u64(&mut w, p as u64)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a training set (`PNETDATA` format).
pub fn load_dataset(path: &Path) -> Result<TrainingSet> {
    let mut r = BufReader::new(File::open(path)?);
    open_header(&mut r, DATA_MAGIC)?;
    let eq = r_eq(&mut r)?;
    let grid = r_grid(&mut r)?;
    let kernel = r_kernel(&mut r)?;
    let dt = r_f64(&mut r, "time step")?;
    let scheme = scheme_from(r_u8(&mut r, "scheme tag")?)?;
    let n_base = r_len(&mut r, "base draw count")?;
    let n_passes = r_len(&mut r, "pass count")?;
    let seed = r_u64(&mut r, "seed")?;
    let n_fns = r_len(&mut r, "function count")?;
    let n_points = grid.n_points();
    let read_fns = |r: &mut BufReader<File>, what: &str| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(n_fns);
        for _ in 0..n_fns {
            let f = r_f64s(r, what)?;
            if f.len() != n_points {
                return Err(Error::Format(format!(
                    "{what} row holds {} values, grid has {n_points} points",
                    f.len()
                )));
            }
            out.push(f);
        }
        Ok(out)
    };
    let inputs = read_fns(&mut r, "input function")?;
    let targets = read_fns(&mut r, "target function")?;
    let n_pairs = r_len(&mut r, "pair count")?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let s = r_u64(&mut r, "pair function index")? as usize;
        let p = r_u64(&mut r, "pair point index")? as usize;
        if s >= n_fns || p >= n_points {
            return Err(Error::Format(format!(
                "collocation pair ({s}, {p}) outside the {n_fns}×{n_points} table"
            )));
        }
        pairs.push((s, p));
    }
    Ok(TrainingSet {
        eq,
        grid,
        kernel,
        dt,
        scheme,
        n_base,
        n_passes,
        seed,
        inputs,
        targets,
        pairs,
    })
}

// ---------------------------------------------------------------------
// Trajectory.

/// Writes a rollout (`PNETTRAJ` format).
pub fn save_trajectory(
    path: &Path,
    eq: &Equation,
    grid: &Grid,
    scheme: Scheme,
    traj: &Trajectory,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJ_MAGIC)?;
    w_u32(&mut w, FORMAT_VERSION)?;
    w_eq(&mut w, eq)?;
    w_grid(&mut w, grid)?;
    w_f64(&mut w, traj.dt)?;
    w_u8(&mut w, scheme_tag(scheme))?;
    w_u64(&mut w, traj.states.len() as u64)?;
    for s in &traj.states {
        w_f64s(&mut w, s)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rollout (`PNETTRAJ` format).
pub fn load_trajectory(path: &Path) -> Result<(Equation, Grid, Scheme, Trajectory)> {
    let mut r = BufReader::new(File::open(path)?);
    open_header(&mut r, TRAJ_MAGIC)?;
    let eq = r_eq(&mut r)?;
    let grid = r_grid(&mut r)?;
    let dt = r_f64(&mut r, "time step")?;
    let scheme = scheme_from(r_u8(&mut r, "scheme tag")?)?;
    let n_states = r_len(&mut r, "state count")?;
    if n_states == 0 {
        return Err(Error::Format("trajectory holds no states".into()));
    }
    let n_points = grid.n_points();
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let s = r_f64s(&mut r, "state")?;
        if s.len() != n_points {
            return Err(Error::Format(format!(
                "state holds {} values, grid has {n_points} points",
                s.len()
            )));
        }
        states.push(s);
    }
    Ok((eq, grid, scheme, Trajectory { states, dt }))
}

// ---------------------------------------------------------------------
// CSV writers.

/// Training log: `iter,lr,loss`, one row per recorded iteration.
pub fn write_training_log(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iter,lr,loss")?;
    for &(iter, lr, loss) in history {
        writeln!(w, "{iter},{lr},{loss}")?;
    }
    w.flush()?;
    Ok(())
}

/// Error report: `step,t,rel_err`, one row per step `1..=K`.
pub fn write_error_csv(path: &Path, report: &ErrorReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,t,rel_err")?;
    for (i, err) in report.per_step.iter().enumerate() {
        let step = i + 1;
        let t = step as f64 * report.dt;
        writeln!(w, "{step},{t},{err}")?;
    }
    w.flush()?;
    Ok(())
}

/// Refinement study: `dt,rel_err`, one row per ladder rung.
pub fn write_study_csv(path: &Path, study: &OrderStudy) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "dt,rel_err")?;
    for (dt, err) in study.dts.iter().zip(&study.errors) {
        writeln!(w, "{dt},{err}")?;
    }
    w.flush()?;
    Ok(())
}
