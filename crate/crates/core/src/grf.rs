//! Gaussian random field initial data and training-set assembly.
//!
//! Initial conditions are drawn from a centered Gaussian process on the
//! grid's sensor points, with one covariance kernel per boundary type:
//! squared-exponential for Dirichlet problems, a periodized
//! squared-exponential for periodic ones, and a squared-exponential in
//! `(x, v)` jointly for the phase-space problem. Draws are made
//! boundary-compatible by post-processing:
//!
//! * Dirichlet: `f₀(x) = a(x)·x(1−x)` vanishes at both walls;
//! * periodic: the kernel itself is 1-periodic, draws are used as-is;
//! * kinetic inflow: `f₀ = a·B + C` with the outflow bump `B` and the
//!   inflow interpolant `C`, accepted only when `a` is strictly
//!   positive everywhere (so `f₀ > 0` and the inflow data is exact).
//!
//! A training set pushes each accepted initial state through the
//! reference propagator, collects all intermediate states as input
//! functions, and subsamples `m` (function, collocation-point) pairs —
//! whole functions first, points within each function second — so every
//! selected function keeps its complete sensor vector for the branch
//! network while the loss only visits the selected points.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::equation::{rte_mask_b, rte_mask_c, Boundary, Equation, Grid};
use crate::error::{Error, Result};
use crate::stepper::{RefStepper, Scheme};
use crate::tensor::Tensor;

/// Covariance kernels; all are symmetric with `K(z,z) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(−(x₁−x₂)²/(2l²))`
    SqExp1d { l: f64 },
    /// `exp(−sin²(π(x₁−x₂))/(2l²))`, 1-periodic
    Periodic1d { l: f64 },
    /// `exp(−((x₁−x₂)² + (v₁−v₂)²)/(2l²))`
    PhaseSpace1d { l: f64 },
}

impl KernelSpec {
    pub fn length_scale(&self) -> f64 {
        match *self {
            KernelSpec::SqExp1d { l }
            | KernelSpec::Periodic1d { l }
            | KernelSpec::PhaseSpace1d { l } => l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.length_scale();
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::Config(format!("kernel length scale must be positive, got {l}")));
        }
        Ok(())
    }

    /// Kernel value for two (x, v) coordinates (v ignored by the purely
    /// spatial kinds).
    pub fn eval(&self, z1: [f64; 2], z2: [f64; 2]) -> f64 {
        match *self {
            KernelSpec::SqExp1d { l } => {
                let dx = z1[0] - z2[0];
                (-dx * dx / (2.0 * l * l)).exp()
            }
            KernelSpec::Periodic1d { l } => {
                let s = (std::f64::consts::PI * (z1[0] - z2[0])).sin();
                (-s * s / (2.0 * l * l)).exp()
            }
            KernelSpec::PhaseSpace1d { l } => {
                let dx = z1[0] - z2[0];
                let dv = z1[1] - z2[1];
                (-(dx * dx + dv * dv) / (2.0 * l * l)).exp()
            }
        }
    }

    /// The kernel conventionally paired with each boundary type.
    pub fn default_for(boundary: Boundary) -> KernelSpec {
        match boundary {
            Boundary::Dirichlet0 => KernelSpec::SqExp1d { l: 0.2 },
            Boundary::Periodic => KernelSpec::Periodic1d { l: 0.5 },
            Boundary::Inflow => KernelSpec::PhaseSpace1d { l: 1.0 },
        }
    }
}

/// Dense covariance matrix of the kernel on the given points (no
/// jitter; exactly the entrywise kernel values).
pub fn cov_matrix(spec: &KernelSpec, points: &[[f64; 2]]) -> Tensor {
    let n = points.len();
    assert!(n > 0, "covariance needs at least one point");
    let mut k = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(points[i], points[j]);
            *k.at_mut(i, j) = v;
            *k.at_mut(j, i) = v;
        }
    }
    k
}

const JITTER_FIRST: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Gaussian-process sampler with a cached Cholesky factor.
///
/// The covariance gets `jitter·I` added before factorization, starting
/// at 1e-10 and escalating tenfold until the factorization succeeds;
/// past 1e-6 the kernel/grid pair is reported as degenerate.
pub struct GpSampler {
    pub spec: KernelSpec,
    pub n_points: usize,
    /// Lower-triangular Cholesky factor of `K + jitter·I`.
    chol: Tensor,
    /// Jitter that made the factorization succeed.
    pub jitter: f64,
}

impl GpSampler {
    pub fn new(spec: KernelSpec, points: &[[f64; 2]]) -> Result<GpSampler> {
        spec.validate()?;
        let n = points.len();
        let base = cov_matrix(&spec, points);
        let mut jitter = JITTER_FIRST;
        loop {
            let mut m = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] = base.at(i, j);
                }
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                let l = ch.l();
                let mut chol = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        *chol.at_mut(i, j) = l[(i, j)];
                    }
                }
                return Ok(GpSampler {
                    spec,
                    n_points: n,
                    chol,
                    jitter,
                });
            }
            if jitter >= JITTER_MAX {
                return Err(Error::DegenerateKernel { max_jitter: JITTER_MAX });
            }
            jitter *= 10.0;
        }
    }

    /// One centered draw: `L·ζ` with ζ i.i.d. standard normal.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.n_points;
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &self.chol.data[i * n..i * n + i + 1];
            out[i] = row.iter().zip(&z).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn sample_many<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

/// Zero-Dirichlet initial state `a(x)·x(1−x)`; endpoints are exact
/// zeros because the mask has roots there.
pub fn make_ic_dirichlet(a: &[f64], xs: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), xs.len(), "sample/grid length mismatch");
    a.iter().zip(xs).map(|(&av, &x)| av * x * (1.0 - x)).collect()
}

/// Phase-space initial state `a·B + C`, or `None` when the draw has a
/// non-positive entry (the caller redraws). Accepted states are
/// strictly positive and match the inflow data exactly.
pub fn make_ic_rte(a: &[f64], grid: &Grid, phi_left: f64, phi_right: f64) -> Option<Vec<f64>> {
    let pts = grid.points();
    assert_eq!(a.len(), pts.len(), "sample/grid length mismatch");
    if a.iter().any(|&v| v <= 0.0) {
        return None;
    }
    Some(
        a.iter()
            .zip(&pts)
            .map(|(&av, p)| av * rte_mask_b(p[0], p[1]) + rte_mask_c(p[0], phi_left, phi_right))
            .collect(),
    )
}

/// Redraw limit for rejection sampling, per requested state.
const REJECTION_LIMIT_FACTOR: usize = 100;

/// Draw `count` boundary-compatible initial states for the equation.
pub fn draw_ics<R: Rng>(
    eq: &Equation,
    grid: &Grid,
    kernel: &KernelSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    eq.validate(grid)?;
    let sampler = GpSampler::new(*kernel, &grid.points())?;
    match *eq {
        Equation::ReactionDiffusion1d { .. } => Ok((0..count)
            .map(|_| make_ic_dirichlet(&sampler.sample(rng), &grid.xs))
            .collect()),
        Equation::AllenCahn1d { .. } | Equation::CahnHilliard1d { .. } => {
            Ok(sampler.sample_many(count, rng))
        }
        Equation::Rte1d {
            phi_left,
            phi_right,
            ..
        } => {
            let mut out = Vec::with_capacity(count);
            let max_attempts = REJECTION_LIMIT_FACTOR * count;
            let mut attempts = 0;
            while out.len() < count {
                if attempts >= max_attempts {
                    return Err(Error::SamplingExhausted {
                        requested: count,
                        accepted: out.len(),
                        attempts,
                    });
                }
                attempts += 1;
                let a = sampler.sample(rng);
                if let Some(f0) = make_ic_rte(&a, grid, phi_left, phi_right) {
                    out.push(f0);
                }
            }
            Ok(out)
        }
    }
}

/// Training data: input states with their reference next states, plus
/// the collocation pairs the loss evaluates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub eq: Equation,
    pub grid: Grid,
    pub kernel: KernelSpec,
    pub dt: f64,
    pub scheme: Scheme,
    /// Base draws and propagator passes the pool came from.
    pub n_base: usize,
    pub n_passes: usize,
    pub seed: u64,
    /// Selected input functions, each a full sensor vector.
    pub inputs: Vec<Vec<f64>>,
    /// Reference one-step images of `inputs` (diagnostics/supervision).
    pub targets: Vec<Vec<f64>>,
    /// Collocation pairs `(function index, grid point index)` into
    /// `inputs`; the physics-informed loss sums over exactly these.
    pub pairs: Vec<(usize, usize)>,
}

impl TrainingSet {
    pub fn n_functions(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// How `m` collocation pairs spread over a pool of `n_pool` functions
/// with `n_points` sensors each: whole functions first (≈50 of them),
/// points second. Returns `(n_functions, points_per_function)`; the
/// last selected function may carry fewer points to hit `m` exactly.
pub fn subset_shape(m: usize, n_pool: usize, n_points: usize) -> (usize, usize) {
    assert!(m >= 1, "need at least one collocation pair");
    assert!(m <= n_pool * n_points, "subset larger than the pool");
    let mut pts = m.div_ceil(50).min(n_points);
    let mut fns = m.div_ceil(pts);
    if fns > n_pool {
        fns = n_pool;
        pts = m.div_ceil(fns).min(n_points);
        fns = m.div_ceil(pts);
    }
    (fns, pts)
}

/// Generate the training set: `n_base` initial states, each advanced
/// `n_passes − 1` times so the pool holds `n_base·n_passes` functions,
/// then a seeded uniform subset of `m` (function, point) pairs.
#[allow(clippy::too_many_arguments)]
pub fn build_training_set(
    eq: &Equation,
    grid: &Grid,
    kernel: &KernelSpec,
    dt: f64,
    scheme: Scheme,
    n_base: usize,
    n_passes: usize,
    m: usize,
    seed: u64,
) -> Result<TrainingSet> {
    if n_base == 0 || n_passes == 0 {
        return Err(Error::Config("need n_base ≥ 1 and n_passes ≥ 1".into()));
    }
    let n_points = grid.n_points();
    let n_pool = n_base * n_passes;
    if m > n_pool * n_points {
        return Err(Error::Config(format!(
            "requested {m} collocation pairs but the pool holds {}",
            n_pool * n_points
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let stepper = RefStepper::new(*eq, grid.clone(), dt, scheme)?;
    let ics = draw_ics(eq, grid, kernel, n_base, &mut rng)?;

    // Pool of (state, next state): each trajectory contributes its
    // first n_passes states as inputs, each paired with its successor.
    let mut pool: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n_pool);
    for ic in ics {
        let traj = stepper.run(&ic, n_passes)?;
        for w in traj.windows(2) {
            pool.push((w[0].clone(), w[1].clone()));
        }
    }
    debug_assert_eq!(pool.len(), n_pool);

    let (n_fns, pts_per_fn) = subset_shape(m, n_pool, n_points);
    let fn_choice = sample_without_replacement(n_pool, n_fns, &mut rng);

    let mut inputs = Vec::with_capacity(n_fns);
    let mut targets = Vec::with_capacity(n_fns);
    let mut pairs = Vec::with_capacity(m);
    let mut remaining = m;
    for (slot, &pool_idx) in fn_choice.iter().enumerate() {
        let take = pts_per_fn.min(remaining);
        let pts = sample_without_replacement(n_points, take, &mut rng);
        let (input, target) = pool[pool_idx].clone();
        inputs.push(input);
        targets.push(target);
        for p in pts {
            pairs.push((slot, p));
        }
        remaining -= take;
        if remaining == 0 {
            inputs.extend(fn_choice[slot + 1..].iter().map(|&i| pool[i].0.clone()));
            targets.extend(fn_choice[slot + 1..].iter().map(|&i| pool[i].1.clone()));
            break;
        }
    }
    assert_eq!(pairs.len(), m, "pair selection must hit m exactly");

    Ok(TrainingSet {
        eq: *eq,
        grid: grid.clone(),
        kernel: *kernel,
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

/// Seeded uniform subset of size `k` from `0..n`, in draw order
/// (partial Fisher–Yates).
fn sample_without_replacement<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    assert!(k <= n, "subset larger than the population");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equation::rte_mask_a;

    #[test]
    fn kernel_values_at_reference_offsets() {
        let z = |x: f64| [x, 0.0];
        for spec in [
            KernelSpec::SqExp1d { l: 0.3 },
            KernelSpec::Periodic1d { l: 0.7 },
            KernelSpec::PhaseSpace1d { l: 0.4 },
        ] {
            assert_eq!(spec.eval(z(0.37), z(0.37)), 1.0);
        }
        // Full period returns to 1.
        let per = KernelSpec::Periodic1d { l: 0.5 };
        assert!((per.eval(z(0.0), z(1.0)) - 1.0).abs() < 1e-15);
        // Offset equal to the length scale gives e^{−1/2}.
        let se = KernelSpec::SqExp1d { l: 0.2 };
        assert!((se.eval(z(0.0), z(0.2)) - (-0.5_f64).exp()).abs() < 1e-15);
        // Phase-space kernel sees both coordinates.
        let ph = KernelSpec::PhaseSpace1d { l: 1.0 };
        assert!((ph.eval([0.0, 0.0], [0.6, 0.8]) - (-0.5_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn covariance_matches_entrywise_kernel() {
        let grid = Grid::dirichlet(64);
        let spec = KernelSpec::SqExp1d { l: 0.2 };
        let pts = grid.points();
        let k = cov_matrix(&spec, &pts);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert!((k.at(i, j) - spec.eval(pts[i], pts[j])).abs() < 1e-15);
                assert_eq!(k.at(i, j), k.at(j, i));
            }
        }
    }

    #[test]
    fn periodic_covariance_is_stationary() {
        let grid = Grid::periodic(32);
        let k = cov_matrix(&KernelSpec::Periodic1d { l: 0.5 }, &grid.points());
        for i in 0..31 {
            for j in 0..31 {
                assert!((k.at(i, j) - k.at(i + 1, j + 1)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn single_point_and_duplicate_points_factorize_with_jitter() {
        let s = GpSampler::new(KernelSpec::SqExp1d { l: 0.2 }, &[[0.3, 0.0]]).unwrap();
        assert_eq!(s.n_points, 1);
        assert!(s.jitter >= JITTER_FIRST);
        // Coincident points make the covariance singular; jitter rescues it.
        let dup = GpSampler::new(KernelSpec::SqExp1d { l: 0.2 }, &[[0.3, 0.0], [0.3, 0.0]]);
        assert!(dup.is_ok());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let grid = Grid::periodic(16);
        let s = GpSampler::new(KernelSpec::Periodic1d { l: 0.5 }, &grid.points()).unwrap();
        let a = s.sample_many(3, &mut ChaCha20Rng::seed_from_u64(7));
        let b = s.sample_many(3, &mut ChaCha20Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let c = s.sample_many(3, &mut ChaCha20Rng::seed_from_u64(8));
        assert_ne!(a, c);
    }

    #[test]
    fn monte_carlo_moments_track_the_kernel() {
        // Small-scale statistical check; the full-strength version runs
        // in the acceptance suite.
        let grid = Grid::dirichlet(16);
        let spec = KernelSpec::SqExp1d { l: 0.2 };
        let s = GpSampler::new(spec, &grid.points()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let n = 6000;
        let draws = s.sample_many(n, &mut rng);
        let pairs = [(2usize, 2usize), (3, 7), (5, 10)];
        for (i, j) in pairs {
            let mut mean_i = 0.0;
            let mut mean_j = 0.0;
            for d in &draws {
                mean_i += d[i];
                mean_j += d[j];
            }
            mean_i /= n as f64;
            mean_j /= n as f64;
            assert!(mean_i.abs() < 0.1, "mean {mean_i}");
            let cov: f64 = draws
                .iter()
                .map(|d| (d[i] - mean_i) * (d[j] - mean_j))
                .sum::<f64>()
                / (n - 1) as f64;
            let truth = spec.eval(grid.points()[i], grid.points()[j]);
            assert!(
                (cov - truth).abs() / truth.abs() < 0.1,
                "cov({i},{j}) = {cov}, kernel {truth}"
            );
        }
    }

    #[test]
    fn dirichlet_ic_vanishes_at_walls_and_recovers_amplitude() {
        let grid = Grid::dirichlet(33);
        let s = GpSampler::new(KernelSpec::SqExp1d { l: 0.2 }, &grid.points()).unwrap();
        let a = s.sample(&mut ChaCha20Rng::seed_from_u64(1));
        let ic = make_ic_dirichlet(&a, &grid.xs);
        assert_eq!(ic[0], 0.0);
        assert_eq!(ic[32], 0.0);
        for i in 1..32 {
            let mask = grid.xs[i] * (1.0 - grid.xs[i]);
            assert!((ic[i] / mask - a[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn inflow_ic_masks_and_rejection() {
        let grid = Grid::phase(9, 4);
        let n = grid.n_points();
        // a ≡ 1: accepted, equals B + C, exact at the inflow pairs.
        let f0 = make_ic_rte(&vec![1.0; n], &grid, 1.0, 0.5).unwrap();
        for (val, p) in f0.iter().zip(grid.points()) {
            let expect = rte_mask_b(p[0], p[1]) + rte_mask_c(p[0], 1.0, 0.5);
            assert!((val - expect).abs() < 1e-15);
            if p[0] == 0.0 && p[1] > 0.0 {
                assert_eq!(*val, 1.0);
            }
            if p[0] == 1.0 && p[1] < 0.0 {
                assert_eq!(*val, 0.5);
            }
            assert!(*val > 0.0);
        }
        // Any non-positive entry rejects the draw.
        let mut a = vec![1.0; n];
        a[5] = 0.0;
        assert!(make_ic_rte(&a, &grid, 1.0, 0.5).is_none());
        // The interior bump vanishes at both walls (used by the model).
        assert_eq!(rte_mask_a(0.0), 0.0);
        assert_eq!(rte_mask_a(1.0), 0.0);
    }

    #[test]
    fn rejection_sampling_eventually_errors_on_hopeless_kernels() {
        // A tiny length scale makes strict positivity essentially
        // impossible, so the redraw budget runs out.
        let eq = Equation::rte(0.5);
        let grid = Grid::phase(17, 8);
        let kernel = KernelSpec::PhaseSpace1d { l: 0.05 };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let err = draw_ics(&eq, &grid, &kernel, 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SamplingExhausted { .. }));
    }

    #[test]
    fn subset_shape_reproduces_reference_splits() {
        // 1000 pairs over a wide pool: 50 functions × 20 points.
        assert_eq!(subset_shape(1000, 2000, 64), (50, 20));
        // Full pool: no subsampling.
        assert_eq!(subset_shape(2000 * 64, 2000, 64), (2000, 64));
        // Small pools cap the function count, not the pair count.
        let (fns, pts) = subset_shape(640, 10, 64);
        assert!(fns <= 10 && fns * pts >= 640);
    }

    #[test]
    fn training_set_pairs_inputs_with_reference_steps() {
        let eq = Equation::ac(0.01, 0.0);
        let grid = Grid::periodic(24);
        let kernel = KernelSpec::Periodic1d { l: 0.5 };
        let ts = build_training_set(&eq, &grid, &kernel, 0.05, Scheme::BackwardEuler, 4, 3, 60, 11)
            .unwrap();
        assert_eq!(ts.pairs.len(), 60);
        assert_eq!(ts.inputs.len(), ts.targets.len());
        assert!(ts.inputs.len() <= 4 * 3);
        for &(fi, pi) in &ts.pairs {
            assert!(fi < ts.inputs.len() && pi < grid.n_points());
        }
        // Each target is exactly one reference step from its input.
        let stepper = RefStepper::new(eq, grid.clone(), 0.05, Scheme::BackwardEuler).unwrap();
        for (f, g) in ts.inputs.iter().zip(&ts.targets) {
            let step = stepper.step(f).unwrap();
            for (a, b) in step.iter().zip(g) {
                assert!((a - b).abs() < 1e-13);
            }
        }
        // Same seed, same set — bitwise.
        let ts2 = build_training_set(&eq, &grid, &kernel, 0.05, Scheme::BackwardEuler, 4, 3, 60, 11)
            .unwrap();
        assert_eq!(ts, ts2);
    }

    #[test]
    fn training_set_collocation_points_are_distinct_per_function() {
        let eq = Equation::rd(0.05, 0.0);
        let grid = Grid::dirichlet(17);
        let kernel = KernelSpec::SqExp1d { l: 0.2 };
        let ts = build_training_set(&eq, &grid, &kernel, 0.1, Scheme::CrankNicolson, 3, 2, 48, 5)
            .unwrap();
        use std::collections::HashSet;
        let mut per_fn: std::collections::HashMap<usize, HashSet<usize>> = Default::default();
        for &(fi, pi) in &ts.pairs {
            assert!(per_fn.entry(fi).or_default().insert(pi), "duplicate point");
        }
    }
}
