//! Browser bindings for the propagator playground.
//!
//! Three JSON-string entry points back a single static page: draw
//! random initial conditions from a Gaussian field, evolve one under
//! the implicit reference solver, and train a small operator network
//! whose frozen and refitted rollouts are compared against the
//! reference. Each function takes a JSON request and returns a JSON
//! response; failures come back as `{"error": "..."}` so the page
//! never traps. Everything is seeded, so a repeated request reproduces
//! its response exactly.

use propnet::adam::TrainSchedule;
use propnet::deeponet::{BoundaryMode, DeepONetModel};
use propnet::equation::{Equation, Grid};
use propnet::grf::{build_training_set, draw_ics, GpSampler, KernelSpec};
use propnet::loss::StepLossSpec;
use propnet::metrics::error_report;
use propnet::mlp::Activation;
use propnet::rollout::{rollout_reference, rollout_tl, rollout_vanilla, Trajectory};
use propnet::stepper::{RefStepper, Scheme};
use propnet::train::train_deeponet;
use propnet::transfer::TlConfig;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Draw random fields from a covariance kernel.
///
/// Request: `{"kernel": "periodic"|"sq_exp", "l": 0.5, "n_x": 64,
/// "count": 3, "seed": 1}` (all optional). Response: `{"xs": [...],
/// "fields": [[...], ...]}`.
#[wasm_bindgen]
pub fn sample_fields(request: &str) -> String {
    api(request, sample_fields_impl)
}

/// Evolve one random initial condition with the implicit solver.
///
/// Request: `{"eq": ..., "scheme": "be"|"cn", "n_x": 64, "dt": 0.05,
/// "steps": 200, "seed": 1, "frame_stride": 2}`. The `eq` field is
/// either a shorthand string (`"rd"`, `"ac"`, `"ch"`) or a full object
/// like `{"kind": "allen_cahn1d", "d1": 0.001, "d2": 0.1}`. Response
/// carries the sampled frames and the discrete norm after every step.
#[wasm_bindgen]
pub fn evolve_reference(request: &str) -> String {
    api(request, evolve_reference_impl)
}

/// Train a small one-step operator network, then roll it out frozen
/// and with per-step refits, against the reference trajectory.
///
/// Request: `{"eq": ..., "iters": 800, "steps": 60, "seed": 0}`.
/// Response carries per-step relative errors of both rollouts, the
/// final profiles, and the training report.
#[wasm_bindgen]
pub fn train_and_compare(request: &str) -> String {
    api(request, train_and_compare_impl)
}

fn api(request: &str, f: impl FnOnce(&Value) -> Result<Value, String>) -> String {
    let req: Value = if request.trim().is_empty() {
        json!({})
    } else {
        match serde_json::from_str(request) {
            Ok(v) => v,
            Err(e) => return json!({ "error": format!("bad request JSON: {e}") }).to_string(),
        }
    };
    match f(&req) {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

// --------------------------------------------------------------------
// Request parsing

fn get_u64(req: &Value, key: &str, default: u64) -> u64 {
    req.get(key).and_then(Value::as_u64).unwrap_or(default)
}

fn get_usize(req: &Value, key: &str, default: usize, lo: usize, hi: usize) -> Result<usize, String> {
    let v = req
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .unwrap_or(default);
    if (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{key} must lie in [{lo}, {hi}], got {v}"))
    }
}

fn get_f64(req: &Value, key: &str, default: f64, lo: f64, hi: f64) -> Result<f64, String> {
    let v = req.get(key).and_then(Value::as_f64).unwrap_or(default);
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{key} must lie in [{lo}, {hi}], got {v}"))
    }
}

/// `eq` as a shorthand string with stock coefficients, or a full
/// tagged object. The playground draws one-dimensional states, so the
/// kinetic kind is not offered here.
fn parse_equation(req: &Value) -> Result<Equation, String> {
    let eq = match req.get("eq") {
        None => Equation::rd(0.001, 0.001),
        Some(Value::String(s)) => match s.as_str() {
            "rd" => Equation::rd(0.001, 0.001),
            "ac" => Equation::ac(1e-3, 0.1),
            "ch" => Equation::ch(1e-3, 1e-3),
            other => return Err(format!("unknown equation shorthand {other:?}; use rd, ac or ch")),
        },
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| format!("bad eq object: {e}"))?,
    };
    if matches!(eq, Equation::Rte1d { .. }) {
        return Err("the playground draws one-dimensional states; pick rd, ac or ch".into());
    }
    Ok(eq)
}

fn parse_scheme(req: &Value) -> Result<Scheme, String> {
    match req.get("scheme").and_then(Value::as_str).unwrap_or("be") {
        "be" | "backward_euler" => Ok(Scheme::BackwardEuler),
        "cn" | "crank_nicolson" => Ok(Scheme::CrankNicolson),
        other => Err(format!("unknown scheme {other:?}; use be or cn")),
    }
}

fn norm2(f: &[f64], h: f64) -> f64 {
    (f.iter().map(|v| v * v).sum::<f64>() * h).sqrt()
}

// --------------------------------------------------------------------
// Operations

fn sample_fields_impl(req: &Value) -> Result<Value, String> {
    let n_x = get_usize(req, "n_x", 64, 8, 256)?;
    let count = get_usize(req, "count", 3, 1, 16)?;
    let seed = get_u64(req, "seed", 1);
    let (kernel, grid) = match req.get("kernel").and_then(Value::as_str).unwrap_or("periodic") {
        "periodic" => (
            KernelSpec::Periodic1d {
                l: get_f64(req, "l", 0.5, 0.05, 5.0)?,
            },
            Grid::periodic(n_x),
        ),
        "sq_exp" => (
            KernelSpec::SqExp1d {
                l: get_f64(req, "l", 0.2, 0.05, 5.0)?,
            },
            Grid::dirichlet(n_x),
        ),
        other => return Err(format!("unknown kernel {other:?}; use periodic or sq_exp")),
    };
    let sampler = GpSampler::new(kernel, &grid.points()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let fields = sampler.sample_many(count, &mut rng);
    Ok(json!({ "xs": grid.xs, "fields": fields }))
}

fn evolve_reference_impl(req: &Value) -> Result<Value, String> {
    let eq = parse_equation(req)?;
    let scheme = parse_scheme(req)?;
    let n_x = get_usize(req, "n_x", 64, 8, 256)?;
    let dt = get_f64(req, "dt", 0.05, 1e-4, 1.0)?;
    let steps = get_usize(req, "steps", 200, 1, 2000)?;
    let seed = get_u64(req, "seed", 1);
    let stride = get_usize(req, "frame_stride", (steps / 100).max(1), 1, steps)?;

    let grid = match eq.boundary() {
        propnet::equation::Boundary::Dirichlet0 => Grid::dirichlet(n_x),
        _ => Grid::periodic(n_x),
    };
    let kernel = KernelSpec::default_for(eq.boundary());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let f0 = draw_ics(&eq, &grid, &kernel, 1, &mut rng)
        .map_err(|e| e.to_string())?
        .remove(0);

    let stepper = RefStepper::new(eq, grid.clone(), dt, scheme).map_err(|e| e.to_string())?;
    let mut frames = vec![f0.clone()];
    let mut frame_times = vec![0.0];
    let mut norms = vec![norm2(&f0, grid.h)];
    let mut f = f0;
    for step in 1..=steps {
        f = stepper.step(&f).map_err(|e| e.to_string())?;
        norms.push(norm2(&f, grid.h));
        if step % stride == 0 || step == steps {
            frames.push(f.clone());
            frame_times.push(step as f64 * dt);
        }
    }
    Ok(json!({
        "xs": grid.xs,
        "dt": dt,
        "frames": frames,
        "frame_times": frame_times,
        "norms": norms,
    }))
}

fn train_and_compare_impl(req: &Value) -> Result<Value, String> {
    let eq = parse_equation(req)?;
    let seed = get_u64(req, "seed", 0);
    let iters = get_usize(req, "iters", 800, 20, 5000)?;
    let steps = get_usize(req, "steps", 60, 5, 300)?;

    // Fixed small problem so the call returns in a couple of seconds.
    let n_x = 32;
    let dt = 0.05;
    let scheme = Scheme::BackwardEuler;
    let grid = match eq.boundary() {
        propnet::equation::Boundary::Dirichlet0 => Grid::dirichlet(n_x),
        _ => Grid::periodic(n_x),
    };
    let kernel = KernelSpec::default_for(eq.boundary());

    let set = build_training_set(&eq, &grid, &kernel, dt, scheme, 30, 5, 150, seed)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    let mut model = DeepONetModel::init(
        grid.n_points(),
        12,
        8,
        16,
        3,
        Activation::Tanh,
        BoundaryMode::from_boundary(grid.boundary),
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let spec = StepLossSpec {
        eq: &eq,
        grid: &grid,
        dt,
        scheme,
        boundary_penalty: false,
    };
    let sched = TrainSchedule {
        max_iters: iters,
        batch: 60,
        ..TrainSchedule::default()
    };
    let report = train_deeponet(
        &mut model,
        &spec,
        &set.inputs,
        &set.pairs,
        &sched,
        seed.wrapping_add(2),
    )
    .map_err(|e| e.to_string())?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(3));
    let f0 = draw_ics(&eq, &grid, &kernel, 1, &mut rng)
        .map_err(|e| e.to_string())?
        .remove(0);
    let stepper = RefStepper::new(eq, grid.clone(), dt, scheme).map_err(|e| e.to_string())?;
    let reference = rollout_reference(&stepper, &f0, steps, dt).map_err(|e| e.to_string())?;
    let vanilla = rollout_vanilla(&model, &grid, &f0, steps, dt).map_err(|e| e.to_string())?;
    let tl_cfg = TlConfig {
        n_c: 16,
        ..TlConfig::default()
    };
    let (tl, prop) = rollout_tl(&model, &eq, &grid, &f0, steps, dt, scheme, &tl_cfg, 1)
        .map_err(|e| e.to_string())?;

    let against = |traj: &Trajectory| error_report(std::slice::from_ref(traj), std::slice::from_ref(&reference));
    let rep_vanilla = against(&vanilla).map_err(|e| e.to_string())?;
    let rep_tl = against(&tl).map_err(|e| e.to_string())?;

    Ok(json!({
        "xs": grid.xs,
        "dt": dt,
        "training": {
            "iterations": report.iterations,
            "final_loss": report.final_loss,
            "converged": report.converged,
        },
        "vanilla": { "per_step": rep_vanilla.per_step, "aggregate": rep_vanilla.aggregate },
        "tl": {
            "per_step": rep_tl.per_step,
            "aggregate": rep_tl.aggregate,
            "refits": prop.weight_history.len(),
            "fallbacks": prop.fallbacks.len(),
        },
        "final_reference": reference.states.last(),
        "final_vanilla": vanilla.states.last(),
        "final_tl": tl.states.last(),
    }))
}

// --------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(&s).expect("response is JSON")
    }

    #[test]
    fn sampling_is_shaped_and_deterministic() {
        let a = sample_fields(r#"{"kernel": "sq_exp", "n_x": 32, "count": 2, "seed": 9}"#);
        let b = sample_fields(r#"{"kernel": "sq_exp", "n_x": 32, "count": 2, "seed": 9}"#);
        assert_eq!(a, b);
        let v = parse(&a);
        assert!(v.get("error").is_none(), "{a}");
        assert_eq!(v["xs"].as_array().unwrap().len(), 32);
        assert_eq!(v["fields"].as_array().unwrap().len(), 2);
        assert_eq!(v["fields"][0].as_array().unwrap().len(), 32);
    }

    #[test]
    fn empty_request_uses_defaults() {
        let v = parse(&sample_fields(""));
        assert_eq!(v["fields"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn evolution_reports_non_increasing_norms_for_pure_diffusion() {
        let v = parse(&evolve_reference(
            r#"{"eq": {"kind": "reaction_diffusion1d", "d": 0.05, "k": 0.0},
                "n_x": 48, "dt": 0.05, "steps": 100, "seed": 3}"#,
        ));
        assert!(v.get("error").is_none(), "{v}");
        let norms: Vec<f64> = v["norms"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        assert_eq!(norms.len(), 101);
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "norm grew: {} → {}", w[0], w[1]);
        }
        let frames = v["frames"].as_array().unwrap();
        assert_eq!(
            frames.len(),
            v["frame_times"].as_array().unwrap().len(),
            "one time per frame"
        );
    }

    #[test]
    fn kinetic_kind_is_rejected_with_an_error_payload() {
        let v = parse(&evolve_reference(
            r#"{"eq": {"kind": "rte1d", "eps": 1.0, "phi_left": 1.0, "phi_right": 0.5}}"#,
        ));
        assert!(v["error"].as_str().unwrap().contains("one-dimensional"));
    }

    #[test]
    fn bad_json_is_reported_not_panicked() {
        let v = parse(&sample_fields("{not json"));
        assert!(v["error"].as_str().unwrap().contains("bad request JSON"));
    }

    #[test]
    fn short_training_run_compares_rollouts() {
        let v = parse(&train_and_compare(
            r#"{"eq": "rd", "iters": 150, "steps": 20, "seed": 4}"#,
        ));
        assert!(v.get("error").is_none(), "{v}");
        let agg_v = v["vanilla"]["aggregate"].as_f64().unwrap();
        let agg_tl = v["tl"]["aggregate"].as_f64().unwrap();
        assert!(agg_v.is_finite() && agg_tl.is_finite());
        // The per-step refit corrects the undertrained network.
        assert!(
            agg_tl < agg_v,
            "refitted aggregate {agg_tl} should beat frozen {agg_v}"
        );
        assert_eq!(v["tl"]["per_step"].as_array().unwrap().len(), 20);
        assert_eq!(v["final_reference"].as_array().unwrap().len(), 32);
    }
}
