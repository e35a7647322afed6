//! End-to-end commands: each function backs one CLI subcommand.
//!
//! Every command takes a validated [`RunConfig`] and an output
//! directory, reads or writes the standard artifact files there, and
//! returns the JSON summary it also writes to `summary_<command>.json`.
//! The artifact names are fixed so that the commands compose: `train`
//! picks up `gen-data`'s dataset, `rollout` and `eval` pick up
//! `train`'s checkpoint. Artifacts found on disk are checked against
//! the configuration so a stale file from a different setup fails
//! loudly instead of producing nonsense.
//!
//! Everything here is deterministic given the configuration: the CSV
//! outputs of two runs with the same config are byte-identical (the
//! JSON summaries additionally record wall-clock runtime).

use crate::config::RunConfig;
use crate::deeponet::{BoundaryMode, ContModel, DeepONetModel, RteOperatorModel};
use crate::equation::{Equation, Grid};
use crate::error::{Error, Result};
use crate::grf::{build_training_set, draw_ics, TrainingSet};
use crate::harness::{bound_check, general_bound, BoundHarnessConfig};
use crate::io::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_trajectory,
    write_error_csv, write_study_csv, write_training_log, Checkpoint, ModelKind,
};
use crate::loss::StepLossSpec;
use crate::metrics::{error_report, ErrorReport};
use crate::rollout::{
    rollout, rollout_reference, rollout_tl, rollout_vanilla, KineticProp, Trajectory,
};
use crate::stepper::{dissipativity_check, RefStepper};
use crate::study::{cn_order_study, default_study_problem};
use crate::train::{train_cont, train_deeponet, train_rte};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};
use std::path::Path;
use std::time::Instant;

/// Training-set artifact written by `gen-data`.
pub const DATASET_FILE: &str = "dataset.bin";
/// Model checkpoint written by `train`.
pub const CHECKPOINT_FILE: &str = "model.bin";
/// Training-loss log written by `train`.
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
/// Refinement-study table written by `cn-study`.
pub const STUDY_FILE: &str = "study.csv";

/// Which propagator `rollout` drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// The implicit solver itself.
    Reference,
    /// The trained network with frozen weights.
    Vanilla,
    /// The trained network with the per-step last-layer refit.
    Tl,
}

impl RolloutMode {
    pub fn label(self) -> &'static str {
        match self {
            RolloutMode::Reference => "reference",
            RolloutMode::Vanilla => "vanilla",
            RolloutMode::Tl => "tl",
        }
    }
}

/// Trajectory artifact written by `rollout` for a given mode.
pub fn trajectory_file(mode: RolloutMode) -> &'static str {
    match mode {
        RolloutMode::Reference => "traj_reference.bin",
        RolloutMode::Vanilla => "traj_vanilla.bin",
        RolloutMode::Tl => "traj_tl.bin",
    }
}

/// Which training objective `train` minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// One-step residual of the implicit scheme (the default).
    Step,
    /// Whole-horizon space–time residual on `[0, t0]`.
    Cont,
}

impl LossMode {
    pub fn label(self) -> &'static str {
        match self {
            LossMode::Step => "step",
            LossMode::Cont => "cont",
        }
    }
}

// ---------------------------------------------------------------------
// Shared plumbing.

/// Stamps `command`, `runtime_seconds`, and the config echo onto a
/// summary object, writes it to `summary_<command>.json`, and returns
/// it.
fn write_summary(
    out_dir: &Path,
    command: &str,
    mut body: Value,
    started: Instant,
    cfg: &RunConfig,
) -> Result<Value> {
    let obj = body.as_object_mut().expect("summary body must be a JSON object");
    obj.insert("command".into(), json!(command));
    obj.insert(
        "runtime_seconds".into(),
        json!(started.elapsed().as_secs_f64()),
    );
    obj.insert("config".into(), serde_json::to_value(cfg)?);
    let path = out_dir.join(format!("summary_{command}.json"));
    let mut text = serde_json::to_string_pretty(&body)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(body)
}

/// Loads the dataset from `out_dir`, or generates and saves one when
/// the file does not exist yet. A file generated for a different setup
/// is rejected rather than silently reused.
fn obtain_dataset(cfg: &RunConfig, grid: &Grid, out_dir: &Path) -> Result<TrainingSet> {
    let path = out_dir.join(DATASET_FILE);
    if path.exists() {
        let set = load_dataset(&path)?;
        if set.eq != cfg.eq || set.grid != *grid || set.dt != cfg.dt || set.scheme != cfg.scheme {
            return Err(Error::Config(format!(
                "existing {DATASET_FILE} belongs to a different setup; \
                 delete it or use a fresh output directory"
            )));
        }
        Ok(set)
    } else {
        let set = build_training_set(
            &cfg.eq,
            grid,
            &cfg.kernel(),
            cfg.dt,
            cfg.scheme,
            cfg.data.n_b,
            cfg.data.n_t,
            cfg.data.m,
            cfg.seed_data(),
        )?;
        save_dataset(&path, &set)?;
        Ok(set)
    }
}

/// Loads the checkpoint from `out_dir` and checks it matches the
/// configured problem.
fn obtain_checkpoint(cfg: &RunConfig, grid: &Grid, out_dir: &Path) -> Result<Checkpoint> {
    let path = out_dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found in {}; run the train command first",
            CHECKPOINT_FILE,
            out_dir.display()
        )));
    }
    let ckpt = load_checkpoint(&path)?;
    if ckpt.eq != cfg.eq || ckpt.grid != *grid || ckpt.dt != cfg.dt || ckpt.scheme != cfg.scheme {
        return Err(Error::Config(format!(
            "existing {CHECKPOINT_FILE} belongs to a different setup; \
             delete it or use a fresh output directory"
        )));
    }
    Ok(ckpt)
}

/// Draws the deterministic test ensemble (the evaluation stream is
/// independent of the data/init/train streams).
fn test_ensemble(cfg: &RunConfig, grid: &Grid, count: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed_test());
    draw_ics(&cfg.eq, grid, &cfg.kernel(), count, &mut rng)
}

fn euclid_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn report_json(rep: &ErrorReport) -> Value {
    json!({
        "aggregate": rep.aggregate,
        "final_step": rep.per_step.last().copied(),
        "ensemble_size": rep.ensemble_size,
        "steps": rep.per_step.len(),
    })
}

// ---------------------------------------------------------------------
// Commands.

/// `gen-data`: builds the collocation training set and writes
/// `dataset.bin`.
pub fn run_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<Value> {
    let started = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let grid = cfg.build_grid()?;
    let set = build_training_set(
        &cfg.eq,
        &grid,
        &cfg.kernel(),
        cfg.dt,
        cfg.scheme,
        cfg.data.n_b,
        cfg.data.n_t,
        cfg.data.m,
        cfg.seed_data(),
    )?;
    save_dataset(&out_dir.join(DATASET_FILE), &set)?;
    write_summary(
        out_dir,
        "gen-data",
        json!({
            "dataset": DATASET_FILE,
            "n_functions": set.inputs.len(),
            "n_pairs": set.pairs.len(),
        }),
        started,
        cfg,
    )
}

/// `train`: initializes the model for the configured equation, trains
/// it on the dataset in `out_dir` (generating one first if absent),
/// and writes `model.bin` plus `train_log.csv`.
pub fn run_train(cfg: &RunConfig, loss: LossMode, out_dir: &Path) -> Result<Value> {
    let started = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let grid = cfg.build_grid()?;
    let set = obtain_dataset(cfg, &grid, out_dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed_init());
    let m = &cfg.model;

    let (model, outcome) = match (&cfg.eq, loss) {
        (&Equation::Rte1d { eps, phi_left, phi_right }, LossMode::Step) => {
            let mut net = RteOperatorModel::init(
                &grid,
                m.p,
                m.q,
                m.width,
                m.depth,
                m.activation,
                eps,
                phi_left,
                phi_right,
                &mut rng,
            )?;
            let outcome = train_rte(
                &mut net,
                &cfg.eq,
                &grid,
                cfg.dt,
                &set.inputs,
                &set.pairs,
                &cfg.schedule,
                cfg.seed_train(),
            );
            (ModelKind::Kinetic(net), outcome)
        }
        (&Equation::ReactionDiffusion1d { .. }, LossMode::Cont) => {
            let mut net = ContModel::init(
                grid.n_points(),
                m.p,
                m.q,
                m.width,
                m.depth,
                m.activation,
                BoundaryMode::from_boundary(cfg.eq.boundary()),
                cfg.cont.t0,
                &mut rng,
            )?;
            let outcome = train_cont(
                &mut net,
                &cfg.eq,
                &grid,
                cfg.cont.n_time_nodes,
                &set.inputs,
                &set.pairs,
                &cfg.schedule,
                cfg.seed_train(),
            );
            (ModelKind::Cont(net), outcome)
        }
        (_, LossMode::Cont) => {
            return Err(Error::Config(
                "the whole-horizon loss is only defined for the reaction–diffusion problem"
                    .into(),
            ));
        }
        (_, LossMode::Step) => {
            let mut net = DeepONetModel::init(
                grid.n_points(),
                m.p,
                m.q,
                m.width,
                m.depth,
                m.activation,
                BoundaryMode::from_boundary(cfg.eq.boundary()),
                &mut rng,
            )?;
            let spec = StepLossSpec {
                eq: &cfg.eq,
                grid: &grid,
                dt: cfg.dt,
                scheme: cfg.scheme,
                boundary_penalty: cfg.boundary_penalty,
            };
            let outcome = train_deeponet(
                &mut net,
                &spec,
                &set.inputs,
                &set.pairs,
                &cfg.schedule,
                cfg.seed_train(),
            );
            (ModelKind::Step(net), outcome)
        }
    };

    let report = match outcome {
        Ok(r) => r,
        Err(Error::Diverged {
            iteration,
            loss,
            history,
        }) => {
            // Keep the partial log around for post-mortems.
            let _ = write_training_log(&out_dir.join(TRAIN_LOG_FILE), &history);
            return Err(Error::Diverged {
                iteration,
                loss,
                history,
            });
        }
        Err(e) => return Err(e),
    };

    save_checkpoint(
        &out_dir.join(CHECKPOINT_FILE),
        &Checkpoint {
            eq: cfg.eq,
            grid: grid.clone(),
            dt: cfg.dt,
            scheme: cfg.scheme,
            model,
        },
    )?;
    write_training_log(&out_dir.join(TRAIN_LOG_FILE), &report.history)?;
    write_summary(
        out_dir,
        "train",
        json!({
            "checkpoint": CHECKPOINT_FILE,
            "log": TRAIN_LOG_FILE,
            "loss_mode": loss.label(),
            "iterations": report.iterations,
            "final_loss": report.final_loss,
            "converged": report.converged,
        }),
        started,
        cfg,
    )
}

/// `rollout`: drives one propagator from a fresh test initial
/// condition for the configured horizon and writes the trajectory.
pub fn run_rollout(cfg: &RunConfig, mode: RolloutMode, out_dir: &Path) -> Result<Value> {
    let started = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let grid = cfg.build_grid()?;
    let f0 = test_ensemble(cfg, &grid, 1)?.pop().unwrap();
    let k = cfg.rollout.k;

    let mut extra = serde_json::Map::new();
    let traj = match mode {
        RolloutMode::Reference => {
            let stepper = RefStepper::new(cfg.eq, grid.clone(), cfg.dt, cfg.scheme)?;
            rollout_reference(&stepper, &f0, k, cfg.dt)?
        }
        RolloutMode::Vanilla => {
            let ckpt = obtain_checkpoint(cfg, &grid, out_dir)?;
            match &ckpt.model {
                ModelKind::Step(m) => rollout_vanilla(m, &grid, &f0, k, cfg.dt)?,
                ModelKind::Kinetic(m) => {
                    let mut prop = KineticProp { model: m, grid: &grid };
                    rollout(&mut prop, &f0, k, cfg.dt)?
                }
                ModelKind::Cont(_) => {
                    return Err(Error::Config(
                        "the whole-horizon model is not a step propagator; \
                         use the eval command to measure it"
                            .into(),
                    ));
                }
            }
        }
        RolloutMode::Tl => {
            let ckpt = obtain_checkpoint(cfg, &grid, out_dir)?;
            match ckpt.model {
                ModelKind::Step(m) => {
                    let (traj, prop) = rollout_tl(
                        &m,
                        &cfg.eq,
                        &grid,
                        &f0,
                        k,
                        cfg.dt,
                        cfg.scheme,
                        &cfg.tl,
                        cfg.rollout.tl_every,
                    )?;
                    extra.insert("refits".into(), json!(prop.weight_history.len()));
                    extra.insert("fallbacks".into(), json!(prop.fallbacks.len()));
                    traj
                }
                _ => {
                    return Err(Error::Config(
                        "the last-layer refit applies to the single-step operator model"
                            .into(),
                    ));
                }
            }
        }
    };

    save_trajectory(
        &out_dir.join(trajectory_file(mode)),
        &cfg.eq,
        &grid,
        cfg.scheme,
        &traj,
    )?;
    let mut body = json!({
        "mode": mode.label(),
        "trajectory": trajectory_file(mode),
        "steps": traj.n_steps(),
        "final_state_norm": euclid_norm(traj.states.last().unwrap()),
    });
    body.as_object_mut().unwrap().extend(extra);
    write_summary(out_dir, "rollout", body, started, cfg)
}

/// `eval`: rolls the reference solver and the trained model over a
/// fresh test ensemble and writes per-step relative-error tables.
///
/// For the single-step operator both the frozen and the refitted
/// rollouts are measured (`errors_vanilla.csv`, `errors_tl.csv`); the
/// kinetic composite has no refit and gets the frozen rollout only;
/// the whole-horizon model is compared on `[0, t0]` directly
/// (`errors_cont.csv`).
pub fn run_eval(cfg: &RunConfig, out_dir: &Path) -> Result<Value> {
    let started = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let grid = cfg.build_grid()?;
    let ckpt = obtain_checkpoint(cfg, &grid, out_dir)?;
    let ics = test_ensemble(cfg, &grid, cfg.eval.n_e)?;

    // The whole-horizon model only reaches t0; everything else rolls
    // the full configured horizon.
    let k = match &ckpt.model {
        ModelKind::Cont(m) => {
            let within = ((m.t0 / cfg.dt) * (1.0 + 1e-12)).floor() as usize;
            let k = cfg.rollout.k.min(within);
            if k == 0 {
                return Err(Error::Config(format!(
                    "horizon t0 = {} is shorter than one step dt = {}",
                    m.t0, cfg.dt
                )));
            }
            k
        }
        _ => cfg.rollout.k,
    };

    let stepper = RefStepper::new(cfg.eq, grid.clone(), cfg.dt, cfg.scheme)?;
    let reference: Vec<Trajectory> = ics
        .iter()
        .map(|f0| rollout_reference(&stepper, f0, k, cfg.dt))
        .collect::<Result<_>>()?;

    let mut body = serde_json::Map::new();
    body.insert("ensemble_size".into(), json!(cfg.eval.n_e));
    body.insert("horizon_steps".into(), json!(k));

    match &ckpt.model {
        ModelKind::Step(m) => {
            let vanilla: Vec<Trajectory> = ics
                .iter()
                .map(|f0| rollout_vanilla(m, &grid, f0, k, cfg.dt))
                .collect::<Result<_>>()?;
            let rep_v = error_report(&vanilla, &reference)?;
            write_error_csv(&out_dir.join("errors_vanilla.csv"), &rep_v)?;

            let mut refits = 0usize;
            let mut fallbacks = 0usize;
            let mut tl = Vec::with_capacity(ics.len());
            for f0 in &ics {
                let (traj, prop) = rollout_tl(
                    m,
                    &cfg.eq,
                    &grid,
                    f0,
                    k,
                    cfg.dt,
                    cfg.scheme,
                    &cfg.tl,
                    cfg.rollout.tl_every,
                )?;
                refits += prop.weight_history.len();
                fallbacks += prop.fallbacks.len();
                tl.push(traj);
            }
            let rep_t = error_report(&tl, &reference)?;
            write_error_csv(&out_dir.join("errors_tl.csv"), &rep_t)?;

            body.insert("vanilla".into(), report_json(&rep_v));
            body.insert("tl".into(), report_json(&rep_t));
            body.insert("refits".into(), json!(refits));
            body.insert("fallbacks".into(), json!(fallbacks));
            body.insert(
                "reports".into(),
                json!({"vanilla": "errors_vanilla.csv", "tl": "errors_tl.csv"}),
            );
        }
        ModelKind::Kinetic(m) => {
            let vanilla: Vec<Trajectory> = ics
                .iter()
                .map(|f0| {
                    let mut prop = KineticProp { model: m, grid: &grid };
                    rollout(&mut prop, f0, k, cfg.dt)
                })
                .collect::<Result<_>>()?;
            let rep_v = error_report(&vanilla, &reference)?;
            write_error_csv(&out_dir.join("errors_vanilla.csv"), &rep_v)?;
            body.insert("vanilla".into(), report_json(&rep_v));
            body.insert(
                "reports".into(),
                json!({"vanilla": "errors_vanilla.csv"}),
            );
        }
        ModelKind::Cont(m) => {
            let pred: Vec<Trajectory> = ics
                .iter()
                .map(|f0| {
                    let mut states = Vec::with_capacity(k + 1);
                    states.push(f0.clone());
                    for n in 1..=k {
                        states.push(m.eval_grid(f0, n as f64 * cfg.dt, &grid)?);
                    }
                    Ok(Trajectory { states, dt: cfg.dt })
                })
                .collect::<Result<_>>()?;
            let rep_c = error_report(&pred, &reference)?;
            write_error_csv(&out_dir.join("errors_cont.csv"), &rep_c)?;
            body.insert("cont".into(), report_json(&rep_c));
            body.insert("reports".into(), json!({"cont": "errors_cont.csv"}));
        }
    }

    write_summary(out_dir, "eval", Value::Object(body), started, cfg)
}

/// `bound-check`: runs the randomized error-accumulation suite and
/// compares the observed worst deviation per trial against the a
/// priori bounds.
pub fn run_bound_check(cfg: &RunConfig, out_dir: &Path) -> Result<Value> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let b = &cfg.bound;
    let rep = bound_check(&BoundHarnessConfig {
        n: b.n,
        eta: b.eta,
        delta: b.delta,
        k: b.k,
        trials: b.trials,
        seed: cfg.seed,
    })?;
    let contraction_value = if rep.contraction_bound_applies {
        json!(crate::harness::contraction_bound(b.delta, b.eta, b.k))
    } else {
        Value::Null
    };
    write_summary(
        out_dir,
        "bound-check",
        json!({
            "trials": rep.trials,
            "max_observed": rep.max_observed,
            "general": {
                "bound": general_bound(b.delta, b.k),
                "violations": rep.general_violations,
                "worst_ratio": rep.worst_general_ratio,
            },
            "contraction": {
                "applies": rep.contraction_bound_applies,
                "bound": contraction_value,
                "violations": rep.contraction_violations,
                "worst_ratio": rep.worst_contraction_ratio,
            },
        }),
        started,
        cfg,
    )
}

/// `cn-study`: time-refinement study of the trapezoidal scheme on the
/// configured reaction–diffusion problem; writes `study.csv` and
/// reports the observed order.
pub fn run_cn_study(cfg: &RunConfig, out_dir: &Path) -> Result<Value> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    if !matches!(cfg.eq, Equation::ReactionDiffusion1d { .. }) {
        return Err(Error::Config(
            "the time-refinement study is defined on the reaction–diffusion problem".into(),
        ));
    }
    let grid = Grid::dirichlet(cfg.grid.n_x);
    // Stock smooth two-mode profile and step ladder; the coefficients
    // come from the configured equation.
    let (_, _, _, dts, t_end) = default_study_problem();
    let f0: Vec<f64> = grid
        .xs
        .iter()
        .map(|&x| {
            0.5 * (std::f64::consts::PI * x).sin() + 0.2 * (2.0 * std::f64::consts::PI * x).sin()
        })
        .collect();
    let study = cn_order_study(cfg.eq, &grid, &f0, &dts, t_end)?;
    write_study_csv(&out_dir.join(STUDY_FILE), &study)?;
    write_summary(
        out_dir,
        "cn-study",
        json!({
            "csv": STUDY_FILE,
            "dts": study.dts,
            "errors": study.errors,
            "slope": study.slope,
            "t_end": t_end,
        }),
        started,
        cfg,
    )
}

/// `dissipativity`: runs the implicit solver over a test ensemble and
/// checks the discrete norms never increase from step to step.
pub fn run_dissipativity(cfg: &RunConfig, out_dir: &Path) -> Result<Value> {
    let started = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let grid = cfg.build_grid()?;
    let ics = test_ensemble(cfg, &grid, cfg.eval.n_e)?;
    let n_steps = cfg.rollout.k;

    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    for f0 in &ics {
        let norms = dissipativity_check(&cfg.eq, &grid, cfg.dt, cfg.scheme, f0, n_steps)?;
        for w in norms.windows(2) {
            if w[0] > 0.0 {
                worst_ratio = worst_ratio.max(w[1] / w[0]);
                if w[1] > w[0] * (1.0 + 1e-12) {
                    violations += 1;
                }
            } else if w[1] > 0.0 {
                violations += 1;
            }
        }
    }
    write_summary(
        out_dir,
        "dissipativity",
        json!({
            "trajectories": ics.len(),
            "steps": n_steps,
            "non_increasing": violations == 0,
            "violations": violations,
            "worst_step_ratio": worst_ratio,
        }),
        started,
        cfg,
    )
}
