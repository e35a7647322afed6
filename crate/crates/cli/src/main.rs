//! Command-line driver.
//!
//! Every subcommand reads an optional JSON configuration (defaults
//! apply field-by-field when it is absent), runs one pipeline command
//! against `--out-dir`, prints the JSON summary to stdout, and exits
//! non-zero on failure. With fixed seeds the full chain
//! `gen-data → train → rollout → eval` is bitwise reproducible.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use propnet::config::RunConfig;
use propnet::equation::Equation;
use propnet::pipeline::{
    run_bound_check, run_cn_study, run_dissipativity, run_eval, run_gen_data, run_rollout,
    run_train, LossMode, RolloutMode,
};
use propnet::stepper::Scheme;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "propnet",
    version,
    about = "Learned one-step propagators for dissipative PDEs with per-step last-layer refits"
)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides the configuration's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for artifacts (datasets, checkpoints, trajectories,
    /// CSV reports, JSON summaries).
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw random initial conditions and build the collocation
    /// training set (writes dataset.bin).
    GenData,
    /// Train the operator network on the physics-informed loss
    /// (writes model.bin and train_log.csv).
    Train(TrainArgs),
    /// Roll a propagator forward from a fresh test initial condition
    /// (writes traj_<mode>.bin).
    Rollout(RolloutArgs),
    /// Measure per-step and aggregate relative errors of the trained
    /// model against the implicit solver over a test ensemble.
    Eval,
    /// Random-matrix suite comparing observed error accumulation over
    /// K composed steps against the a priori bounds.
    BoundCheck,
    /// Time-refinement order study of the trapezoidal scheme on the
    /// configured reaction-diffusion problem (writes study.csv).
    CnStudy,
    /// Check that the implicit solver never increases the discrete
    /// norm along trajectories of a norm-dissipative equation.
    Dissipativity,
}

#[derive(Args)]
struct TrainArgs {
    /// Training objective.
    #[arg(long, value_enum, default_value_t = LossArg::Step)]
    loss: LossArg,

    /// Equation override: a shorthand (rd | ac | ch | rte) with stock
    /// coefficients, or an inline JSON object such as
    /// '{"kind":"allen_cahn1d","d1":1e-3,"d2":0.1}'.
    #[arg(long)]
    eq: Option<String>,

    /// Scheme override: backward-euler (be) or crank-nicolson (cn).
    #[arg(long)]
    scheme: Option<String>,

    /// Trunk feature count override.
    #[arg(long)]
    p: Option<usize>,

    /// Refitted last-layer weight count override.
    #[arg(long)]
    q: Option<usize>,

    /// Hidden-layer width override.
    #[arg(long)]
    width: Option<usize>,

    /// Weight-layer depth override.
    #[arg(long)]
    depth: Option<usize>,

    /// Collocation-pair budget override.
    #[arg(long = "M")]
    m: Option<usize>,

    /// Optimizer iteration cap override.
    #[arg(long)]
    max_iters: Option<usize>,

    /// Stopping tolerance on the full-set loss.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    /// One-step residual of the implicit scheme.
    Step,
    /// Whole-horizon space-time residual.
    Cont,
}

#[derive(Args)]
struct RolloutArgs {
    /// Drive the implicit reference solver (the default).
    #[arg(long, conflicts_with_all = ["vanilla", "tl"])]
    reference: bool,

    /// Drive the trained network with frozen weights.
    #[arg(long, conflicts_with = "tl")]
    vanilla: bool,

    /// Drive the trained network with the per-step last-layer refit.
    #[arg(long)]
    tl: bool,
}

fn parse_equation(text: &str) -> anyhow::Result<Equation> {
    let t = text.trim();
    if t.starts_with('{') {
        return serde_json::from_str(t).context("failed to parse --eq JSON");
    }
    Ok(match t {
        "rd" => Equation::rd(0.001, 0.001),
        "ac" => Equation::ac(1e-3, 0.1),
        "ch" => Equation::ch(1e-3, 0.001),
        "rte" => Equation::rte(1.0),
        other => bail!(
            "unknown equation '{other}'; use rd | ac | ch | rte or an inline JSON object"
        ),
    })
}

fn parse_scheme(text: &str) -> anyhow::Result<Scheme> {
    Ok(match text.trim().replace('-', "_").as_str() {
        "be" | "backward_euler" => Scheme::BackwardEuler,
        "cn" | "crank_nicolson" => Scheme::CrankNicolson,
        other => bail!("unknown scheme '{other}'; use backward-euler (be) or crank-nicolson (cn)"),
    })
}

fn apply_train_overrides(cfg: &mut RunConfig, args: &TrainArgs) -> anyhow::Result<()> {
    if let Some(eq) = &args.eq {
        cfg.eq = parse_equation(eq)?;
        // A different equation usually means a different boundary
        // type; drop an explicit kernel so the conventional one for
        // the new boundary applies.
        cfg.data.kernel = None;
    }
    if let Some(s) = &args.scheme {
        cfg.scheme = parse_scheme(s)?;
    }
    if let Some(p) = args.p {
        cfg.model.p = p;
    }
    if let Some(q) = args.q {
        cfg.model.q = q;
    }
    if let Some(w) = args.width {
        cfg.model.width = w;
    }
    if let Some(d) = args.depth {
        cfg.model.depth = d;
    }
    if let Some(m) = args.m {
        cfg.data.m = m;
    }
    if let Some(n) = args.max_iters {
        cfg.schedule.max_iters = n;
    }
    if let Some(tol) = args.tol {
        cfg.schedule.loss_tol = tol;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("failed to load config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let out = &cli.out_dir;
    let summary = match &cli.command {
        Command::GenData => run_gen_data(&cfg, out)?,
        Command::Train(args) => {
            apply_train_overrides(&mut cfg, args)?;
            let loss = match args.loss {
                LossArg::Step => LossMode::Step,
                LossArg::Cont => LossMode::Cont,
            };
            run_train(&cfg, loss, out)?
        }
        Command::Rollout(args) => {
            let mode = if args.vanilla {
                RolloutMode::Vanilla
            } else if args.tl {
                RolloutMode::Tl
            } else {
                RolloutMode::Reference
            };
            run_rollout(&cfg, mode, out)?
        }
        Command::Eval => run_eval(&cfg, out)?,
        Command::BoundCheck => run_bound_check(&cfg, out)?,
        Command::CnStudy => run_cn_study(&cfg, out)?,
        Command::Dissipativity => run_dissipativity(&cfg, out)?,
    };

    // Tolerate a closed pipe (e.g. `propnet ... | head`).
    use std::io::Write;
    let text = serde_json::to_string_pretty(&summary)?;
    if let Err(e) = writeln!(std::io::stdout(), "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    Ok(())
}
