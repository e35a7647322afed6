//! Run configuration: one JSON document drives data generation,
//! training, rollout, evaluation, and the study commands.
//!
//! Every field has a default sized for desk-scale CPU runs, so a config
//! file only needs the fields it overrides. Unknown keys are rejected
//! to catch typos. Count-like fields keep their conventional capital
//! names (`N_x`, `N_b`, `M`, `K`, `N_c`, `N_e`, …) in the JSON.

use crate::equation::{Boundary, Equation, Grid};
use crate::error::{Error, Result};
use crate::grf::KernelSpec;
use crate::mlp::Activation;
use crate::stepper::Scheme;
use crate::transfer::TlConfig;
use crate::TrainSchedule;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Spatial (or phase-space) discretization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Spatial nodes.
    #[serde(rename = "N_x")]
    pub n_x: usize,
    /// Velocity nodes; only consulted by the kinetic equation.
    #[serde(rename = "N_v")]
    pub n_v: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n_x: 64, n_v: 8 }
    }
}

/// Training-data generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base random-field draws.
    #[serde(rename = "N_b")]
    pub n_b: usize,
    /// Propagator passes per draw; the pool holds `N_b·n_t` functions.
    pub n_t: usize,
    /// Collocation pairs kept for the loss.
    #[serde(rename = "M")]
    pub m: usize,
    /// Covariance kernel; when absent, the conventional kernel for the
    /// equation's boundary type.
    pub kernel: Option<KernelSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_b: 100,
            n_t: 20,
            m: 1000,
            kernel: None,
        }
    }
}

/// Operator-network shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Trunk features.
    pub p: usize,
    /// Explicit last-layer weights.
    pub q: usize,
    pub width: usize,
    /// Total weight layers per net.
    pub depth: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            p: 40,
            q: 15,
            width: 50,
            depth: 4,
            activation: Activation::Tanh,
        }
    }
}

/// Rollout horizon and refit cadence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Steps to roll out.
    #[serde(rename = "K")]
    pub k: usize,
    /// Refit every this many steps (1 = every step).
    pub tl_every: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { k: 1000, tl_every: 1 }
    }
}

/// Test-ensemble evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test functions drawn for error measurement.
    #[serde(rename = "N_e")]
    pub n_e: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_e: 30 }
    }
}

/// Stability-bound harness suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    /// State dimension.
    pub n: usize,
    pub eta: f64,
    pub delta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub trials: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            n: 20,
            eta: 0.9,
            delta: 0.04,
            k: 50,
            trials: 1000,
        }
    }
}

/// Whole-horizon (space–time) training variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContConfig {
    /// Uniform time nodes on `[0, t0]`, endpoints included.
    pub n_time_nodes: usize,
    /// Horizon the space–time network covers.
    pub t0: f64,
}

impl Default for ContConfig {
    fn default() -> Self {
        ContConfig {
            n_time_nodes: 21,
            t0: 1.0,
        }
    }
}

/// Full run configuration; see the module doc for the JSON shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub eq: Equation,
    pub scheme: Scheme,
    pub grid: GridConfig,
    /// Propagator step size.
    pub dt: f64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub tl: TlConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub bound: BoundConfig,
    pub cont: ContConfig,
    /// Add the boundary mean-square penalty to the step loss (the
    /// architecture already enforces boundary data, so off by default).
    pub boundary_penalty: bool,
    /// Master seed; the pipeline stages derive their own streams.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            eq: Equation::rd(0.001, 0.001),
            scheme: Scheme::BackwardEuler,
            grid: GridConfig::default(),
            dt: 0.05,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            tl: TlConfig::default(),
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
            bound: BoundConfig::default(),
            cont: ContConfig::default(),
            boundary_penalty: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config file and validates it.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON echo of the effective configuration.
    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds the grid the equation calls for.
    pub fn build_grid(&self) -> Result<Grid> {
        if self.grid.n_x < 3 {
            return Err(Error::Config(format!(
                "N_x must be at least 3, got {}",
                self.grid.n_x
            )));
        }
        Ok(match self.eq.boundary() {
            Boundary::Dirichlet0 => Grid::dirichlet(self.grid.n_x),
            Boundary::Periodic => Grid::periodic(self.grid.n_x),
            Boundary::Inflow => {
                if self.grid.n_v < 2 {
                    return Err(Error::Config(format!(
                        "kinetic runs need N_v ≥ 2, got {}",
                        self.grid.n_v
                    )));
                }
                Grid::phase(self.grid.n_x, self.grid.n_v)
            }
        })
    }

    /// The covariance kernel: configured, or the conventional one for
    /// the equation's boundary type.
    pub fn kernel(&self) -> KernelSpec {
        self.data
            .kernel
            .unwrap_or_else(|| KernelSpec::default_for(self.eq.boundary()))
    }

    /// Derived seeds, one per pipeline stage, so stages stay decoupled.
    pub fn seed_data(&self) -> u64 {
        self.seed
    }

    pub fn seed_init(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn seed_train(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn seed_test(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.eq.validate(&self.build_grid()?)?;
        self.kernel().validate()?;
        self.schedule.validate()?;
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.grid.n_x < 3 {
            return Err(Error::Config(format!(
                "N_x must be at least 3, got {}",
                self.grid.n_x
            )));
        }
        let m = &self.model;
        if m.p == 0 || m.q == 0 || m.width == 0 || m.depth < 2 {
            return Err(Error::Config(format!(
                "model shape needs p, q, width ≥ 1 and depth ≥ 2; got p={}, q={}, width={}, depth={}",
                m.p, m.q, m.width, m.depth
            )));
        }
        if self.data.n_b == 0 || self.data.n_t == 0 || self.data.m == 0 {
            return Err(Error::Config(
                "data generation needs N_b, n_t, M ≥ 1".into(),
            ));
        }
        if self.rollout.k == 0 || self.rollout.tl_every == 0 {
            return Err(Error::Config("rollout needs K ≥ 1 and tl_every ≥ 1".into()));
        }
        if self.eval.n_e == 0 {
            return Err(Error::Config("evaluation needs N_e ≥ 1".into()));
        }
        if self.tl.n_c == 0 {
            return Err(Error::Config("transfer refit needs N_c ≥ 1".into()));
        }
        if self.cont.n_time_nodes < 3 || !(self.cont.t0.is_finite() && self.cont.t0 > 0.0) {
            return Err(Error::Config(format!(
                "whole-horizon loss needs ≥ 3 time nodes and a positive horizon; got {} on [0, {}]",
                self.cont.n_time_nodes, self.cont.t0
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configuration_is_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let grid = cfg.build_grid().unwrap();
        assert_eq!(grid.n_x(), 64);
        assert_eq!(grid.boundary, Boundary::Dirichlet0);
        assert_eq!(cfg.kernel(), KernelSpec::SqExp1d { l: 0.2 });
    }

    #[test]
    fn json_roundtrip_preserves_the_configuration() {
        let mut cfg = RunConfig::default();
        cfg.eq = Equation::ac(1e-3, 0.1);
        cfg.model.q = 12;
        cfg.seed = 99;
        let text = cfg.to_pretty_json().unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_fills_in_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"dt": 0.1, "seed": 7}"#).unwrap();
        assert_eq!(cfg.dt, 0.1);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.p, 40);
        assert_eq!(cfg.schedule.batch, 100);
    }

    #[test]
    fn count_fields_use_their_conventional_names() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{
                "eq": {"kind": "allen_cahn1d", "d1": 0.001, "d2": 0.1},
                "grid": {"N_x": 32},
                "data": {"N_b": 10, "n_t": 5, "M": 200},
                "model": {"p": 20, "q": 8},
                "tl": {"N_c": 16},
                "rollout": {"K": 100},
                "eval": {"N_e": 5},
                "bound": {"eta": 1.0, "delta": 0.05, "K": 30}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.grid.n_x, 32);
        assert_eq!(cfg.data.n_b, 10);
        assert_eq!(cfg.data.m, 200);
        assert_eq!(cfg.tl.n_c, 16);
        assert_eq!(cfg.rollout.k, 100);
        assert_eq!(cfg.eval.n_e, 5);
        assert_eq!(cfg.bound.k, 30);
        assert_eq!(cfg.eq, Equation::ac(0.001, 0.1));
        // Periodic equation → periodic grid and kernel.
        assert_eq!(cfg.build_grid().unwrap().boundary, Boundary::Periodic);
        assert_eq!(cfg.kernel(), KernelSpec::Periodic1d { l: 0.5 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"dtt": 0.1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"pp": 3}}"#).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.dt = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.model.depth = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.cont.n_time_nodes = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.eq = Equation::rte(1e-2);
        cfg.grid.n_v = 1;
        assert!(matches!(cfg.build_grid(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_seeds_are_distinct_and_derived() {
        let cfg = RunConfig {
            seed: 40,
            ..RunConfig::default()
        };
        assert_eq!(cfg.seed_data(), 40);
        assert_eq!(cfg.seed_init(), 41);
        assert_eq!(cfg.seed_train(), 42);
        assert_eq!(cfg.seed_test(), 43);
    }

    #[test]
    fn file_loading_validates_the_contents() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.json");
        std::fs::write(&good, r#"{"dt": 0.05}"#).unwrap();
        assert!(RunConfig::load(&good).is_ok());

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"dt": -1.0}"#).unwrap();
        assert!(RunConfig::load(&bad).is_err());

        let junk = dir.path().join("junk.json");
        std::fs::write(&junk, "not json").unwrap();
        assert!(matches!(RunConfig::load(&junk), Err(Error::Json(_))));
    }
}
