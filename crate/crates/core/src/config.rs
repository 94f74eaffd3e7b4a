//! Run configuration: a strict JSON document naming a scenario, a task and
//! numeric overrides. Unknown keys are rejected and every number is
//! bounds-checked before anything is written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{FairnessOptions, Utility, DEFAULT_WEIGHT_FLOOR};
use crate::geometry::{
    build_hex7_scenario_with_grid, build_linear_scenario, Cluster, GainMatrix, HexCooperation,
    LinearCooperation, PathlossModel, Scenario, DEFAULT_POWER_PER_BS, HEX7_DEFAULT_GRID,
};
use crate::limit::{LambdaMode, Tolerances};

fn default_radius() -> f64 {
    1.0
}

fn default_power() -> f64 {
    DEFAULT_POWER_PER_BS
}

/// Network layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    Linear {
        n_groups: usize,
        #[serde(default = "default_radius")]
        cell_radius_km: f64,
        gamma: f64,
        #[serde(default = "default_power")]
        power_per_bs: f64,
        cooperation: LinearCooperation,
        #[serde(default)]
        pathloss: Option<PathlossModel>,
    },
    Hex7 {
        #[serde(default = "default_radius")]
        cell_radius_km: f64,
        gamma: f64,
        #[serde(default = "default_power")]
        power_per_bs: f64,
        cooperation: HexCooperation,
        #[serde(default)]
        grid: Option<[f64; 2]>,
        #[serde(default)]
        pathloss: Option<PathlossModel>,
    },
    /// Raw amplitude gains `alpha[m][k]`.
    Explicit {
        alpha: Vec<Vec<f64>>,
        gamma: f64,
        bs_powers: Vec<f64>,
        clusters: Vec<Cluster>,
    },
}

impl ScenarioSpec {
    pub fn build(&self) -> Result<Scenario> {
        match self {
            ScenarioSpec::Linear {
                n_groups,
                cell_radius_km,
                gamma,
                power_per_bs,
                cooperation,
                pathloss,
            } => {
                let mut s = build_linear_scenario(
                    *n_groups,
                    *cell_radius_km,
                    *gamma,
                    *power_per_bs,
                    *cooperation,
                )?;
                if let Some(pl) = pathloss {
                    pl.validate()?;
                    s.pathloss = *pl;
                }
                Ok(s)
            }
            ScenarioSpec::Hex7 {
                cell_radius_km,
                gamma,
                power_per_bs,
                cooperation,
                grid,
                pathloss,
            } => {
                let mut s = build_hex7_scenario_with_grid(
                    *cell_radius_km,
                    *gamma,
                    *power_per_bs,
                    *cooperation,
                    grid.unwrap_or(HEX7_DEFAULT_GRID),
                )?;
                if let Some(pl) = pathloss {
                    pl.validate()?;
                    // The sector pattern is part of the layout.
                    s.pathloss = pl.with_pattern(s.pathloss.antenna_pattern);
                }
                Ok(s)
            }
            ScenarioSpec::Explicit {
                alpha,
                gamma,
                bs_powers,
                clusters,
            } => Scenario::explicit(
                GainMatrix::from_rows(alpha)?,
                *gamma,
                bs_powers.clone(),
                clusters.clone(),
            ),
        }
    }

    /// Overrides one named scalar parameter.
    fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let bad = || Error::Config(format!("parameter `{name}` does not apply to this layout"));
        match (self, name) {
            (ScenarioSpec::Linear { gamma, .. } | ScenarioSpec::Hex7 { gamma, .. }, "gamma") => {
                *gamma = value
            }
            (ScenarioSpec::Explicit { gamma, .. }, "gamma") => *gamma = value,
            (
                ScenarioSpec::Linear { power_per_bs, .. } | ScenarioSpec::Hex7 { power_per_bs, .. },
                "power_per_bs",
            ) => *power_per_bs = value,
            (ScenarioSpec::Explicit { bs_powers, .. }, "power_per_bs") => {
                bs_powers.iter_mut().for_each(|p| *p = value)
            }
            (
                ScenarioSpec::Linear { cell_radius_km, .. }
                | ScenarioSpec::Hex7 { cell_radius_km, .. },
                "cell_radius_km",
            ) => *cell_radius_km = value,
            _ => return Err(bad()),
        }
        Ok(())
    }
}

/// Scenario given inline or as a path to a JSON file holding one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    File(PathBuf),
    Inline(ScenarioSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SolveFairness,
    SumRate,
    ValidateMc,
    DynamicSim,
    Sweep,
}

impl Task {
    pub fn uses_monte_carlo(&self) -> bool {
        matches!(self, Task::ValidateMc | Task::DynamicSim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Nats,
    Bits,
}

impl LogBase {
    /// Divides a rate in nats into this unit.
    pub fn divisor(&self) -> f64 {
        match self {
            LogBase::Nats => 1.0,
            LogBase::Bits => std::f64::consts::LN_2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LogBase::Nats => "nats",
            LogBase::Bits => "bits",
        }
    }
}

/// Solver overrides; unset fields keep the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kkt_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// Outer fairness stopping tolerance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_floor: Option<f64>,
}

/// Monte Carlo and scheduler sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    /// Users per group.
    #[serde(default = "MonteCarloSpec::default_n")]
    pub n: usize,
    #[serde(default = "MonteCarloSpec::default_trials")]
    pub trials: usize,
    /// Scheduler slots.
    #[serde(default = "MonteCarloSpec::default_horizon")]
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
}

impl MonteCarloSpec {
    fn default_n() -> usize {
        16
    }
    fn default_trials() -> usize {
        200
    }
    fn default_horizon() -> usize {
        1000
    }
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        MonteCarloSpec {
            n: Self::default_n(),
            trials: Self::default_trials(),
            horizon: Self::default_horizon(),
            v: None,
            a_max: None,
        }
    }
}

/// Parameter grid for the `sweep` task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Task run at every point; anything but `sweep`.
    pub task: Task,
    /// `gamma`, `power_per_bs`, `cell_radius_km`, `n`, `trials` or `alpha`.
    pub parameter: String,
    pub values: Vec<f64>,
}

pub const SWEEP_PARAMETERS: [&str; 6] = [
    "gamma",
    "power_per_bs",
    "cell_radius_km",
    "n",
    "trials",
    "alpha",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSource,
    pub task: Task,
    #[serde(default = "RunConfig::default_utility")]
    pub utility: Utility,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    /// Per-group weights for `sum_rate` and `validate_mc`, indexed by global
    /// group; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub monte_carlo: MonteCarloSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub log_base: LogBase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    check(v.is_finite() && v > 0.0, || {
        format!("{name} must be positive and finite, got {v}")
    })
}

impl RunConfig {
    fn default_utility() -> Utility {
        Utility::Pfs
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a scenario given by path is resolved relative to
    /// the config's directory and inlined.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let ScenarioSource::File(rel) = &cfg.scenario {
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| Error::Config(format!("{}: {e}", full.display())))?;
            let spec: ScenarioSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", full.display())))?;
            cfg.scenario = ScenarioSource::Inline(spec);
        }
        Ok(cfg)
    }

    pub fn scenario_spec(&self) -> Result<&ScenarioSpec> {
        match &self.scenario {
            ScenarioSource::Inline(s) => Ok(s),
            ScenarioSource::File(p) => Err(Error::Config(format!(
                "scenario file {} was not resolved; load the config from disk",
                p.display()
            ))),
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        let d = Tolerances::default();
        let n = &self.numerics;
        Tolerances {
            fp_tol: n.fp_tol.unwrap_or(d.fp_tol),
            kkt_tol: n.kkt_tol.unwrap_or(d.kkt_tol),
            grad_tol: n.grad_tol.unwrap_or(d.grad_tol),
            num_tol: n.num_tol.unwrap_or(d.num_tol),
            max_iter: n.max_iter.unwrap_or(d.max_iter),
        }
    }

    pub fn fairness_options(&self) -> FairnessOptions {
        let d = FairnessOptions::default();
        FairnessOptions {
            conv_tol: self.numerics.conv_tol.unwrap_or(d.conv_tol),
            max_outer: self.numerics.max_outer.unwrap_or(d.max_outer),
            w_floor: self.numerics.w_floor.unwrap_or(DEFAULT_WEIGHT_FLOOR),
            lambda_mode: self.lambda_mode,
            tolerances: self.tolerances(),
        }
    }

    /// Full validation; builds the scenario to catch geometric errors too.
    pub fn validate(&self) -> Result<Scenario> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        let scenario = self.scenario_spec()?.build().map_err(as_config)?;
        self.utility.validate().map_err(as_config)?;
        self.tolerances().validate().map_err(as_config)?;
        self.fairness_options().validate().map_err(as_config)?;
        let mc = &self.monte_carlo;
        check(mc.n >= 1, || "monte_carlo.n must be at least 1".into())?;
        check(mc.trials >= 2, || {
            "monte_carlo.trials must be at least 2".into()
        })?;
        check(mc.horizon >= 1, || {
            "monte_carlo.horizon must be at least 1".into()
        })?;
        if let Some(v) = mc.v {
            positive("monte_carlo.v", v)?;
        }
        if let Some(a) = mc.a_max {
            check(a.is_finite() && a >= 0.0, || {
                format!("monte_carlo.a_max must be nonnegative, got {a}")
            })?;
        }
        if let Some(w) = &self.weights {
            check(w.len() == scenario.n_groups(), || {
                format!(
                    "weights has {} entries for {} groups",
                    w.len(),
                    scenario.n_groups()
                )
            })?;
            check(w.iter().all(|x| x.is_finite() && *x >= 0.0), || {
                "weights must be nonnegative".into()
            })?;
        }
        let needs_seed = match (&self.task, &self.sweep) {
            (Task::Sweep, Some(s)) => s.task.uses_monte_carlo(),
            (t, _) => t.uses_monte_carlo(),
        };
        check(!needs_seed || self.seed.is_some(), || {
            "a seed is required for Monte Carlo tasks".into()
        })?;
        if self.task.uses_monte_carlo() {
            crate::montecarlo::antennas_per_bs(scenario.gamma, mc.n).map_err(as_config)?;
        }
        match (&self.task, &self.sweep) {
            (Task::Sweep, None) => {
                return Err(Error::Config("task `sweep` needs a `sweep` section".into()))
            }
            (Task::Sweep, Some(s)) => {
                check(s.task != Task::Sweep, || {
                    "a sweep cannot nest another sweep".into()
                })?;
                check(SWEEP_PARAMETERS.contains(&s.parameter.as_str()), || {
                    format!(
                        "unknown sweep parameter `{}`; expected one of {SWEEP_PARAMETERS:?}",
                        s.parameter
                    )
                })?;
                check(!s.values.is_empty(), || "sweep.values is empty".into())?;
                for i in 0..s.values.len() {
                    self.sweep_point(i)?.validate()?;
                }
            }
            (_, Some(_)) => {
                return Err(Error::Config("a `sweep` section needs task `sweep`".into()))
            }
            _ => {}
        }
        Ok(scenario)
    }

    /// The config run at point `i` of the sweep grid.
    pub fn sweep_point(&self, i: usize) -> Result<RunConfig> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("no sweep section".into()))?;
        let value = *s
            .values
            .get(i)
            .ok_or_else(|| Error::Config(format!("no sweep point {i}")))?;
        let mut cfg = self.clone();
        cfg.task = s.task;
        cfg.sweep = None;
        cfg.output = None;
        let count = |v: f64| -> Result<usize> {
            check(v >= 0.0 && v.fract() == 0.0 && v < 1e9, || {
                format!("{} must be a whole number, got {v}", s.parameter)
            })?;
            Ok(v as usize)
        };
        match s.parameter.as_str() {
            "n" => cfg.monte_carlo.n = count(value)?,
            "trials" => cfg.monte_carlo.trials = count(value)?,
            "alpha" => cfg.utility = Utility::AlphaFair { alpha: value },
            name => {
                let mut spec = cfg.scenario_spec()?.clone();
                spec.set(name, value)?;
                cfg.scenario = ScenarioSource::Inline(spec);
            }
        }
        Ok(cfg)
    }
}
