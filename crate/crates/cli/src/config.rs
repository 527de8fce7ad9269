//! Run configuration.
//!
//! One TOML file per run. Every key is optional and falls back to the
//! default below; unknown keys are rejected. Command-line flags override
//! file values, which override defaults.

use std::path::PathBuf;

use common_agency::hjb::TimeScheme;
use common_agency::lq::{LQParams, SigmaSpec};
use common_agency::model::{DoubleWellCost, DriftCostSpec, QuarticCost};
use common_agency::sim::{SimConfig, DEFAULT_BUDGET};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory receiving every output file.
    pub output_dir: PathBuf,
    pub format: Format,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub problem: ProblemConfig,
    pub effort: EffortConfig,
    pub grid: GridConfig,
    pub sim: SimSection,
    pub nash: NashConfig,
    pub sweep: Option<SweepConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            format: Format::Csv,
            seed: 0,
            threads: 0,
            problem: ProblemConfig::default(),
            effort: EffortConfig::default(),
            grid: GridConfig::default(),
            sim: SimSection::default(),
            nash: NashConfig::default(),
            sweep: None,
        }
    }
}

/// Two principals; `rho` and `sigma` are mutually exclusive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub k1: f64,
    pub k2: f64,
    pub rho: Option<f64>,
    pub sigma: Option<[[f64; 2]; 2]>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub risk_aversion: f64,
    pub reservation_utility: f64,
    pub horizon: f64,
    pub x0: [f64; 2],
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 1.0,
            rho: None,
            sigma: None,
            gamma1: 0.0,
            gamma2: 0.0,
            risk_aversion: 1.0,
            reservation_utility: -1.0,
            horizon: 1.0,
            x0: [0.0, 0.0],
        }
    }
}

impl ProblemConfig {
    pub fn lq_params(&self) -> Result<LQParams, CliError> {
        let sigma = match (self.rho, self.sigma) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("problem.rho and problem.sigma are mutually exclusive".into()))
            }
            (_, Some(m)) => SigmaSpec::Matrix(m),
            (rho, None) => SigmaSpec::Correlation(rho.unwrap_or(0.0)),
        };
        let p = LQParams {
            k1: self.k1,
            k2: self.k2,
            sigma,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            risk_aversion: self.risk_aversion,
            reservation_utility: self.reservation_utility,
            horizon: self.horizon,
            x0: self.x0,
        };
        p.validate().map_err(|e| CliError::from_agency(e, "problem"))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffortModelName {
    LinearQuadratic,
    Quartic,
    DoubleWell,
}

/// Drift `k_i nu_i`; cost `|nu|^2/2` plus the model's extra term.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EffortConfig {
    pub model: EffortModelName,
    /// Quartic coefficient `kappa |nu|^4 / 4`.
    pub kappa: f64,
    /// Effort box `[-bound, bound]^2` for the non-LQ models.
    pub bound: f64,
}

impl Default for EffortConfig {
    fn default() -> Self {
        Self {
            model: EffortModelName::LinearQuadratic,
            kappa: 0.0,
            bound: 10.0,
        }
    }
}

impl EffortConfig {
    pub fn spec(&self, p: &LQParams) -> Result<DriftCostSpec, CliError> {
        if self.model != EffortModelName::LinearQuadratic && !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(CliError::Config("effort.bound: must be finite and > 0".into()));
        }
        Ok(match self.model {
            EffortModelName::LinearQuadratic => p.drift_cost_spec(),
            EffortModelName::Quartic => DriftCostSpec::general(QuarticCost {
                efficiency: vec![p.k1, p.k2],
                kappa: self.kappa,
                bound: self.bound,
            }),
            EffortModelName::DoubleWell => DriftCostSpec::general(DoubleWellCost {
                efficiency: vec![p.k1, p.k2],
                bound: self.bound,
            }),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub n_x: usize,
    /// Time steps; absent means the fewest the explicit bound allows.
    pub n_t: Option<usize>,
    pub scheme: SchemeName,
    /// Stored time layers in the grid output.
    pub save_layers: usize,
    /// Number of grids in the refinement study (0 disables it).
    pub refinement_levels: usize,
    /// Gaussian bump added to the terminal payoff in the refinement study.
    pub bump_amplitude: f64,
    pub bump_width: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: -3.0,
            hi: 3.0,
            n_x: 61,
            n_t: None,
            scheme: SchemeName::Explicit,
            save_layers: 10,
            refinement_levels: 0,
            bump_amplitude: 2.0,
            bump_width: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Explicit,
    SemiImplicit,
}

impl From<SchemeName> for TimeScheme {
    fn from(s: SchemeName) -> Self {
        match s {
            SchemeName::Explicit => TimeScheme::Explicit,
            SchemeName::SemiImplicit => TimeScheme::SemiImplicit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractKind {
    /// Equilibrium contracts (closed form for LQ, grid-based otherwise).
    Equilibrium,
    /// Deterministic wage `sim.wage`, split evenly, zero sensitivity.
    Deterministic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub n_paths: usize,
    pub dt: f64,
    pub antithetic: bool,
    /// Cap on `n_paths * n_steps`.
    pub budget: u64,
    pub contract: ContractKind,
    pub wage: f64,
    /// Also estimate agent utility under perturbed effort policies.
    pub check_best_response: bool,
    /// Write `paths.csv` for the first `dump_paths` paths (0 disables it).
    pub dump_paths: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            antithetic: false,
            budget: DEFAULT_BUDGET,
            contract: ContractKind::Equilibrium,
            wage: 0.0,
            check_best_response: false,
            dump_paths: 0,
        }
    }
}

impl SimSection {
    pub fn config(&self, seed: u64) -> SimConfig {
        SimConfig {
            n_paths: self.n_paths,
            dt: self.dt,
            seed,
            antithetic: self.antithetic,
            budget: self.budget,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NashConfig {
    /// Deviating principal, 1-based.
    pub principal: usize,
    /// Offsets per coordinate; every combination is tested.
    pub offsets: Vec<f64>,
    pub free_ride: bool,
}

impl Default for NashConfig {
    fn default() -> Self {
        Self {
            principal: 1,
            offsets: vec![-0.2, -0.05, 0.05, 0.2],
            free_ride: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Rho,
    Gamma1,
    Gamma2,
    /// `x = gamma2 - gamma1`, with `gamma1 = max(-x, 0)` and `gamma2 = max(x, 0)`.
    GammaDiff,
    K1,
    K2,
    RiskAversion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    #[serde(default)]
    pub log_scale: bool,
}

impl SweepConfig {
    pub fn points(&self) -> Result<Vec<f64>, CliError> {
        if self.count < 2 {
            return Err(CliError::Config("sweep.count: must be >= 2".into()));
        }
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(CliError::Config("sweep.lo/hi: must be finite".into()));
        }
        let last = (self.count - 1) as f64;
        if self.log_scale {
            if !(self.lo > 0.0 && self.hi > 0.0) {
                return Err(CliError::Config("sweep.lo/hi: log scale needs positive bounds".into()));
            }
            let (a, b) = (self.lo.ln(), self.hi.ln());
            return Ok((0..self.count).map(|i| (a + (b - a) * i as f64 / last).exp()).collect());
        }
        Ok((0..self.count)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / last)
            .collect())
    }

    pub fn apply(&self, base: &ProblemConfig, value: f64) -> ProblemConfig {
        let mut p = base.clone();
        match self.parameter {
            SweepParameter::Rho => {
                p.rho = Some(value);
                p.sigma = None;
            }
            SweepParameter::Gamma1 => p.gamma1 = value,
            SweepParameter::Gamma2 => p.gamma2 = value,
            SweepParameter::GammaDiff => {
                p.gamma1 = (-value).max(0.0);
                p.gamma2 = value.max(0.0);
            }
            SweepParameter::K1 => p.k1 = value,
            SweepParameter::K2 => p.k2 = value,
            SweepParameter::RiskAversion => p.risk_aversion = value,
        }
        p
    }
}

/// Flags that override file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub format: Option<Format>,
    pub threads: Option<usize>,
}

pub fn load(path: Option<&std::path::Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.output_dir {
        cfg.output_dir = o.clone();
    }
    if let Some(f) = overrides.format {
        cfg.format = f;
    }
    if let Some(t) = overrides.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}
