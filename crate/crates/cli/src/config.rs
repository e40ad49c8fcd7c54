//! Run configuration read from TOML.
//!
//! Every section is optional; a bare file (or no file at all) reproduces the
//! Merton validation setup with a five-year contract at level 0.

use std::path::{Path, PathBuf};

use gmwb::engine::{ControlStorage, FeeSearch, SolverConfig};
use gmwb::grid::{ASpacing, GridConfig};
use gmwb::kernel::KernelTolerances;
use gmwb::mc::McConfig;
use gmwb::model::{Contract, ModelParams};
use gmwb::timestep::ControlPolicy;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelParams,
    pub contract: ContractSection,
    pub grid: GridSection,
    pub run: RunSection,
    pub mc: McConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            model: ModelParams::default(),
            contract: ContractSection::default(),
            grid: GridSection::default(),
            run: RunSection::default(),
            mc: McConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractSection {
    pub maturity: f64,
    /// Defaults to withdrawing the premium evenly over the contract life.
    pub withdraw_rate: Option<f64>,
    pub penalty: f64,
    pub fixed_cost: f64,
    pub premium: f64,
}

impl Default for ContractSection {
    fn default() -> Self {
        let c = Contract::reference(5.0);
        Self {
            maturity: c.maturity,
            withdraw_rate: None,
            penalty: c.penalty,
            fixed_cost: c.fixed_cost,
            premium: c.premium,
        }
    }
}

impl ContractSection {
    pub fn contract(&self) -> Contract {
        Contract {
            maturity: self.maturity,
            withdraw_rate: self.withdraw_rate.unwrap_or(self.premium / self.maturity),
            penalty: self.penalty,
            fixed_cost: self.fixed_cost,
            premium: self.premium,
        }
    }
}

/// Preset level with optional overrides of single lattice settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub level: usize,
    pub n_w: Option<usize>,
    pub n_r: Option<usize>,
    pub n_a: Option<usize>,
    pub n_tau: Option<usize>,
    pub w_min: Option<f64>,
    pub w_max: Option<f64>,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub a_spacing: Option<ASpacing>,
    pub padding: Option<usize>,
}

impl GridSection {
    pub fn grid_config(&self, level: usize, contract: &Contract) -> Result<GridConfig, CliError> {
        let mut g = GridConfig::level(level, contract)?;
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { g.$f = v; })* };
        }
        apply!(n_w, n_r, n_a, n_tau, w_min, w_max, r_min, r_max, a_spacing, padding);
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Model label written to fee tables.
    pub model_tag: String,
    pub eps: f64,
    pub eps1: f64,
    pub alpha_cap: usize,
    pub local_candidates: usize,
    pub refinements: usize,
    /// Withdrawal strategies kept by `price` and `mc-validate`.
    pub store_controls: ControlStorage,
    /// Levels of the `converge` and `kernel-diag` tables.
    pub levels: Vec<usize>,
    /// Calendar time of the `controls` map.
    pub control_time: f64,
    /// Rate row of the `controls` map; defaults to the comparable constant rate.
    pub control_rate: Option<f64>,
    pub fee: FeeSearch,
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        let tol = KernelTolerances::default();
        let policy = ControlPolicy::default();
        Self {
            model_tag: "JD-V".into(),
            eps: tol.eps,
            eps1: tol.eps1,
            alpha_cap: tol.alpha_cap,
            local_candidates: policy.local_candidates,
            refinements: policy.refinements,
            store_controls: ControlStorage::All,
            levels: vec![0, 1, 2],
            control_time: 5.0,
            control_rate: None,
            fee: FeeSearch::default(),
            out: None,
        }
    }
}

impl RunSection {
    pub fn solver(&self, controls: ControlStorage) -> SolverConfig {
        SolverConfig {
            tolerances: KernelTolerances {
                eps: self.eps,
                eps1: self.eps1,
                alpha_cap: self.alpha_cap,
            },
            policy: ControlPolicy {
                local_candidates: self.local_candidates,
                refinements: self.refinements,
            },
            controls,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(reason) => CliError::Config {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        if cfg.version != SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "unsupported config version {} (expected {SCHEMA_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Check every setting that a command may use before computing anything.
    pub fn validate(&self, level: usize) -> Result<(), CliError> {
        let contract = self.contract.contract();
        contract.validate()?;
        self.model.validate()?;
        gmwb::grid::build_grid(&self.grid.grid_config(level, &contract)?, &contract)?;
        self.run.solver(ControlStorage::None).policy.validate()?;
        self.mc.validate()?;
        let fee = &self.run.fee;
        if !(fee.tol > 0.0) {
            return Err(CliError::Usage(format!(
                "run.fee.tol must be > 0, got {}",
                fee.tol
            )));
        }
        if !(fee.hi > fee.lo) || fee.max_iter == 0 {
            return Err(CliError::Usage("run.fee needs hi > lo and max_iter >= 1".into()));
        }
        if !(self.run.eps > 0.0 && self.run.eps1 > 0.0) {
            return Err(CliError::Usage("run.eps and run.eps1 must be > 0".into()));
        }
        Ok(())
    }
}
