//! Run configuration.
//!
//! One TOML file with a section per stage. Every section has defaults, so
//! an empty file is a valid configuration. The master `seed` drives every
//! random stream; per-stage seeds inside the embedded library configs are
//! ignored and re-derived from it.

use std::path::{Path, PathBuf};

use profed_core::anneal::ScheduleConfig;
use profed_core::audit::AuditConfig;
use profed_core::flsim::{BudgetConfig, DeConfig, TrainConfig};
use profed_core::mipfl::PflWeights;
use profed_core::noiselab::{MuSpec, SnrTableSpec};
use profed_core::privacy::{PrivacyBudget, DEFAULT_DELTA};
use profed_core::tabular::ingest::BinningSpec;
use profed_core::tabular::synth::presets::PlantedBias;
use profed_core::tabular::FeatureSchema;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub privacy: BudgetConfig,
    pub weights: PflWeights,
    pub selection: SelectionConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub calibrate: CalibrateConfig,
    pub audit: AuditConfig,
    pub validate: ValidateConfig,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    PlantedBias,
    Heterogeneous,
    Homogeneous,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Rows of the synthetic evaluation set.
    pub holdout_rows: usize,
    pub planted_bias: PlantedBias,
    /// Size of the `heterogeneous` and `homogeneous` pools.
    pub synthetic: SyntheticConfig,
    pub csv: Option<CsvConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::PlantedBias,
            holdout_rows: 5000,
            planted_bias: PlantedBias::default(),
            synthetic: SyntheticConfig::default(),
            csv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub clients: usize,
    pub rows_per_client: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            rows_per_client: 2000,
        }
    }
}

/// Client CSV files; each file is one client named after its stem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub schema: FeatureSchema,
    #[serde(default)]
    pub binning: BinningSpec,
    pub clients: Vec<PathBuf>,
    /// Evaluation set for training and weight fitting.
    pub holdout: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Federation size.
    pub k: usize,
    /// Independent annealing chains.
    pub runs: usize,
    /// Directory written by `release`; without it bundles are released in
    /// memory.
    pub bundles: Option<PathBuf>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            runs: 5,
            bundles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Feature counts `K`.
    pub features: Vec<usize>,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: DEFAULT_DELTA,
            features: vec![5, 10, 20, 30, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub table: SnrTableSpec,
    pub snr_levels: Vec<f64>,
    pub trials: usize,
    /// Federation sizes of the decision-variance check; sizes not below the
    /// pool size are skipped.
    pub decision_k: Vec<usize>,
    /// Noise scale of the stability checks; defaults to the calibrated σ.
    pub sigma: Option<f64>,
    pub stability_trials: usize,
    pub global: Option<GlobalCheckConfig>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            table: SnrTableSpec::default(),
            snr_levels: vec![2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            trials: 1000,
            decision_k: vec![1, 5, 10],
            sigma: None,
            stability_trials: 1000,
            global: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalCheckConfig {
    pub k: usize,
    pub mu: MuSpec,
}

/// Settings of the PFL weight fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub k: usize,
    pub federations: usize,
    /// Upper end of each weight's search range.
    pub upper: f64,
    pub de: DeConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 5,
            federations: 30,
            upper: 3.0,
            de: DeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path` (if any), applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every section against the invariants of the stage it feeds.
    pub fn validate(&self) -> Result<(), CliError> {
        let core = |what: &str, e: profed_core::Error| CliError::Config(format!("{what}: {e}"));
        self.weights.validate().map_err(|e| core("weights", e))?;
        self.schedule.validate().map_err(|e| core("schedule", e))?;
        self.train.validate().map_err(|e| core("train", e))?;
        self.fit.de.validate().map_err(|e| core("fit.de", e))?;
        match self.privacy.sigma_override {
            Some(s) if !(s >= 0.0 && s.is_finite()) => {
                return Err(CliError::Config(format!(
                    "privacy.sigma_override must be finite and non-negative, got {s}"
                )));
            }
            Some(_) => {}
            None => {
                PrivacyBudget::selection(self.privacy.epsilon_selection, self.privacy.delta)
                    .map_err(|e| core("privacy", e))?;
            }
        }
        if !(self.privacy.epsilon_training >= 0.0) {
            return Err(CliError::Config(
                "privacy.epsilon_training must be non-negative".into(),
            ));
        }
        PrivacyBudget::selection(self.calibrate.epsilon, self.calibrate.delta)
            .map_err(|e| core("calibrate", e))?;
        if self.calibrate.features.is_empty() || self.calibrate.features.contains(&0) {
            return Err(CliError::Config(
                "calibrate.features must list positive feature counts".into(),
            ));
        }
        if self.selection.k == 0 || self.selection.runs == 0 {
            return Err(CliError::Config(
                "selection.k and selection.runs must be positive".into(),
            ));
        }
        if self.fit.k == 0 || self.fit.federations < 10 || !(self.fit.upper > 0.0) {
            return Err(CliError::Config(
                "fit needs k > 0, at least 10 federations and upper > 0".into(),
            ));
        }
        if self.audit.n_targets < profed_core::audit::MIN_TARGETS || self.audit.epsilons.is_empty()
        {
            return Err(CliError::Config(format!(
                "audit needs at least one epsilon and {} targets",
                profed_core::audit::MIN_TARGETS
            )));
        }
        let v = &self.validate;
        if v.trials < profed_core::noiselab::MIN_TRIALS
            || v.stability_trials < profed_core::noiselab::MIN_TRIALS
        {
            return Err(CliError::Config(format!(
                "validate needs at least {} trials",
                profed_core::noiselab::MIN_TRIALS
            )));
        }
        if v.snr_levels.iter().any(|s| !(*s > 0.0)) {
            return Err(CliError::Config(
                "validate.snr_levels must be positive".into(),
            ));
        }
        if matches!(v.sigma, Some(s) if !(s >= 0.0 && s.is_finite())) {
            return Err(CliError::Config(
                "validate.sigma must be finite and non-negative".into(),
            ));
        }
        v.table.build().map_err(|e| core("validate.table", e))?;
        self.validate_data()
    }

    fn validate_data(&self) -> Result<(), CliError> {
        let d = &self.data;
        if d.holdout_rows == 0 {
            return Err(CliError::Config(
                "data.holdout_rows must be positive".into(),
            ));
        }
        match d.source {
            DataSource::PlantedBias => {
                let pb = &d.planted_bias;
                if pb.clients == 0 || pb.biased > pb.clients || pb.rows_per_client == 0 {
                    return Err(CliError::Config(format!(
                        "invalid data.planted_bias: {pb:?}"
                    )));
                }
            }
            DataSource::Heterogeneous | DataSource::Homogeneous => {
                if d.synthetic.clients == 0 || d.synthetic.rows_per_client == 0 {
                    return Err(CliError::Config(
                        "data.synthetic needs clients and rows".into(),
                    ));
                }
            }
            DataSource::Csv => {
                let csv = d.csv.as_ref().ok_or_else(|| {
                    CliError::Config("data.source = \"csv\" needs a [data.csv] section".into())
                })?;
                if csv.clients.is_empty() {
                    return Err(CliError::Config("data.csv.clients is empty".into()));
                }
                for p in csv.clients.iter().chain(&csv.holdout) {
                    if !p.is_file() {
                        return Err(CliError::Config(format!(
                            "file `{}` does not exist",
                            p.display()
                        )));
                    }
                }
            }
        }
        if let Some(dir) = &self.selection.bundles {
            if !dir.is_dir() {
                return Err(CliError::Config(format!(
                    "bundle directory `{}` does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in `doc`. The value is parsed as TOML and falls back
/// to a plain string.
fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("invalid override key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override `{key}`: `{part}` is not a section"))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}
