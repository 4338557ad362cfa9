use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, EvalReport};
use super::model::{fedavg_round, Encoder, ModelState, TrainConfig};
use crate::anneal::{search, ScheduleConfig, SearchResult, SearchTrace};
use crate::error::{Error, Result};
use crate::mipfl::{BundlePool, Federation, PflWeights};
use crate::privacy::{
    calibrate_sigma, noise_bundle, total_budget, NoiseCalibration, PrivacyBudget,
};
use crate::seed;
use crate::tabular::{compute_tables, ClientDataset, ClientId, FeatureSchema, TableBundle};

/// Holdout metrics after one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub accuracy: f64,
    pub f1: Option<f64>,
    pub spd: Option<f64>,
    pub eod: Option<f64>,
}

impl CurvePoint {
    fn new(round: usize, r: &EvalReport) -> Self {
        Self {
            round,
            accuracy: r.accuracy,
            f1: r.f1,
            spd: r.spd,
            eod: r.eod,
        }
    }
}

/// Writes `round,accuracy,f1,spd,eod`; undefined metrics are empty fields.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::invalid(format!("writing training curve: {e}"));
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    w.write_record(["round", "accuracy", "f1", "spd", "eod"])
        .map_err(io)?;
    for p in curve {
        w.write_record([
            p.round.to_string(),
            p.accuracy.to_string(),
            opt(p.f1),
            opt(p.spd),
            opt(p.eod),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of FedAvg training on a fixed federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub model: ModelState,
    pub curve: Vec<CurvePoint>,
    pub report: EvalReport,
}

/// `config.rounds` FedAvg rounds from the zero model over `members`,
/// evaluating on `holdout` after each round.
pub fn train_federation(
    members: &[&ClientDataset],
    holdout: &ClientDataset,
    config: &TrainConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    let encoder = Encoder::new(holdout.schema())?;
    let mut model = encoder.zeros();
    let mut curve = Vec::with_capacity(config.rounds);
    let mut report = None;
    for _ in 0..config.rounds {
        model = fedavg_round(&encoder, &model, members, config)?;
        let r = evaluate(&encoder, &model, holdout)?;
        curve.push(CurvePoint::new(model.round, &r));
        report = Some(r);
    }
    Ok(TrainingRun {
        model,
        curve,
        report: report.expect("at least one round"),
    })
}

/// Privacy settings of the two protocol phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub epsilon_selection: f64,
    pub epsilon_training: f64,
    pub delta: f64,
    /// Replaces the calibrated σ, e.g. 0 for exact release.
    pub sigma_override: Option<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            epsilon_selection: 1.0,
            epsilon_training: 1.0,
            delta: crate::privacy::DEFAULT_DELTA,
            sigma_override: None,
        }
    }
}

impl BudgetConfig {
    pub fn calibration(&self, schema: &FeatureSchema) -> Result<NoiseCalibration> {
        let m = schema.query_count();
        match self.sigma_override {
            Some(s) => NoiseCalibration::with_sigma(m, s),
            None => calibrate_sigma(
                &PrivacyBudget::selection(self.epsilon_selection, self.delta)?,
                m,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub k: usize,
    pub weights: PflWeights,
    pub budget: BudgetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k: 5,
            weights: PflWeights::default(),
            budget: BudgetConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientBudget {
    pub client: ClientId,
    pub selected: bool,
    pub epsilon_total: f64,
}

/// End-to-end result of the three phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub sigma: f64,
    pub selected: Federation,
    pub search: Option<SearchResult>,
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
    pub budgets: Vec<ClientBudget>,
    #[serde(skip)]
    pub trace: Option<SearchTrace>,
}

/// Phase 1: exact tables, then Gaussian noise per client.
pub fn release_bundles(
    clients: &[ClientDataset],
    calibration: &NoiseCalibration,
    seed: u64,
) -> Result<Vec<TableBundle>> {
    let noise_seed = seed::derive(seed, "release");
    clients
        .par_iter()
        .map(|c| noise_bundle(&compute_tables(c)?, calibration, noise_seed))
        .collect()
}

/// Runs release, selection and training. Errors carry the phase name.
pub fn run_protocol(
    clients: &[ClientDataset],
    holdout: &ClientDataset,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<ProtocolReport> {
    let schema: Arc<FeatureSchema> = Arc::clone(holdout.schema());
    let by_id: HashMap<&ClientId, &ClientDataset> =
        clients.iter().map(|c| (c.client_id(), c)).collect();
    if by_id.len() != clients.len() {
        return Err(Error::invalid("client ids must be unique").in_phase("release"));
    }

    let calibration = config
        .budget
        .calibration(&schema)
        .map_err(|e| e.in_phase("release"))?;
    let bundles =
        release_bundles(clients, &calibration, seed).map_err(|e| e.in_phase("release"))?;
    let pool = BundlePool::new(Arc::clone(&schema), bundles).map_err(|e| e.in_phase("release"))?;

    let (selected, trace) = if config.k == pool.len() {
        (
            Federation::new(pool.ids().iter().cloned()).map_err(|e| e.in_phase("selection"))?,
            None,
        )
    } else {
        let schedule = config.schedule.with_seed(seed::derive(seed, "selection"));
        let trace = search(&pool, &config.weights, config.k, &schedule)
            .map_err(|e| e.in_phase("selection"))?;
        (trace.best_federation.clone(), Some(trace))
    };

    let members: Vec<&ClientDataset> = selected.members().iter().map(|id| by_id[id]).collect();
    let train = TrainConfig {
        seed: seed::derive(seed, "training"),
        ..config.train
    };
    let run = train_federation(&members, holdout, &train).map_err(|e| e.in_phase("training"))?;

    let budgets = pool
        .ids()
        .iter()
        .map(|id| {
            let sel = selected.contains(id);
            ClientBudget {
                client: id.clone(),
                selected: sel,
                epsilon_total: total_budget(
                    sel,
                    config.budget.epsilon_selection,
                    config.budget.epsilon_training,
                ),
            }
        })
        .collect();

    Ok(ProtocolReport {
        sigma: calibration.sigma,
        selected,
        search: trace.as_ref().map(SearchTrace::result),
        report: run.report,
        curve: run.curve,
        budgets,
        trace,
    })
}
