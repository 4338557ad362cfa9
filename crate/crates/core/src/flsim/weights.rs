use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::de::{minimize, DeConfig};
use super::metrics::{spearman, EvalReport};
use super::model::TrainConfig;
use super::protocol::train_federation;
use crate::error::{Error, Result};
use crate::mipfl::{aggregate_indices, BundlePool, Federation, PflTerms, PflWeights};
use crate::seed;
use crate::tabular::{compute_tables, ClientDataset};

/// Exact PFL terms and trained metrics of one federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSample {
    pub federation: Federation,
    pub terms: PflTerms,
    pub report: EvalReport,
}

/// Trains `count` distinct random federations of size `k` and pairs each
/// with its PFL terms from exact tables.
pub fn sample_federations(
    clients: &[ClientDataset],
    holdout: &ClientDataset,
    k: usize,
    count: usize,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<FederationSample>> {
    let schema = Arc::clone(holdout.schema());
    let bundles = clients
        .iter()
        .map(compute_tables)
        .collect::<Result<Vec<_>>>()?;
    let pool = BundlePool::new(schema, bundles)?;
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidFederation(format!(
            "k = {k} with a pool of {}",
            pool.len()
        )));
    }
    let distinct = crate::anneal::binomial(pool.len(), k);
    if (count as u128) > distinct {
        return Err(Error::invalid(format!(
            "only {distinct} federations of size {k} exist"
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, "federation-sample"));
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(count);
    while chosen.len() < count {
        let mut m = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
        m.sort_unstable();
        if !chosen.contains(&m) {
            chosen.push(m);
        }
    }
    let by_pool: Vec<&ClientDataset> = pool
        .ids()
        .iter()
        .map(|id| {
            clients
                .iter()
                .find(|c| c.client_id() == id)
                .expect("pool built from clients")
        })
        .collect();
    chosen
        .par_iter()
        .map(|m| {
            let terms = aggregate_indices(&pool, m)?.terms();
            let members: Vec<&ClientDataset> = m.iter().map(|&i| by_pool[i]).collect();
            let report = train_federation(&members, holdout, train)?.report;
            Ok(FederationSample {
                federation: pool.federation(m),
                terms,
                report,
            })
        })
        .collect()
}

struct Metrics {
    eod: Vec<f64>,
    mad: Vec<f64>,
    accuracy: Vec<f64>,
    f1: Vec<f64>,
}

fn metric_vectors(samples: &[FederationSample]) -> Result<Metrics> {
    let take = |name: &str, f: &dyn Fn(&EvalReport) -> Option<f64>| -> Result<Vec<f64>> {
        let v: Vec<f64> = samples
            .iter()
            .map(|s| {
                f(&s.report).ok_or_else(|| {
                    Error::DegenerateMetric(format!("{name} undefined for `{}`", s.federation))
                })
            })
            .collect::<Result<_>>()?;
        if v.iter().all(|&x| x == v[0]) {
            return Err(Error::DegenerateMetric(format!(
                "{name} is constant across the sample"
            )));
        }
        Ok(v)
    };
    Ok(Metrics {
        eod: take("|EOD|", &|r| r.eod.map(f64::abs))?,
        mad: take("|MAD|", &|r| r.mad.map(f64::abs))?,
        accuracy: take("accuracy", &|r| Some(r.accuracy))?,
        f1: take("F1", &|r| r.f1)?,
    })
}

fn objective_on(samples: &[FederationSample], m: &Metrics, w: &PflWeights) -> f64 {
    let pfl: Vec<f64> = samples.iter().map(|s| s.terms.pfl(w)).collect();
    let rho = |ys: &[f64]| spearman(&pfl, ys).ok().flatten().unwrap_or(0.0);
    (rho(&m.eod) + rho(&m.mad)) / 2.0 - (rho(&m.accuracy) + rho(&m.f1)) / 2.0
}

/// Mean Spearman correlation of PFL with the fairness metrics {|EOD|, |MAD|}
/// minus that with the utility metrics {accuracy, F1}. Undefined
/// correlations (constant PFL) count as zero.
pub fn weight_objective(samples: &[FederationSample], weights: &PflWeights) -> Result<f64> {
    check_samples(samples)?;
    Ok(objective_on(samples, &metric_vectors(samples)?, weights))
}

fn check_samples(samples: &[FederationSample]) -> Result<()> {
    if samples.len() < 10 {
        return Err(Error::invalid(format!(
            "weight fitting needs at least 10 federations, got {}",
            samples.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: PflWeights,
    pub objective: f64,
    /// Objective of the default weights on the same sample.
    pub default_objective: f64,
    pub evaluations: usize,
}

/// Maximises [`weight_objective`] by differential evolution over
/// `[0, upper]⁴`. The default weights seed the initial population.
pub fn calibrate_weights(
    samples: &[FederationSample],
    de: &DeConfig,
    upper: f64,
) -> Result<WeightFit> {
    check_samples(samples)?;
    if !(upper > 0.0 && upper.is_finite()) {
        return Err(Error::invalid(format!(
            "weight upper bound must be positive, got {upper}"
        )));
    }
    let metrics = metric_vectors(samples)?;
    let score = |x: &[f64]| {
        let w = PflWeights {
            alpha: x[0],
            beta: x[1],
            gamma: x[2],
            lambda: x[3],
        };
        -objective_on(samples, &metrics, &w)
    };
    let default = PflWeights::default();
    let r = minimize(
        score,
        &[(0.0, upper); 4],
        &[default.as_array().to_vec()],
        de,
    )?;
    Ok(WeightFit {
        weights: PflWeights::from_array([r.best[0], r.best[1], r.best[2], r.best[3]])?,
        objective: -r.value,
        default_objective: objective_on(samples, &metrics, &default),
        evaluations: r.evaluations,
    })
}
