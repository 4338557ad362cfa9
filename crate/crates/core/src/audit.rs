//! Likelihood-ratio membership-inference audit of released bundles.
//!
//! The attacker knows the exact counts `N_{−r*}` of the dataset without the
//! target record `r*`, the noise scale σ, and the released noisy bundle
//! `Ñ`. For each table the cell addressed by `r*` is `N_{−r*} + 1 + noise`
//! if `r*` is a member and `N_{−r*} + noise` otherwise, so the log
//! likelihood ratio over a set of tables is
//!
//! ```text
//! Λ(r*) = (1/σ²) Σ (Ñ(x, y) − N_{−r*}(x, y) − 1/2)
//! ```
//!
//! For an exact release (σ = 0) the unscaled sum is used.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::privacy::{calibrate_sigma, noise_bundle, NoiseCalibration, PrivacyBudget};
use crate::seed;
use crate::tabular::{
    compute_tables, ClientDataset, FeatureSchema, Record, TableBundle, Var, VarPair,
};

/// Fewest targets for which AUC and TPR are reported.
pub const MIN_TARGETS: usize = 50;

/// A privacy budget ε that may be infinite (exact release).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Finite(f64),
    Infinite,
}

impl Epsilon {
    pub fn value(self) -> f64 {
        match self {
            Epsilon::Finite(e) => e,
            Epsilon::Infinite => f64::INFINITY,
        }
    }
}

impl From<f64> for Epsilon {
    fn from(e: f64) -> Self {
        if e.is_infinite() {
            Epsilon::Infinite
        } else {
            Epsilon::Finite(e)
        }
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(e) => write!(f, "{e}"),
            Epsilon::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::Finite(e) => s.serialize_f64(*e),
            Epsilon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(e) => Ok(e.into()),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => {
                Ok(Epsilon::Infinite)
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid epsilon `{t}`"))),
        }
    }
}

/// Attacker view of one target.
#[derive(Debug, Clone)]
pub struct AttackInstance<'a> {
    pub target: &'a Record,
    /// Exact counts without the target.
    pub background: &'a TableBundle,
    pub observed: &'a TableBundle,
    pub sigma: f64,
}

/// Log-likelihood-ratio statistic of `instance` over `pairs`.
pub fn lrt_statistic(instance: &AttackInstance<'_>, pairs: &[VarPair]) -> Result<f64> {
    let mut sum = 0.0;
    for &pair in pairs {
        let missing = || Error::MissingPair(pair.to_string());
        let obs = instance.observed.table(pair).ok_or_else(missing)?;
        let bg = instance.background.table(pair).ok_or_else(missing)?;
        let (x, y) = (
            instance.target.value(pair.first()),
            instance.target.value(pair.second()),
        );
        sum += obs.get(x, y) - bg.get(x, y) - 0.5;
    }
    Ok(if instance.sigma > 0.0 {
        sum / (instance.sigma * instance.sigma)
    } else {
        sum
    })
}

/// One operating point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from the highest threshold down, starting at (0, 0) and
/// ending at (1, 1). Scores tied at a threshold move together.
pub fn roc_curve(positives: &[f64], negatives: &[f64]) -> Vec<RocPoint> {
    let mut scored: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    points
}

/// Trapezoidal area under a ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Largest TPR among operating points with FPR ≤ `max_fpr`.
pub fn tpr_at_fpr(points: &[RocPoint], max_fpr: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fpr <= max_fpr + 1e-12)
        .fold(0.0, |m, p| m.max(p.tpr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub epsilons: Vec<Epsilon>,
    pub delta: f64,
    pub n_targets: usize,
    /// Pair of the single-table attack; defaults to (S, T).
    pub single_pair: Option<(String, String)>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            epsilons: [0.1, 0.5, 1.0, 2.0, 5.0]
                .into_iter()
                .map(Epsilon::Finite)
                .chain([Epsilon::Infinite])
                .collect(),
            delta: crate::privacy::DEFAULT_DELTA,
            n_targets: 1000,
            single_pair: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub epsilon: Epsilon,
    pub sigma: f64,
    pub auc_single: f64,
    pub auc_joint: f64,
    pub tpr_at_1pct_single: f64,
    pub tpr_at_1pct_joint: f64,
    pub tpr_at_5pct_joint: f64,
    #[serde(skip)]
    pub roc_single: Vec<RocPoint>,
    #[serde(skip)]
    pub roc_joint: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub trials: usize,
    pub members: usize,
    pub records: usize,
    pub delta: f64,
    pub single_pair: String,
    pub seed: u64,
    pub results: Vec<AuditResult>,
}

impl AuditReport {
    /// `epsilon,attack,threshold,fpr,tpr` for every ROC point.
    pub fn write_roc_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::invalid(format!("writing ROC: {e}"));
        w.write_record(["epsilon", "attack", "threshold", "fpr", "tpr"])
            .map_err(io)?;
        for r in &self.results {
            for (name, roc) in [("single", &r.roc_single), ("joint", &r.roc_joint)] {
                for p in roc {
                    w.write_record([
                        r.epsilon.to_string(),
                        name.to_owned(),
                        p.threshold.to_string(),
                        p.fpr.to_string(),
                        p.tpr.to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn resolve_pair(schema: &FeatureSchema, names: &Option<(String, String)>) -> Result<VarPair> {
    match names {
        None => Ok(VarPair::new(schema.sensitive(), Var::Target)),
        Some((a, b)) => {
            let find = |n: &str| {
                schema.var_by_name(n).ok_or_else(|| {
                    Error::invalid(format!("unknown column `{n}` in the single-table pair"))
                })
            };
            let (va, vb) = (find(a)?, find(b)?);
            if va == vb {
                return Err(Error::invalid(
                    "the single-table pair needs two distinct columns",
                ));
            }
            Ok(VarPair::new(va, vb))
        }
    }
}

fn sigma_for(epsilon: Epsilon, delta: f64, m: usize) -> Result<f64> {
    match epsilon {
        Epsilon::Infinite => Ok(0.0),
        Epsilon::Finite(e) => Ok(calibrate_sigma(&PrivacyBudget::selection(e, delta)?, m)?.sigma),
    }
}

/// Runs the audit on the pooled rows of `datasets`.
///
/// The rows are shuffled; the first `n_targets` become targets and the rest
/// form the base dataset the attacker knows. The first half of the targets
/// are members: their release is computed from the base plus the target.
/// Each target's noise is drawn from its own seed, shared across ε, so the
/// sweep compares budgets on common random numbers.
pub fn run_audit(
    datasets: &[ClientDataset],
    config: &AuditConfig,
    seed: u64,
) -> Result<AuditReport> {
    if config.epsilons.is_empty() {
        return Err(Error::invalid("the audit needs at least one epsilon"));
    }
    if config.n_targets < MIN_TARGETS {
        return Err(Error::invalid(format!(
            "the audit needs at least {MIN_TARGETS} targets, got {}",
            config.n_targets
        )));
    }
    let schema: Arc<FeatureSchema> = datasets
        .first()
        .map(|d| Arc::clone(d.schema()))
        .ok_or_else(|| Error::invalid("the audit needs at least one dataset"))?;
    if datasets.iter().any(|d| d.schema().hash() != schema.hash()) {
        return Err(Error::invalid("audit datasets must share one schema"));
    }
    let mut rows: Vec<Record> = datasets
        .iter()
        .flat_map(|d| d.rows().iter().cloned())
        .collect();
    if rows.len() <= config.n_targets {
        return Err(Error::invalid(format!(
            "{} records cannot supply {} targets and a background",
            rows.len(),
            config.n_targets
        )));
    }
    rows.shuffle(&mut seed::rng(seed::derive(seed, "audit-targets")));
    let base_rows = rows.split_off(config.n_targets);
    let targets = rows;
    let base = compute_tables(&ClientDataset::new(
        "audit",
        base_rows,
        Arc::clone(&schema),
    )?)?;
    let members = config.n_targets / 2;
    let m = schema.query_count();
    let single = resolve_pair(&schema, &config.single_pair)?;
    let all_pairs = schema.pairs();
    let noise_seed = seed::derive(seed, "audit-noise");

    let results = config
        .epsilons
        .iter()
        .map(|&eps| {
            let sigma = sigma_for(eps, config.delta, m)?;
            let cal = NoiseCalibration::with_sigma(m, sigma)?;
            let scores: Vec<(f64, f64)> = targets
                .par_iter()
                .enumerate()
                .map(|(j, target)| {
                    let mut release = base.clone();
                    if j < members {
                        release.add_record(target);
                    }
                    let observed = noise_bundle(
                        &release,
                        &cal,
                        seed::derive_indexed(noise_seed, "target", j as u64),
                    )?;
                    let inst = AttackInstance {
                        target,
                        background: &base,
                        observed: &observed,
                        sigma,
                    };
                    Ok((
                        lrt_statistic(&inst, &[single])?,
                        lrt_statistic(&inst, &all_pairs)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let (pos, neg) = scores.split_at(members);
            let split = |f: fn(&(f64, f64)) -> f64| -> (Vec<f64>, Vec<f64>) {
                (pos.iter().map(f).collect(), neg.iter().map(f).collect())
            };
            let (ps, ns) = split(|s| s.0);
            let (pj, nj) = split(|s| s.1);
            let roc_single = roc_curve(&ps, &ns);
            let roc_joint = roc_curve(&pj, &nj);
            Ok(AuditResult {
                epsilon: eps,
                sigma,
                auc_single: auc(&roc_single),
                auc_joint: auc(&roc_joint),
                tpr_at_1pct_single: tpr_at_fpr(&roc_single, 0.01),
                tpr_at_1pct_joint: tpr_at_fpr(&roc_joint, 0.01),
                tpr_at_5pct_joint: tpr_at_fpr(&roc_joint, 0.05),
                roc_single,
                roc_joint,
            })
        })
        .collect::<Result<_>>()?;

    Ok(AuditReport {
        trials: config.n_targets,
        members,
        records: base.tables()[0].total() as usize + config.n_targets,
        delta: config.delta,
        single_pair: schema.pair_name(single),
        seed,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_serde() {
        let v: Vec<Epsilon> = serde_json::from_str(r#"[0.5, "inf", 2]"#).unwrap();
        assert_eq!(
            v,
            vec![
                Epsilon::Finite(0.5),
                Epsilon::Infinite,
                Epsilon::Finite(2.0)
            ]
        );
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[0.5,"inf",2.0]"#);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let pos = [0.9, 0.4, 0.4, 0.7];
        let neg = [0.1, 0.4, 0.8];
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let roc = roc_curve(&pos, &neg);
        assert!((auc(&roc) - wins / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation() {
        let roc = roc_curve(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(auc(&roc), 1.0);
        assert_eq!(tpr_at_fpr(&roc, 0.01), 1.0);
    }
}
