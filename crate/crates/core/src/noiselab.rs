//! Noise propagation through the MI estimator and the PFL decision.
//!
//! To first order, the MI error of an aggregate carrying `N(0, kσ²)` noise
//! per cell is the gradient of MI times the noise. With `n` the table total,
//!
//! ```text
//! ∂MI/∂n_xy = (PMI(x, y) − MI) / n
//! σ²_MI     = (kσ²/n²) Σ_xy (PMI(x, y) − MI)²
//! ```
//!
//! The gradient is derived in nats; since it is linear in the logarithms,
//! evaluating PMI and MI in bits gives the gradient in bits per count.
//!
//! The Monte Carlo checks re-noise client bundles per trial from seeds
//! derived as `derive_indexed(seed, label, trial)`, run trials in parallel
//! and reduce the results in trial order.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::anneal::{binomial, propose_swap};
use crate::error::{Error, Result};
use crate::mipfl::{aggregate_indices, mi_bits, BundlePool, Federation, PflWeights};
use crate::privacy::{noise_bundle, NoiseCalibration};
use crate::seed;
use crate::tabular::{ContingencyTable, TableBundle, VarPair};

/// Default trial count below which the studies refuse to run.
pub const MIN_TRIALS: usize = 100;

/// Largest `C(pool, k)` the global check enumerates per trial.
pub const GLOBAL_ENUMERATION_BUDGET: u128 = 10_000;

/// Per-cell MI gradient and PMI of an interior table, both in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSensitivity {
    pub rows: usize,
    pub cols: usize,
    /// `∂MI/∂n_xy`, row-major.
    pub gradient: Vec<f64>,
    /// `PMI(x, y)`, row-major.
    pub pmi: Vec<f64>,
    pub mi: f64,
    pub total: f64,
}

impl MiSensitivity {
    /// `Σ (PMI − MI)²`, the shape factor of the variance prediction.
    pub fn summation(&self) -> f64 {
        self.pmi.iter().map(|p| (p - self.mi).powi(2)).sum()
    }

    /// `σ²_MI` for an aggregate of `k` clients each noised with scale `σ`.
    pub fn predicted_variance(&self, k: usize, sigma: f64) -> f64 {
        k as f64 * sigma * sigma / (self.total * self.total) * self.summation()
    }
}

/// Analytic MI gradient. Every cell must be strictly positive.
pub fn mi_gradient(table: &ContingencyTable) -> Result<MiSensitivity> {
    let (rows, cols) = table.shape();
    let cells = table.cells();
    if let Some(i) = cells.iter().position(|&c| !(c > 0.0)) {
        return Err(Error::BoundaryCell {
            row: i / cols,
            col: i % cols,
            value: cells[i],
        });
    }
    let n = table.total();
    let rs = table.row_marginals();
    let cs = table.col_marginals();
    let pmi: Vec<f64> = cells
        .iter()
        .enumerate()
        .map(|(i, &v)| (v * n / (rs[i / cols] * cs[i % cols])).log2())
        .collect();
    let mi: f64 = cells.iter().zip(&pmi).map(|(&v, p)| v / n * p).sum();
    let gradient = pmi.iter().map(|p| (p - mi) / n).collect();
    Ok(MiSensitivity {
        rows,
        cols,
        gradient,
        pmi,
        mi,
        total: n,
    })
}

/// First-order variance of the MI estimate of `table` when `k` clients each
/// add `N(0, σ²)` noise to every cell.
pub fn predict_mi_variance(table: &ContingencyTable, k: usize, sigma: f64) -> Result<f64> {
    Ok(mi_gradient(table)?.predicted_variance(k, sigma))
}

/// Mean and unbiased variance. Values are shifted by the first sample so a
/// constant series yields exactly zero variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let x0 = xs[0];
    let s: f64 = xs.iter().map(|x| x - x0).sum();
    let mean = x0 + s / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - x0).powi(2)).sum();
    let var = ((ss - s * s / n as f64) / (n - 1) as f64).max(0.0);
    (mean, var)
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        Err(Error::invalid(format!(
            "at least {MIN_TRIALS} trials are required, got {trials}"
        )))
    } else {
        Ok(())
    }
}

/// Synthetic aggregate for the SNR study: uniform cells plus `dependence`
/// of the mass spread evenly over the diagonal, scaled to `total` counts
/// and rounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnrTableSpec {
    pub rows: usize,
    pub cols: usize,
    pub total: f64,
    pub dependence: f64,
}

impl Default for SnrTableSpec {
    fn default() -> Self {
        Self {
            rows: 2,
            cols: 2,
            total: 1000.0,
            dependence: 0.6,
        }
    }
}

impl SnrTableSpec {
    pub fn build(&self) -> Result<ContingencyTable> {
        if self.rows == 0
            || self.cols == 0
            || !(self.total > 0.0)
            || !(0.0..=1.0).contains(&self.dependence)
        {
            return Err(Error::invalid(format!("invalid table spec {self:?}")));
        }
        let d = self.rows.min(self.cols);
        let base = (1.0 - self.dependence) / (self.rows * self.cols) as f64;
        let cells = (0..self.rows * self.cols)
            .map(|i| {
                let (r, c) = (i / self.cols, i % self.cols);
                let p = base
                    + if r == c {
                        self.dependence / d as f64
                    } else {
                        0.0
                    };
                (p * self.total).round()
            })
            .collect();
        ContingencyTable::from_cells(
            VarPair::new(
                crate::tabular::Var::Feature(0),
                crate::tabular::Var::Feature(1),
            ),
            self.rows,
            self.cols,
            cells,
            true,
        )
    }
}

/// Summary of one SNR level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrLevel {
    /// Mean cell count over noise standard deviation; `None` is noiseless.
    pub snr: Option<f64>,
    pub sigma: f64,
    pub clean_mi: f64,
    /// Mean of `noisy MI − clean MI`.
    pub bias: f64,
    pub std: f64,
    pub predicted_std: Option<f64>,
    /// `|bias| < 3·std/√trials`.
    pub unbiased: bool,
    /// `std / predicted_std`.
    pub std_ratio: Option<f64>,
    /// Trials whose noisy table had a non-positive total and were skipped.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrStudy {
    pub trials: usize,
    pub seed: u64,
    pub levels: Vec<SnrLevel>,
    /// Per-level errors in trial order; `NaN` marks skipped trials.
    #[serde(skip)]
    pub errors: Vec<Vec<f64>>,
}

impl SnrStudy {
    /// One row per (level, trial): `snr,trial,sigma,error`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::invalid(format!("writing study: {e}"));
        w.write_record(["snr", "trial", "sigma", "error"])
            .map_err(io)?;
        for (level, errs) in self.levels.iter().zip(&self.errors) {
            let snr = level
                .snr
                .map_or_else(|| "inf".to_owned(), |s| s.to_string());
            for (t, e) in errs.iter().enumerate() {
                w.write_record([
                    snr.clone(),
                    t.to_string(),
                    level.sigma.to_string(),
                    e.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Monte Carlo error of the plug-in MI under additive Gaussian noise, one
/// level per entry of `snr_levels` (`f64::INFINITY` means no noise).
pub fn snr_study(
    table: &ContingencyTable,
    snr_levels: &[f64],
    trials: usize,
    seed: u64,
) -> Result<SnrStudy> {
    check_trials(trials)?;
    let (rows, cols) = table.shape();
    let clean = mi_from_table(table)?;
    let mean_cell = table.total() / table.cells().len() as f64;
    let sens = mi_gradient(table).ok();
    let mut levels = Vec::with_capacity(snr_levels.len());
    let mut all_errors = Vec::with_capacity(snr_levels.len());
    for (li, &snr) in snr_levels.iter().enumerate() {
        if !(snr > 0.0) {
            return Err(Error::invalid(format!(
                "SNR levels must be positive, got {snr}"
            )));
        }
        let sigma = if snr.is_infinite() {
            0.0
        } else {
            mean_cell / snr
        };
        let level_seed = seed::derive_indexed(seed, "snr-level", li as u64);
        let errors: Vec<f64> = (0..trials as u64)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(seed::derive_indexed(level_seed, "trial", t));
                let noisy: Vec<f64> = table
                    .cells()
                    .iter()
                    .map(|&c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + sigma * z
                    })
                    .collect();
                mi_bits(&noisy, rows, cols).map_or(f64::NAN, |m| m - clean)
            })
            .collect();
        let valid: Vec<f64> = errors.iter().copied().filter(|e| !e.is_nan()).collect();
        let (bias, var) = mean_var(&valid);
        let std = var.sqrt();
        let predicted_std = sens.as_ref().map(|s| s.predicted_variance(1, sigma).sqrt());
        levels.push(SnrLevel {
            snr: snr.is_finite().then_some(snr),
            sigma,
            clean_mi: clean,
            bias,
            std,
            predicted_std,
            unbiased: bias.abs() < 3.0 * std / (valid.len() as f64).sqrt()
                || (bias == 0.0 && std == 0.0),
            std_ratio: predicted_std.filter(|&p| p > 0.0).map(|p| std / p),
            degenerate: trials - valid.len(),
        });
        all_errors.push(errors);
    }
    Ok(SnrStudy {
        trials,
        seed,
        levels,
        errors: all_errors,
    })
}

fn mi_from_table(table: &ContingencyTable) -> Result<f64> {
    crate::mipfl::mi_from_counts(table)
}

/// Result of [`decision_variance_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVarianceReport {
    pub k: usize,
    pub sigma: f64,
    pub trials: usize,
    pub federation: Federation,
    pub neighbor: Federation,
    pub mean_d: f64,
    pub var_d: f64,
    /// Empirical variance of the noisy PFL of `federation`.
    pub sigma2_pfl: f64,
    /// `Var(d) / (2σ²_PFL/k)`; undefined without noise.
    pub variance_ratio: Option<f64>,
}

fn noised_pool(
    pool: &BundlePool,
    members: &[usize],
    cal: &NoiseCalibration,
    trial_seed: u64,
) -> Result<BundlePool> {
    let bundles: Vec<TableBundle> = members
        .iter()
        .map(|&i| noise_bundle(&pool.bundles()[i], cal, trial_seed))
        .collect::<Result<_>>()?;
    BundlePool::new(pool.schema().clone(), bundles)
}

fn exact_pool(pool: &BundlePool) -> Result<()> {
    match pool.bundles().iter().find(|b| !b.is_exact()) {
        Some(b) => Err(Error::invalid(format!(
            "noise studies need exact bundles; `{}` is noised",
            b.client_id()
        ))),
        None => Ok(()),
    }
}

/// Position of each `targets` index inside the sorted `union`.
fn positions(union: &[usize], targets: &[usize]) -> Vec<usize> {
    targets
        .iter()
        .map(|t| union.binary_search(t).expect("member of union"))
        .collect()
}

/// Noisy PFL of `a` and `b` per trial, re-noising only their members.
#[allow(clippy::too_many_arguments)]
fn paired_trials(
    pool: &BundlePool,
    a: &[usize],
    b: &[usize],
    sigma: f64,
    weights: &PflWeights,
    trials: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<(f64, f64)>> {
    let cal = NoiseCalibration::with_sigma(pool.schema().query_count(), sigma)?;
    let mut union: Vec<usize> = a.iter().chain(b).copied().collect();
    union.sort_unstable();
    union.dedup();
    let pa = positions(&union, a);
    let pb = positions(&union, b);
    let base = seed::derive(seed, label);
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let noisy = noised_pool(pool, &union, &cal, seed::derive_indexed(base, "trial", t))?;
            let ya = aggregate_indices(&noisy, &pa)?.pfl(weights);
            let yb = aggregate_indices(&noisy, &pb)?.pfl(weights);
            Ok((ya, yb))
        })
        .collect()
}

fn single_swap(
    pool: &BundlePool,
    a: &Federation,
    b: &Federation,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if a.k() != b.k() {
        return Err(Error::InvalidFederation(
            "federations differ in size".into(),
        ));
    }
    let ia = pool.indices(a)?;
    let ib = pool.indices(b)?;
    let shared = ia.iter().filter(|i| ib.contains(i)).count();
    if shared + 1 != a.k() {
        return Err(Error::InvalidFederation(format!(
            "`{a}` and `{b}` must differ by exactly one swap"
        )));
    }
    Ok((ia, ib))
}

/// A uniformly random federation of size `k` and a single-swap neighbour,
/// drawn from `seed`.
pub fn random_pair(pool: &BundlePool, k: usize, seed: u64) -> Result<(Federation, Federation)> {
    if k == 0 || pool.len() <= k {
        return Err(Error::NoNeighbor {
            pool: pool.len(),
            k,
        });
    }
    let mut rng = seed::rng(seed::derive(seed, "pair"));
    let mut w = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
    w.sort_unstable();
    let (out, inn) = propose_swap(&w, pool.len(), &mut rng);
    let w2: Vec<usize> = w.iter().map(|&m| if m == out { inn } else { m }).collect();
    Ok((pool.federation(&w), pool.federation(&w2)))
}

/// Empirical variance of the decision variable `d = Y(W') − Y(W)` for a
/// single swap, against the prediction `2σ²_PFL/k`.
pub fn decision_variance_check(
    pool: &BundlePool,
    federation: &Federation,
    neighbor: &Federation,
    sigma: f64,
    weights: &PflWeights,
    trials: usize,
    seed: u64,
) -> Result<DecisionVarianceReport> {
    check_trials(trials)?;
    exact_pool(pool)?;
    let (a, b) = single_swap(pool, federation, neighbor)?;
    let ys = paired_trials(pool, &a, &b, sigma, weights, trials, seed, "decision")?;
    let d: Vec<f64> = ys.iter().map(|(ya, yb)| yb - ya).collect();
    let ya: Vec<f64> = ys.iter().map(|p| p.0).collect();
    let (mean_d, var_d) = mean_var(&d);
    let (_, sigma2_pfl) = mean_var(&ya);
    let k = federation.k();
    let predicted = 2.0 * sigma2_pfl / k as f64;
    Ok(DecisionVarianceReport {
        k,
        sigma,
        trials,
        federation: federation.clone(),
        neighbor: neighbor.clone(),
        mean_d,
        var_d,
        sigma2_pfl,
        variance_ratio: (predicted > 0.0).then(|| var_d / predicted),
    })
}

/// Result of [`misorder_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisorderReport {
    pub k: usize,
    pub sigma: f64,
    pub trials: usize,
    /// Exact PFL gap `PFL(worse) − PFL(better) > 0`.
    pub delta_gap: f64,
    pub sigma2_pfl: f64,
    pub var_d: f64,
    pub misorders: usize,
    pub empirical_misorder_rate: f64,
    /// `exp(−kΔ²/(4σ²_PFL))`, or 0 without noise.
    pub bound: f64,
    /// `Φ(−Δ / √Var(d))` from the empirical decision variance.
    pub gaussian_rate: f64,
    /// Binomial standard error evaluated at the bound.
    pub standard_error: f64,
    /// Empirical rate ≤ bound + 3 standard errors.
    pub within_bound: bool,
}

/// Misordering rate `Pr(Y(worse) ≤ Y(better))` against the local stability
/// bound. The federations must differ by one swap and `worse` must have the
/// strictly larger exact PFL.
pub fn misorder_check(
    pool: &BundlePool,
    better: &Federation,
    worse: &Federation,
    sigma: f64,
    weights: &PflWeights,
    trials: usize,
    seed: u64,
) -> Result<MisorderReport> {
    check_trials(trials)?;
    exact_pool(pool)?;
    let (a, b) = single_swap(pool, better, worse)?;
    let delta_gap =
        aggregate_indices(pool, &b)?.pfl(weights) - aggregate_indices(pool, &a)?.pfl(weights);
    if !(delta_gap > 0.0) {
        return Err(Error::invalid(format!(
            "exact PFL gap must be positive for the misorder check, got {delta_gap}"
        )));
    }
    let ys = paired_trials(pool, &a, &b, sigma, weights, trials, seed, "misorder")?;
    let misorders = ys.iter().filter(|(ya, yb)| yb <= ya).count();
    let d: Vec<f64> = ys.iter().map(|(ya, yb)| yb - ya).collect();
    let (_, var_d) = mean_var(&d);
    let ya: Vec<f64> = ys.iter().map(|p| p.0).collect();
    let (_, sigma2_pfl) = mean_var(&ya);
    let k = better.k();
    let bound = if sigma2_pfl > 0.0 {
        (-(k as f64) * delta_gap * delta_gap / (4.0 * sigma2_pfl)).exp()
    } else {
        0.0
    };
    let gaussian_rate = if var_d > 0.0 {
        standard_normal_cdf(-delta_gap / var_d.sqrt())
    } else {
        0.0
    };
    let rate = misorders as f64 / trials as f64;
    let standard_error = (bound * (1.0 - bound) / trials as f64).sqrt();
    Ok(MisorderReport {
        k,
        sigma,
        trials,
        delta_gap,
        sigma2_pfl,
        var_d,
        misorders,
        empirical_misorder_rate: rate,
        bound,
        gaussian_rate,
        standard_error,
        within_bound: rate <= bound + 3.0 * standard_error,
    })
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// How the tolerance `μ` of the global check is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuSpec {
    Absolute(f64),
    /// `μ = 2(E‖ξ‖∞ + s·σ_PFL)`, resolved after the trials.
    SdMargin(f64),
}

/// Result of [`global_optimality_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalOptimalityReport {
    pub k: usize,
    pub sigma: f64,
    pub trials: usize,
    pub federations: usize,
    pub exact_optimum: Federation,
    pub exact_min_pfl: f64,
    pub mu: f64,
    /// Monte Carlo mean of `max_W |Y(W) − PFL(W)|`.
    pub sup_noise_estimate: f64,
    /// Largest per-federation variance of the noisy PFL.
    pub sigma2_pfl: f64,
    pub failures: usize,
    /// Fraction of trials whose noisy minimiser is more than `μ` worse than
    /// the exact optimum.
    pub failure_rate: f64,
    pub mean_gap: f64,
    /// `2 exp(−(μ/2 − E‖ξ‖∞)²/(2σ²_PFL))`, when `μ > 2E‖ξ‖∞`.
    pub bound: Option<f64>,
    pub standard_error: Option<f64>,
    /// Failure rate ≤ bound + 3 standard errors; `None` when the bound does
    /// not apply.
    pub within_bound: Option<bool>,
    /// Per-trial gaps in trial order.
    #[serde(skip)]
    pub gaps: Vec<f64>,
}

impl GlobalOptimalityReport {
    /// Re-evaluates failure rate and bound for another `μ` on the same
    /// trials.
    pub fn with_mu(&self, mu: MuSpec) -> Self {
        let mu = match mu {
            MuSpec::Absolute(m) => m,
            MuSpec::SdMargin(s) => 2.0 * (self.sup_noise_estimate + s * self.sigma2_pfl.sqrt()),
        };
        let failures = self.gaps.iter().filter(|&&g| g > mu).count();
        let failure_rate = failures as f64 / self.trials as f64;
        let slack = mu / 2.0 - self.sup_noise_estimate;
        let bound = (slack > 0.0 && self.sigma2_pfl > 0.0)
            .then(|| (2.0 * (-(slack * slack) / (2.0 * self.sigma2_pfl)).exp()).min(1.0));
        let standard_error = bound.map(|b| (b * (1.0 - b) / self.trials as f64).sqrt());
        let within_bound = bound
            .zip(standard_error)
            .map(|(b, se)| failure_rate <= b + 3.0 * se);
        Self {
            mu,
            failures,
            failure_rate,
            bound,
            standard_error,
            within_bound,
            ..self.clone()
        }
    }
}

/// Per trial: re-noises every client, finds the noisy minimiser by full
/// enumeration and records its exact-PFL gap to the exact optimum.
pub fn global_optimality_check(
    pool: &BundlePool,
    k: usize,
    sigma: f64,
    weights: &PflWeights,
    trials: usize,
    mu: MuSpec,
    seed: u64,
) -> Result<GlobalOptimalityReport> {
    check_trials(trials)?;
    exact_pool(pool)?;
    let exact = crate::anneal::enumerate_pfl(pool, weights, k, GLOBAL_ENUMERATION_BUDGET)?;
    let count = binomial(pool.len(), k) as usize;
    let (best_members, exact_min) = exact
        .iter()
        .fold(&exact[0], |b, c| if c.1 < b.1 { c } else { b })
        .clone();
    let cal = NoiseCalibration::with_sigma(pool.schema().query_count(), sigma)?;
    let all: Vec<usize> = (0..pool.len()).collect();
    let base = seed::derive(seed, "global");

    // (gap, sup|ξ|, ξ per federation)
    let per_trial: Vec<(f64, f64, Vec<f64>)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let noisy = noised_pool(pool, &all, &cal, seed::derive_indexed(base, "trial", t))?;
            let mut xi = Vec::with_capacity(count);
            let mut argmin = 0;
            let mut ymin = f64::INFINITY;
            for (i, (members, truth)) in exact.iter().enumerate() {
                let y = aggregate_indices(&noisy, members)?.pfl(weights);
                if y < ymin {
                    ymin = y;
                    argmin = i;
                }
                xi.push(y - truth);
            }
            let sup = xi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            Ok((exact[argmin].1 - exact_min, sup, xi))
        })
        .collect::<Result<_>>()?;

    let gaps: Vec<f64> = per_trial.iter().map(|p| p.0).collect();
    let sups: Vec<f64> = per_trial.iter().map(|p| p.1).collect();
    let sup_noise_estimate = mean_var(&sups).0;
    let sigma2_pfl = (0..count)
        .map(|w| {
            let xs: Vec<f64> = per_trial.iter().map(|p| p.2[w]).collect();
            mean_var(&xs).1
        })
        .fold(0.0f64, f64::max);
    let report = GlobalOptimalityReport {
        k,
        sigma,
        trials,
        federations: count,
        exact_optimum: pool.federation(&best_members),
        exact_min_pfl: exact_min,
        mu: 0.0,
        sup_noise_estimate,
        sigma2_pfl,
        failures: 0,
        failure_rate: 0.0,
        mean_gap: mean_var(&gaps).0,
        bound: None,
        standard_error: None,
        within_bound: None,
        gaps,
    };
    Ok(report.with_mu(mu))
}
