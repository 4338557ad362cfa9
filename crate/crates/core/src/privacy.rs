//! Gaussian-mechanism release of contingency tables with RDP accounting.
//!
//! Each table has L2 sensitivity 1 (one record moves one cell by ±1). At
//! order `α` the Gaussian mechanism is `α / (2σ²)`-RDP, and releasing `M`
//! tables composes linearly to `Mα / (2σ²)`. Conversion to `(ε, δ)` is
//!
//! ```text
//! ε(δ) = min_{α>1}  Mα/(2σ²) + ln(1/δ)/(α-1)
//! ```
//!
//! whose minimiser `α* = 1 + sqrt(B/A)` (with `A = M/(2σ²)`, `B = ln(1/δ)`)
//! gives the closed-form calibration
//!
//! ```text
//! σ = (sqrt(2M ln(1/δ)) + sqrt(2M (ln(1/δ) + ε))) / (2ε).
//! ```

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tabular::TableBundle;

pub const DEFAULT_DELTA: f64 = 1e-5;

/// L2 sensitivity of one contingency-table query.
pub const TABLE_SENSITIVITY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Phase 1 release of noisy tables (ε₁).
    Selection,
    /// Phase 3 training (ε₂).
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
    phase: Phase,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64, phase: Phase) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidBudget(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidBudget(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(Self {
            epsilon,
            delta,
            phase,
        })
    }

    pub fn selection(epsilon: f64, delta: f64) -> Result<Self> {
        Self::new(epsilon, delta, Phase::Selection)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub query_count: usize,
    pub sigma: f64,
    pub optimal_order: f64,
    pub sensitivity: f64,
}

impl NoiseCalibration {
    /// A calibration with an explicit noise scale, bypassing the budget.
    /// `sigma = 0` releases exact counts and is only meant for tests and
    /// overrides.
    pub fn with_sigma(query_count: usize, sigma: f64) -> Result<Self> {
        if query_count == 0 {
            return Err(Error::invalid("query count must be at least 1"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise scale must be finite and non-negative, got {sigma}"
            )));
        }
        Ok(Self {
            query_count,
            sigma,
            optimal_order: f64::INFINITY,
            sensitivity: TABLE_SENSITIVITY,
        })
    }
}

/// Number of released tables for `K` features plus the target.
pub fn query_count(feature_count: usize) -> usize {
    feature_count * (feature_count + 1) / 2
}

fn closed_form_sigma(epsilon: f64, delta: f64, m: usize) -> f64 {
    let b = (1.0 / delta).ln();
    let m = m as f64;
    ((2.0 * m * b).sqrt() + (2.0 * m * (b + epsilon)).sqrt()) / (2.0 * epsilon)
}

fn optimal_order(sigma: f64, m: usize, delta: f64) -> f64 {
    let a = m as f64 / (2.0 * sigma * sigma);
    let b = (1.0 / delta).ln();
    1.0 + (b / a).sqrt()
}

/// Closed-form noise scale for `M` Gaussian queries under `budget`.
///
/// The returned σ is nudged up by a few ulps if floating-point rounding would
/// otherwise put [`verify_epsilon`] above the budget.
pub fn calibrate_sigma(budget: &PrivacyBudget, m: usize) -> Result<NoiseCalibration> {
    if m == 0 {
        return Err(Error::invalid("query count must be at least 1"));
    }
    let mut sigma = closed_form_sigma(budget.epsilon, budget.delta, m);
    while verify_epsilon(sigma, m, budget.delta) > budget.epsilon {
        sigma *= 1.0 + 4.0 * f64::EPSILON;
    }
    Ok(NoiseCalibration {
        query_count: m,
        sigma,
        optimal_order: optimal_order(sigma, m, budget.delta),
        sensitivity: TABLE_SENSITIVITY,
    })
}

/// Smallest σ whose numerically minimised ε stays within the budget, found
/// by bisection on [`verify_epsilon`]. Agrees with the closed form; kept as
/// an independent route for reporting.
pub fn numerical_sigma(budget: &PrivacyBudget, m: usize) -> f64 {
    let target = budget.epsilon;
    let (mut lo, mut hi) = (1e-6, 1.0);
    while verify_epsilon(hi, m, budget.delta) > target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if verify_epsilon(mid, m, budget.delta) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= hi * 1e-14 {
            break;
        }
    }
    hi
}

/// Converts `M`-fold Gaussian RDP at noise `sigma` to ε at `delta` by
/// minimising over the order numerically.
///
/// The objective `Aα + B/(α-1)` is convex in `t = ln(α-1)` as
/// `A(1 + e^t) + B e^{-t}`, so golden-section search over a wide range of
/// `t` covers orders from just above 1 to ~1e21.
pub fn verify_epsilon(sigma: f64, m: usize, delta: f64) -> f64 {
    assert!(sigma > 0.0 && m >= 1 && delta > 0.0 && delta < 1.0);
    let a = m as f64 / (2.0 * sigma * sigma);
    let b = (1.0 / delta).ln();
    let f = |t: f64| a * (1.0 + t.exp()) + b * (-t).exp();

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-50.0f64, 50.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-12 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    f1.min(f2).min(f(0.5 * (lo + hi)))
}

/// Adds independent `N(0, σ²)` noise to every cell of every table.
///
/// The stream is derived from `(rng_seed, client_id)`, so distinct clients
/// may be noised concurrently from one master seed. Draws are standard
/// normals scaled by σ in table/cell order; two calls with the same seed but
/// different σ therefore share their underlying normals. Negative cells are
/// kept.
pub fn noise_bundle(
    bundle: &TableBundle,
    calibration: &NoiseCalibration,
    rng_seed: u64,
) -> Result<TableBundle> {
    if !bundle.is_exact() {
        return Err(Error::invalid(format!(
            "bundle of `{}` is already noised",
            bundle.client_id()
        )));
    }
    if calibration.query_count != bundle.len() {
        return Err(Error::QueryCountMismatch {
            expected: calibration.query_count,
            found: bundle.len(),
        });
    }
    let sigma = calibration.sigma;
    let mut rng = seed::rng(seed::derive(rng_seed, bundle.client_id().as_str()));
    let tables = bundle
        .tables()
        .iter()
        .map(|t| {
            let cells = t
                .cells()
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + sigma * z
                })
                .collect();
            t.with_cells(cells)
        })
        .collect();
    Ok(bundle.replace_tables(tables, sigma))
}

/// Per-client total ε by sequential composition: selected clients pay both
/// phases, the others only the release.
pub fn total_budget(selected: bool, eps1: f64, eps2: f64) -> f64 {
    if selected {
        eps1 + eps2
    } else {
        eps1
    }
}

/// One row of the σ-versus-K table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub sigma: f64,
    pub optimal_order: f64,
    /// σ from direct numerical minimisation, for comparison.
    pub sigma_numeric: f64,
}

pub fn calibration_report(
    budget: &PrivacyBudget,
    feature_count: usize,
) -> Result<CalibrationReport> {
    let m = query_count(feature_count);
    let cal = calibrate_sigma(budget, m)?;
    Ok(CalibrationReport {
        epsilon: budget.epsilon,
        delta: budget.delta,
        k: feature_count,
        m,
        sigma: cal.sigma,
        optimal_order: cal.optimal_order,
        sigma_numeric: numerical_sigma(budget, m),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::tabular::{compute_tables, ClientDataset, FeatureDescriptor, FeatureSchema, Record};

    fn budget(eps: f64) -> PrivacyBudget {
        PrivacyBudget::selection(eps, DEFAULT_DELTA).unwrap()
    }

    /// Objective evaluated on a dense grid of orders; independent of the
    /// golden-section search.
    fn grid_epsilon(sigma: f64, m: usize, delta: f64) -> f64 {
        let a = m as f64 / (2.0 * sigma * sigma);
        let b = (1.0 / delta).ln();
        (0..200_000)
            .map(|i| 1.0 + 10f64.powf(-6.0 + 12.0 * i as f64 / 200_000.0))
            .map(|alpha| a * alpha + b / (alpha - 1.0))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn query_counts() {
        assert_eq!(query_count(10), 55);
        assert_eq!(query_count(5), 15);
        assert_eq!(query_count(1), 1);
    }

    #[test]
    fn single_query_sigma() {
        // (sqrt(2 ln 1e5) + sqrt(2 (ln 1e5 + 1))) / 2
        let expected = ((2.0 * 1e5f64.ln()).sqrt() + (2.0 * (1e5f64.ln() + 1.0)).sqrt()) / 2.0;
        let cal = calibrate_sigma(&budget(1.0), 1).unwrap();
        assert!((cal.sigma - expected).abs() < 1e-9);
        assert!((cal.sigma - 4.90).abs() < 0.01, "{}", cal.sigma);
    }

    #[test]
    fn table_rows_within_five_percent() {
        for (m, published) in [
            (55, 36.5),
            (15, 18.2),
            (210, 71.8),
            (465, 107.4),
            (1275, 179.2),
        ] {
            let s = calibrate_sigma(&budget(1.0), m).unwrap().sigma;
            assert!(
                (s - published).abs() / published < 0.05,
                "M={m}: {s} vs {published}"
            );
        }
        let s = calibrate_sigma(&budget(1.0), 55).unwrap().sigma;
        assert!((s - 36.3).abs() < 0.1);
    }

    #[test]
    fn verify_matches_grid_oracle() {
        for &(sigma, m) in &[
            (36.5, 55usize),
            (4.9, 1),
            (71.8, 210),
            (3.0, 15),
            (500.0, 3),
        ] {
            let fast = verify_epsilon(sigma, m, 1e-5);
            let grid = grid_epsilon(sigma, m, 1e-5);
            assert!(fast <= grid * (1.0 + 1e-9), "{sigma} {m}: {fast} vs {grid}");
            assert!(
                (fast - grid).abs() / grid < 1e-6,
                "{sigma} {m}: {fast} vs {grid}"
            );
        }
    }

    #[test]
    fn verify_edge_cases() {
        let cal = calibrate_sigma(&budget(1.0), 55).unwrap();
        assert!(verify_epsilon(cal.sigma, 55, 1e-5) <= 1.0);
        assert!(verify_epsilon(1e9, 1, 1e-5) < 1e-6);
        assert!(verify_epsilon(71.8, 210, 1e-5) <= 1.0);
    }

    #[test]
    fn optimal_order_is_the_minimiser() {
        let cal = calibrate_sigma(&budget(1.0), 55).unwrap();
        let a = 55.0 / (2.0 * cal.sigma * cal.sigma);
        let b = 1e5f64.ln();
        let at = |alpha: f64| a * alpha + b / (alpha - 1.0);
        let best = at(cal.optimal_order);
        assert!((best - 1.0).abs() < 1e-9);
        assert!(at(cal.optimal_order * 1.01) > best && at(cal.optimal_order * 0.99) > best);
    }

    #[test]
    fn numerical_sigma_agrees_with_closed_form() {
        for m in [1, 15, 55, 1275] {
            let b = budget(1.0);
            let closed = calibrate_sigma(&b, m).unwrap().sigma;
            let num = numerical_sigma(&b, m);
            assert!((closed - num).abs() / closed < 1e-9, "{m}: {closed} {num}");
        }
    }

    #[test]
    fn rejects_invalid_budgets() {
        assert!(PrivacyBudget::selection(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::selection(-1.0, 1e-5).is_err());
        assert!(PrivacyBudget::selection(1.0, 0.0).is_err());
        assert!(PrivacyBudget::selection(1.0, 1.0).is_err());
    }

    #[test]
    fn total_budget_composes() {
        assert_eq!(total_budget(false, 1.0, 2.0), 1.0);
        assert_eq!(total_budget(true, 1.0, 2.0), 3.0);
        assert_eq!(total_budget(true, 1.0, 0.0), 1.0);
    }

    fn bundle() -> TableBundle {
        let schema = Arc::new(
            FeatureSchema::new(
                vec![
                    FeatureDescriptor::indexed("a", 3),
                    FeatureDescriptor::indexed("b", 2),
                ],
                0,
                FeatureDescriptor::indexed("t", 2),
            )
            .unwrap(),
        );
        let rows = (0..50)
            .map(|i| Record::new(vec![i % 3, i % 2], (i / 7) % 2))
            .collect();
        compute_tables(&ClientDataset::new("client", rows, schema).unwrap()).unwrap()
    }

    #[test]
    fn zero_noise_only_drops_exact_flag() {
        let b = bundle();
        let out = noise_bundle(&b, &NoiseCalibration::with_sigma(3, 0.0).unwrap(), 5).unwrap();
        assert!(!out.is_exact());
        assert_eq!(out.noise_scale(), 0.0);
        for (x, y) in b.tables().iter().zip(out.tables()) {
            assert_eq!(x.cells(), y.cells());
        }
    }

    #[test]
    fn noise_is_deterministic_and_checked() {
        let b = bundle();
        let cal = NoiseCalibration::with_sigma(3, 2.0).unwrap();
        let x = noise_bundle(&b, &cal, 11).unwrap();
        assert_eq!(x, noise_bundle(&b, &cal, 11).unwrap());
        assert_ne!(x, noise_bundle(&b, &cal, 12).unwrap());
        assert!(noise_bundle(&x, &cal, 1).is_err());
        let wrong = NoiseCalibration::with_sigma(4, 2.0).unwrap();
        assert!(matches!(
            noise_bundle(&b, &wrong, 1),
            Err(Error::QueryCountMismatch {
                expected: 4,
                found: 3
            })
        ));
    }
}
