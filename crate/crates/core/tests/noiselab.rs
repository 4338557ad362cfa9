use std::sync::Arc;

use profed_core::error::Error;
use profed_core::mipfl::{aggregate, BundlePool, Federation, PflWeights};
use profed_core::noiselab::{
    decision_variance_check, global_optimality_check, mi_gradient, misorder_check,
    predict_mi_variance, random_pair, snr_study, MuSpec, SnrTableSpec,
};
use profed_core::privacy::{noise_bundle, NoiseCalibration};
use profed_core::seed;
use profed_core::tabular::synth::presets;
use profed_core::tabular::{
    compute_tables, empty_bundle, ClientId, ContingencyTable, Var, VarPair,
};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Plug-in MI in bits, written directly from the definition.
fn mi_oracle(cells: &[f64], rows: usize, cols: usize) -> f64 {
    let n: f64 = cells.iter().sum();
    let mut mi = 0.0;
    for r in 0..rows {
        let pr: f64 = (0..cols).map(|c| cells[r * cols + c]).sum::<f64>() / n;
        for c in 0..cols {
            let pc: f64 = (0..rows).map(|rr| cells[rr * cols + c]).sum::<f64>() / n;
            let p = cells[r * cols + c] / n;
            if p > 0.0 {
                mi += p * (p / (pr * pc)).ln();
            }
        }
    }
    mi / std::f64::consts::LN_2
}

fn table(rows: usize, cols: usize, cells: Vec<f64>) -> ContingencyTable {
    ContingencyTable::from_cells(
        VarPair::new(Var::Feature(0), Var::Feature(1)),
        rows,
        cols,
        cells,
        true,
    )
    .unwrap()
}

fn homogeneous_pool() -> BundlePool {
    let (schema, data) = presets::homogeneous(11, 20_000, 1).unwrap();
    BundlePool::new(
        Arc::clone(&schema),
        data.iter().map(|d| compute_tables(d).unwrap()),
    )
    .unwrap()
}

/// A single-swap pair ordered so the first has the lower exact PFL.
fn ordered_pair(pool: &BundlePool, k: usize, s: u64) -> (Federation, Federation) {
    let w = PflWeights::default();
    let (a, b) = random_pair(pool, k, s).unwrap();
    if aggregate(pool, &a).unwrap().pfl(&w) <= aggregate(pool, &b).unwrap().pfl(&w) {
        (a, b)
    } else {
        (b, a)
    }
}

#[test]
fn gradient_of_uniform_table_is_zero() {
    let g = mi_gradient(&table(2, 2, vec![25.0; 4])).unwrap();
    assert!(g.gradient.iter().all(|&x| x.abs() < 1e-15));
    assert!(g.pmi.iter().all(|&x| x.abs() < 1e-15));
    assert_eq!(
        predict_mi_variance(&table(2, 2, vec![25.0; 4]), 3, 10.0).unwrap(),
        0.0
    );
}

#[test]
fn gradient_matches_central_differences() {
    let check = |t: &ContingencyTable| {
        let (rows, cols) = t.shape();
        let g = mi_gradient(t).unwrap();
        // Relative to the gradient's largest entry so near-zero cells do not
        // amplify the O(h²) truncation error.
        let scale = g.gradient.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
        for i in 0..rows * cols {
            let mut up = t.cells().to_vec();
            let mut down = t.cells().to_vec();
            up[i] += 0.5;
            down[i] -= 0.5;
            let fd = mi_oracle(&up, rows, cols) - mi_oracle(&down, rows, cols);
            let an = g.gradient[i];
            assert!((fd - an).abs() / scale < 1e-3, "cell {i}: {fd} vs {an}");
        }
    };
    check(&table(2, 2, vec![40.0, 10.0, 10.0, 40.0]));
    let mut rng = seed::rng(31);
    for _ in 0..200 {
        let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
        let cells = (0..r * c)
            .map(|_| rng.random_range(50.0f64..500.0).round())
            .collect();
        check(&table(r, c, cells));
    }
}

#[test]
fn gradient_transposes_with_the_table() {
    let t = table(2, 3, vec![12.0, 30.0, 7.0, 22.0, 9.0, 41.0]);
    let g = mi_gradient(&t).unwrap();
    let gt = mi_gradient(&t.transpose()).unwrap();
    for r in 0..2 {
        for c in 0..3 {
            assert!((g.gradient[r * 3 + c] - gt.gradient[c * 2 + r]).abs() < 1e-15);
        }
    }
}

#[test]
fn boundary_cells_are_rejected() {
    let t = table(2, 2, vec![10.0, 0.0, 5.0, 5.0]);
    assert!(matches!(
        mi_gradient(&t),
        Err(Error::BoundaryCell { row: 0, col: 1, .. })
    ));
}

#[test]
fn variance_shrinks_quadratically_with_total() {
    let t = table(2, 2, vec![40.0, 10.0, 10.0, 40.0]);
    let t2 = table(2, 2, vec![80.0, 20.0, 20.0, 80.0]);
    let v = predict_mi_variance(&t, 3, 5.0).unwrap();
    let v2 = predict_mi_variance(&t2, 3, 5.0).unwrap();
    assert!((v / v2 - 4.0).abs() < 1e-9);
}

#[test]
fn noiseless_level_has_zero_error() {
    let t = SnrTableSpec::default().build().unwrap();
    let study = snr_study(&t, &[f64::INFINITY], 100, 1).unwrap();
    assert!(study.errors[0].iter().all(|&e| e == 0.0));
    assert!(study.levels[0].unbiased);
    assert!(snr_study(&t, &[10.0], 99, 1).is_err());
}

#[test]
fn high_snr_is_unbiased_and_matches_prediction() {
    let t = SnrTableSpec::default().build().unwrap();
    let study = snr_study(&t, &[50.0, 100.0], 1000, 7).unwrap();
    for level in &study.levels {
        assert!(level.unbiased, "{level:?}");
        let ratio = level.std_ratio.unwrap();
        assert!((ratio - 1.0).abs() < 0.15, "{level:?}");
    }
    let t4 = SnrTableSpec {
        rows: 4,
        cols: 4,
        total: 4000.0,
        dependence: 0.6,
    }
    .build()
    .unwrap();
    let study = snr_study(&t4, &[100.0], 1000, 7).unwrap();
    assert!(study.levels[0].unbiased, "{:?}", study.levels[0]);
}

#[test]
fn error_spread_falls_with_snr() {
    let t = SnrTableSpec::default().build().unwrap();
    let study = snr_study(&t, &[2.0, 10.0, 50.0, 100.0], 1000, 3).unwrap();
    let stds: Vec<f64> = study.levels.iter().map(|l| l.std).collect();
    assert!(stds.windows(2).all(|w| w[0] > w[1]), "{stds:?}");
    assert!(study.levels[0].bias.abs() > study.levels[2].bias.abs());

    let mut buf = Vec::new();
    study.write_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap().lines().count(),
        1 + 4 * 1000
    );
}

#[test]
fn delta_method_brackets_monte_carlo_in_the_small_noise_regime() {
    let mut rng = seed::rng(5);
    for case in 0..6 {
        let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
        let cells: Vec<f64> = (0..r * c)
            .map(|_| rng.random_range(300.0f64..3000.0).round())
            .collect();
        let t = table(r, c, cells.clone());
        let k = rng.random_range(1..6);
        let n = t.total();
        let sigma = 0.01 * n / (k as f64).sqrt() * rng.random_range(0.05..1.0);
        assert!(sigma * (k as f64).sqrt() / n < 0.02);
        let predicted = predict_mi_variance(&t, k, sigma).unwrap().sqrt();
        let clean = mi_oracle(&cells, r, c);
        let trials = 3000;
        let errs: Vec<f64> = (0..trials)
            .map(|_| {
                let noisy: Vec<f64> = cells
                    .iter()
                    .map(|&x| {
                        x + (0..k)
                            .map(|_| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                            .sum::<f64>()
                    })
                    .collect();
                mi_oracle(&noisy, r, c) - clean
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / trials as f64;
        let sd =
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
        let ratio = sd / predicted;
        assert!((0.85..=1.15).contains(&ratio), "case {case}: {ratio}");
    }
}

#[test]
fn aggregated_noise_variance_scales_with_k() {
    let schema = presets::binary_task_schema(2);
    let sigma = 7.0;
    let k = 5;
    let cal = NoiseCalibration::with_sigma(schema.query_count(), sigma).unwrap();
    let bundles: Vec<_> = (0..k)
        .map(|i| empty_bundle(ClientId::new(format!("c{i}")), &schema))
        .collect();
    let mut sums = Vec::new();
    let mut s = 0u64;
    while sums.len() < 100_000 {
        let noisy: Vec<_> = bundles
            .iter()
            .map(|b| noise_bundle(b, &cal, s).unwrap())
            .collect();
        s += 1;
        let cells = noisy[0]
            .tables()
            .iter()
            .map(|t| t.cells().len())
            .sum::<usize>();
        for i in 0..cells {
            let total: f64 = noisy
                .iter()
                .map(|b| {
                    b.tables()
                        .iter()
                        .flat_map(|t| t.cells())
                        .nth(i)
                        .copied()
                        .unwrap()
                })
                .sum();
            sums.push(total);
        }
    }
    let n = sums.len() as f64;
    let mean = sums.iter().sum::<f64>() / n;
    let var = sums.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let expected = k as f64 * sigma * sigma;
    assert!((var / expected - 1.0).abs() < 0.02, "{var} vs {expected}");
}

#[test]
fn decision_variance_matches_prediction_and_scales_with_k() {
    let pool = homogeneous_pool();
    let w = PflWeights::default();
    let mut per_k = Vec::new();
    for k in [1, 10] {
        let (a, b) = random_pair(&pool, k, 0).unwrap();
        let r = decision_variance_check(&pool, &a, &b, 20.0, &w, 2000, 4).unwrap();
        let ratio = r.variance_ratio.unwrap();
        assert!((0.7..=1.3).contains(&ratio), "k={k}: {ratio}");
        per_k.push(r.var_d / r.sigma2_pfl);
    }
    let reduction = per_k[0] / per_k[1];
    assert!(
        (reduction / 10.0 - 1.0).abs() < 0.3,
        "reduction {reduction}"
    );
}

#[test]
fn zero_noise_gives_constant_decisions() {
    let pool = homogeneous_pool();
    let w = PflWeights::default();
    let (a, b) = ordered_pair(&pool, 3, 1);
    let r = decision_variance_check(&pool, &a, &b, 0.0, &w, 100, 1).unwrap();
    assert_eq!(r.var_d, 0.0);
    assert_eq!(r.variance_ratio, None);
    let m = misorder_check(&pool, &a, &b, 0.0, &w, 100, 1).unwrap();
    assert_eq!(m.empirical_misorder_rate, 0.0);
}

#[test]
fn misorder_requires_a_positive_gap_and_a_single_swap() {
    let pool = homogeneous_pool();
    let w = PflWeights::default();
    let (a, b) = ordered_pair(&pool, 3, 1);
    assert!(misorder_check(&pool, &b, &a, 1.0, &w, 100, 1).is_err());
    let far = pool.federation(&[8, 9, 10]);
    assert!(misorder_check(&pool, &pool.federation(&[0, 1, 2]), &far, 1.0, &w, 100, 1).is_err());
}

#[test]
fn misorder_rates_in_large_and_moderate_regimes() {
    let pool = homogeneous_pool();
    let w = PflWeights::default();
    let (a, b) = ordered_pair(&pool, 5, 2);
    let pilot = misorder_check(&pool, &a, &b, 1.0, &w, 1000, 9).unwrap();
    // The decision sd scales linearly with σ.
    let unit_sd = pilot.var_d.sqrt();

    let large = misorder_check(
        &pool,
        &a,
        &b,
        pilot.delta_gap / (8.0 * unit_sd),
        &w,
        10_000,
        9,
    )
    .unwrap();
    assert!(large.delta_gap >= 6.0 * (2.0 * large.sigma2_pfl / 5.0).sqrt());
    assert_eq!(large.misorders, 0);

    let moderate = misorder_check(&pool, &a, &b, pilot.delta_gap / unit_sd, &w, 10_000, 9).unwrap();
    let scale = (2.0 * moderate.sigma2_pfl / 5.0).sqrt();
    let expected = Normal::standard().cdf(-moderate.delta_gap / scale);
    let se = (expected * (1.0 - expected) / 1e4).sqrt();
    assert!(
        (moderate.empirical_misorder_rate - expected).abs() < 3.0 * se,
        "{moderate:?} vs {expected}"
    );
    assert!(moderate.within_bound);
    assert!(moderate.empirical_misorder_rate <= moderate.bound);
}

#[test]
fn global_check_behaviour() {
    let (schema, data) = presets::heterogeneous(7, 2000, 3).unwrap();
    let pool = BundlePool::new(
        Arc::clone(&schema),
        data.iter().map(|d| compute_tables(d).unwrap()),
    )
    .unwrap();
    let w = PflWeights::default();

    let quiet = global_optimality_check(&pool, 3, 0.0, &w, 100, MuSpec::Absolute(0.0), 1).unwrap();
    assert!(quiet.gaps.iter().all(|&g| g == 0.0));

    let noisy =
        global_optimality_check(&pool, 3, 30.0, &w, 2000, MuSpec::SdMargin(6.0), 1).unwrap();
    assert_eq!(noisy.failures, 0);
    assert!(noisy.bound.unwrap() < 1e-7);
    let rates: Vec<f64> = [0.0, 0.002, 0.005, 0.01, 0.02, 0.05]
        .iter()
        .map(|&mu| noisy.with_mu(MuSpec::Absolute(mu)).failure_rate)
        .collect();
    assert!(rates.windows(2).all(|p| p[1] <= p[0]), "{rates:?}");
    assert!(rates[0] > 0.0);

    let small = noisy.with_mu(MuSpec::Absolute(noisy.sup_noise_estimate));
    assert_eq!(small.bound, None);
    assert_eq!(small.within_bound, None);

    let too_many = presets::heterogeneous(20, 50, 3).unwrap();
    let big = BundlePool::new(
        too_many.0,
        too_many.1.iter().map(|d| compute_tables(d).unwrap()),
    )
    .unwrap();
    assert!(global_optimality_check(&big, 10, 1.0, &w, 100, MuSpec::Absolute(0.0), 1).is_err());
}

#[test]
fn noise_studies_reject_noised_pools() {
    let (schema, data) = presets::heterogeneous(4, 200, 3).unwrap();
    let cal = NoiseCalibration::with_sigma(schema.query_count(), 1.0).unwrap();
    let pool = BundlePool::new(
        schema,
        data.iter()
            .map(|d| noise_bundle(&compute_tables(d).unwrap(), &cal, 1).unwrap()),
    )
    .unwrap();
    let (a, b) = random_pair(&pool, 2, 0).unwrap();
    assert!(decision_variance_check(&pool, &a, &b, 1.0, &PflWeights::default(), 100, 0).is_err());
}
