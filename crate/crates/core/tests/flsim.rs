use std::sync::Arc;

use profed_core::anneal::exhaustive;
use profed_core::flsim::{
    calibrate_weights, evaluate, evaluate_predictions, fedavg_round, local_train, minimize,
    run_protocol, sample_federations, spearman, train_federation, weight_objective,
    weighted_average, write_curve_csv, BudgetConfig, DeConfig, Encoder, EvalReport,
    FederationSample, GroupConfusion, LocalUpdate, ModelState, ProtocolConfig, TrainConfig,
};
use profed_core::mipfl::{BundlePool, Federation, PflTerms, PflWeights};
use profed_core::seed;
use profed_core::tabular::synth::presets::{self, PlantedBias};
use profed_core::tabular::synth::synth_clients;
use profed_core::tabular::{
    compute_tables, ClientDataset, FeatureDescriptor, FeatureSchema, Record,
};
use proptest::prelude::*;
use rand::Rng;

fn small_schema() -> Arc<FeatureSchema> {
    presets::binary_task_schema(2)
}

fn client(id: &str, rows: usize, s: u64) -> ClientDataset {
    let (_, data) = presets::homogeneous(1, rows, s).unwrap();
    data[0].with_rows(id, data[0].rows().to_vec()).unwrap()
}

#[test]
fn zero_learning_rate_keeps_the_model() {
    let c = client("a", 200, 1);
    let enc = Encoder::new(c.schema()).unwrap();
    let mut model = enc.zeros();
    model
        .weights
        .iter_mut()
        .enumerate()
        .for_each(|(i, w)| *w = i as f64 * 0.01);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(local_train(&enc, &model, &c, &cfg, 0).unwrap().model, model);
}

#[test]
fn separable_pair_is_learned() {
    let schema = small_schema();
    let rows = vec![Record::new(vec![0, 0, 0], 0), Record::new(vec![1, 2, 2], 1)];
    let c = ClientDataset::new("sep", rows, Arc::clone(&schema)).unwrap();
    let enc = Encoder::new(&schema).unwrap();
    let cfg = TrainConfig {
        local_epochs: 200,
        learning_rate: 0.5,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let m = local_train(&enc, &enc.zeros(), &c, &cfg, 0).unwrap().model;
    assert_eq!(evaluate(&enc, &m, &c).unwrap().accuracy, 1.0);
}

#[test]
fn full_batch_loss_never_increases() {
    let c = client("a", 500, 2);
    let enc = Encoder::new(c.schema()).unwrap();
    let cfg = TrainConfig {
        local_epochs: 1,
        learning_rate: 0.5,
        batch_size: 500,
        ..TrainConfig::default()
    };
    let mut model = enc.zeros();
    let mut last = enc.loss(&model, c.rows());
    for round in 0..50 {
        model = local_train(&enc, &model, &c, &cfg, round).unwrap().model;
        let loss = enc.loss(&model, c.rows());
        assert!(loss <= last + 1e-12, "round {round}: {loss} > {last}");
        last = loss;
    }
}

#[test]
fn empty_clients_are_flagged() {
    let schema = small_schema();
    let enc = Encoder::new(&schema).unwrap();
    let empty = ClientDataset::new("e", vec![], Arc::clone(&schema)).unwrap();
    let up = local_train(&enc, &enc.zeros(), &empty, &TrainConfig::default(), 0).unwrap();
    assert!(up.empty);
    assert_eq!(up.model, enc.zeros());
    assert!(fedavg_round(&enc, &enc.zeros(), &[&empty], &TrainConfig::default()).is_err());
}

#[test]
fn single_client_round_equals_local_training() {
    let c = client("a", 300, 3);
    let enc = Encoder::new(c.schema()).unwrap();
    let cfg = TrainConfig::default();
    let local = local_train(&enc, &enc.zeros(), &c, &cfg, 0).unwrap().model;
    let round = fedavg_round(&enc, &enc.zeros(), &[&c], &cfg).unwrap();
    assert_eq!(round.weights, local.weights);
    assert_eq!(round.round, 1);
}

#[test]
fn weighted_average_matches_hand_sums() {
    let up = |w: Vec<f64>, n: usize| LocalUpdate {
        model: ModelState {
            weights: w,
            round: 0,
        },
        samples: n,
        empty: false,
    };
    let a = vec![1.0, -2.0, 4.0];
    let b = vec![3.0, 2.0, 0.0];
    let equal = weighted_average(&[up(a.clone(), 50), up(b.clone(), 50)]).unwrap();
    for i in 0..3 {
        assert!((equal[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
    }
    let skewed = weighted_average(&[up(a.clone(), 100), up(b.clone(), 300)]).unwrap();
    for i in 0..3 {
        assert!((skewed[i] - (0.25 * a[i] + 0.75 * b[i])).abs() < 1e-15);
    }
    let same = vec![0.1, 0.7, -0.3];
    let avg = weighted_average(&[
        up(same.clone(), 7),
        up(same.clone(), 13),
        up(same.clone(), 101),
    ])
    .unwrap();
    assert_eq!(avg, same);
}

#[test]
fn two_equal_clients_average_their_updates() {
    let a = client("a", 200, 4);
    let b = client("b", 200, 5);
    let enc = Encoder::new(a.schema()).unwrap();
    let cfg = TrainConfig::default();
    let ua = local_train(&enc, &enc.zeros(), &a, &cfg, 0)
        .unwrap()
        .model
        .weights;
    let ub = local_train(&enc, &enc.zeros(), &b, &cfg, 0)
        .unwrap()
        .model
        .weights;
    let avg = fedavg_round(&enc, &enc.zeros(), &[&a, &b], &cfg)
        .unwrap()
        .weights;
    for i in 0..avg.len() {
        assert!((avg[i] - (ua[i] + ub[i]) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn fairness_metric_examples() {
    let schema = small_schema();
    let (_, data) = presets::homogeneous(1, 1000, 6).unwrap();
    let rows = data[0].rows();
    let constant = evaluate_predictions(&schema, rows.iter().map(|r| (r, 1))).unwrap();
    assert_eq!(constant.spd, Some(0.0));
    assert_eq!(constant.eod, Some(0.0));
    let copy_s = evaluate_predictions(&schema, rows.iter().map(|r| (r, r.features[0]))).unwrap();
    assert_eq!(copy_s.spd, Some(1.0));

    let g0 = GroupConfusion {
        tp: 40,
        fn_: 10,
        ..GroupConfusion::default()
    };
    let g1 = GroupConfusion {
        tp: 20,
        fn_: 30,
        ..GroupConfusion::default()
    };
    let report = EvalReport::from_confusion([g0, g1]).unwrap();
    assert!((report.eod.unwrap() + 0.4).abs() < 1e-15);

    let no_positives = GroupConfusion {
        tn: 5,
        ..GroupConfusion::default()
    };
    let r = EvalReport::from_confusion([g0, no_positives]).unwrap();
    assert_eq!(r.eod, None);
    assert!(r.spd.is_some());
}

#[test]
fn non_binary_sensitive_attribute_is_rejected() {
    let schema = FeatureSchema::new(
        vec![
            FeatureDescriptor::indexed("s", 3),
            FeatureDescriptor::indexed("a", 2),
        ],
        0,
        FeatureDescriptor::indexed("y", 2),
    )
    .unwrap();
    let r = Record::new(vec![2, 0], 1);
    assert!(evaluate_predictions(&schema, [(&r, 1)]).is_err());
}

proptest! {
    #[test]
    fn fairness_metrics_are_bounded(
        cells in prop::collection::vec((0usize..2, 0usize..2, 0usize..2), 1..200)
    ) {
        let schema = small_schema();
        let rows: Vec<(Record, usize)> = cells.iter().map(|&(s, t, p)| (Record::new(vec![s, 0, 0], t), p)).collect();
        let r = evaluate_predictions(&schema, rows.iter().map(|(r, p)| (r, *p))).unwrap();
        prop_assert_eq!(r.samples, rows.len());
        prop_assert_eq!(r.groups[0].total() + r.groups[1].total(), rows.len());
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
        for v in [r.spd, r.eod, r.mad].into_iter().flatten() {
            prop_assert!(v.abs() <= 1.0);
        }
        if let Some(f1) = r.f1 {
            prop_assert!((0.0..=1.0).contains(&f1));
        }
    }

    #[test]
    fn spearman_is_invariant_to_increasing_affine_maps(
        xs in prop::collection::vec(-100.0f64..100.0, 3..30),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
        shuffle_seed in 0u64..1000,
    ) {
        let mut ys = xs.clone();
        let mut rng = seed::rng(shuffle_seed);
        for y in &mut ys {
            *y += rng.random_range(-30.0..30.0);
        }
        let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let r1 = spearman(&xs, &ys).unwrap();
        let r2 = spearman(&scaled, &ys).unwrap();
        match (r1, r2) {
            (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-12),
            (p, q) => prop_assert_eq!(p, q),
        }
    }
}

#[test]
fn spearman_examples() {
    assert_eq!(
        spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
        Some(1.0)
    );
    assert_eq!(
        spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
        Some(-1.0)
    );
    let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0])
        .unwrap()
        .unwrap();
    assert!((r - 0.6).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
    assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
}

#[test]
fn de_minimises_the_sphere() {
    let r = minimize(
        |x| x.iter().map(|v| v * v).sum(),
        &[(-5.0, 5.0); 2],
        &[],
        &DeConfig::default(),
    )
    .unwrap();
    assert!(r.value < 1e-6, "{r:?}");
}

fn planted_samples() -> Vec<FederationSample> {
    let mut rng = seed::rng(44);
    (0..30)
        .map(|i| {
            let terms = PflTerms {
                direct: rng.random_range(0.0..0.2),
                indirect: rng.random_range(0.0..0.3),
                redundancy: rng.random_range(0.0..0.5),
                signal: rng.random_range(0.0..0.3),
            };
            // Fairness gaps grow and utility falls with direct − signal.
            let key = terms.direct - terms.signal;
            let report = EvalReport {
                samples: 100,
                accuracy: 0.8 - key,
                f1: Some(0.7 - key),
                spd: Some(key),
                eod: Some(0.5 + key),
                mad: Some(0.4 + key),
                groups: Default::default(),
            };
            FederationSample {
                federation: Federation::new([format!("c{i:02}")]).unwrap(),
                terms,
                report,
            }
        })
        .collect()
}

#[test]
fn de_reaches_the_planted_optimum() {
    let samples = planted_samples();
    let planted =
        weight_objective(&samples, &PflWeights::new(1.0, 0.0, 0.0, 1.0).unwrap()).unwrap();
    assert!((planted - 2.0).abs() < 1e-12);
    let fit = calibrate_weights(&samples, &DeConfig::default(), 3.0).unwrap();
    assert!(fit.objective >= planted - 1e-12, "{fit:?}");
    assert_eq!(fit.evaluations, 20 * 201);
}

#[test]
fn weight_fitting_rejects_degenerate_inputs() {
    let mut samples = planted_samples();
    assert!(calibrate_weights(&samples[..9], &DeConfig::default(), 3.0).is_err());
    for s in &mut samples {
        s.report.accuracy = 0.5;
    }
    assert!(weight_objective(&samples, &PflWeights::default()).is_err());
}

#[test]
fn weight_fitting_on_trained_federations() {
    let pb = PlantedBias {
        rows_per_client: 400,
        ..PlantedBias::default()
    };
    let schema = pb.schema();
    let clients = synth_clients(&schema, &pb.spec(), 3).unwrap();
    let holdout = pb.holdout(&schema, 1000, 3).unwrap();
    let train = TrainConfig {
        rounds: 5,
        ..TrainConfig::default()
    };
    let samples = sample_federations(&clients, &holdout, 5, 12, &train, 1).unwrap();
    assert_eq!(samples.len(), 12);
    let de = DeConfig {
        generations: 20,
        ..DeConfig::default()
    };
    let fit = calibrate_weights(&samples, &de, 3.0).unwrap();
    assert!(fit.objective >= fit.default_objective);
    fit.weights.validate().unwrap();
}

fn tiny_pool() -> (Arc<FeatureSchema>, Vec<ClientDataset>, ClientDataset) {
    let (schema, data) = presets::heterogeneous(6, 300, 12).unwrap();
    let other = presets::heterogeneous(1, 500, 13).unwrap().1.remove(0);
    let holdout = other.with_rows("holdout", other.rows().to_vec()).unwrap();
    (schema, data, holdout)
}

#[test]
fn exact_protocol_selects_the_exhaustive_optimum() {
    let (schema, data, holdout) = tiny_pool();
    let config = ProtocolConfig {
        k: 3,
        budget: BudgetConfig {
            sigma_override: Some(0.0),
            ..BudgetConfig::default()
        },
        ..ProtocolConfig::default()
    };
    let report = run_protocol(&data, &holdout, &config, 9).unwrap();
    let pool = BundlePool::new(schema, data.iter().map(|d| compute_tables(d).unwrap())).unwrap();
    let (best, _) = exhaustive(&pool, &config.weights, 3).unwrap();
    assert_eq!(report.selected, best);
    assert_eq!(report.sigma, 0.0);
    assert_eq!(report.curve.len(), config.train.rounds);
    for b in &report.budgets {
        let expected = if report.selected.contains(&b.client) {
            2.0
        } else {
            1.0
        };
        assert_eq!(b.epsilon_total, expected);
    }
    let mut buf = Vec::new();
    write_curve_csv(&report.curve, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("round,accuracy,f1,spd,eod\n"));
    assert_eq!(text.lines().count(), 1 + config.train.rounds);
}

#[test]
fn full_pool_reduces_to_plain_fedavg() {
    let (_, data, holdout) = tiny_pool();
    let config = ProtocolConfig {
        k: 6,
        ..ProtocolConfig::default()
    };
    let report = run_protocol(&data, &holdout, &config, 9).unwrap();
    assert!(report.search.is_none());
    assert_eq!(report.selected.k(), 6);
    let members: Vec<&ClientDataset> = data.iter().collect();
    let plain = train_federation(
        &members,
        &holdout,
        &TrainConfig {
            seed: seed::derive(9, "training"),
            ..config.train
        },
    )
    .unwrap();
    assert_eq!(plain.report, report.report);
}

#[test]
fn protocol_errors_name_the_phase() {
    let (_, data, holdout) = tiny_pool();
    let bad_budget = ProtocolConfig {
        budget: BudgetConfig {
            epsilon_selection: 0.0,
            ..BudgetConfig::default()
        },
        ..ProtocolConfig::default()
    };
    let err = run_protocol(&data, &holdout, &bad_budget, 1).unwrap_err();
    assert!(err.to_string().starts_with("release failed"), "{err}");
    let too_big = ProtocolConfig {
        k: 7,
        ..ProtocolConfig::default()
    };
    let err = run_protocol(&data, &holdout, &too_big, 1).unwrap_err();
    assert!(err.to_string().starts_with("selection failed"), "{err}");
}

#[test]
fn protocol_is_deterministic() {
    let (_, data, holdout) = tiny_pool();
    let config = ProtocolConfig {
        k: 3,
        ..ProtocolConfig::default()
    };
    let a = run_protocol(&data, &holdout, &config, 4).unwrap();
    let b = run_protocol(&data, &holdout, &config, 4).unwrap();
    assert_eq!(a.selected, b.selected);
    assert_eq!(a.report, b.report);
    assert_eq!(a.curve, b.curve);
}
