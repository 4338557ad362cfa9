use std::fs;
use std::path::Path;
use std::process::Command;

use profed_cli::config::{DataSource, RunConfig};
use profed_cli::{commands, RunDir};
use profed_core::anneal::exhaustive;
use profed_core::mipfl::BundlePool;
use profed_core::tabular::{compute_tables, TableBundle};
use serde_json::Value;

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.source = DataSource::Heterogeneous;
    c.data.synthetic.clients = 6;
    c.data.synthetic.rows_per_client = 300;
    c.data.holdout_rows = 800;
    c.selection.k = 3;
    c
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn run(
    config: &RunConfig,
    dir: &Path,
    f: fn(&RunConfig, &mut RunDir) -> Result<(), profed_cli::CliError>,
) {
    let mut out = RunDir::create(dir, "test", config).unwrap();
    f(config, &mut out).unwrap();
    out.finish().unwrap();
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = small();
    c.seed = 99;
    c.schedule.eta = 0.9;
    c.validate.global = None;
    for config in [RunConfig::default(), c] {
        let text = config.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), config);
    }
}

#[test]
fn load_applies_overrides_and_validates() {
    let c = RunConfig::load(None, &["seed=4".into(), "selection.k=7".into()]).unwrap();
    assert_eq!((c.seed, c.selection.k), (4, 7));
    assert!(RunConfig::load(None, &["schedule.eta=1.5".into()]).is_err());
    assert!(RunConfig::load(None, &["calibrate.epsilon=0".into()]).is_err());
}

#[test]
fn calibrate_single_feature_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.calibrate.features = vec![20];
    run(&c, dir.path(), commands::calibrate);
    let rows = read_json(&dir.path().join("calibration.json"));
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["M"], 210);
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "test");
    assert!(manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|o| o == "calibration.json"));
}

#[test]
fn exact_release_matches_tables_and_is_reproducible() {
    let mut c = small();
    c.privacy.sigma_override = Some(0.0);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&c, a.path(), commands::release);
    run(&c, b.path(), commands::release);
    let data = profed_cli::data::load(&c).unwrap();
    let manifest = read_json(&a.path().join("bundles/manifest.json"));
    assert_eq!(manifest["bundles"].as_array().unwrap().len(), 6);
    for client in &data.clients {
        let name = format!("bundles/{}.json", client.client_id());
        let text = fs::read_to_string(a.path().join(&name)).unwrap();
        assert_eq!(text, fs::read_to_string(b.path().join(&name)).unwrap());
        let bundle = TableBundle::from_json(&text, &data.schema).unwrap();
        assert_eq!(bundle, compute_tables(client).unwrap());
    }
}

#[test]
fn search_over_exact_bundles_finds_the_optimum() {
    let mut c = small();
    c.privacy.sigma_override = Some(0.0);
    let released = tempfile::tempdir().unwrap();
    run(&c, released.path(), commands::release);
    c.selection.bundles = Some(released.path().join("bundles"));
    let out = tempfile::tempdir().unwrap();
    run(&c, out.path(), commands::search);
    let report = read_json(&out.path().join("search.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 5);
    assert_eq!(report["std_pfl"], 0.0);

    let data = profed_cli::data::load(&c).unwrap();
    let pool = BundlePool::new(
        data.schema.clone(),
        data.clients.iter().map(|d| compute_tables(d).unwrap()),
    )
    .unwrap();
    let (_, best) = exhaustive(&pool, &c.weights, 3).unwrap();
    assert_eq!(report["best"]["pfl"].as_f64().unwrap(), best);
    let trace = fs::read_to_string(out.path().join("traces/run_0.csv")).unwrap();
    assert!(trace.starts_with("iteration,"));
}

#[test]
fn missing_bundle_reports_the_phase() {
    let mut c = small();
    let released = tempfile::tempdir().unwrap();
    run(&c, released.path(), commands::release);
    let dir = released.path().join("bundles");
    fs::remove_file(dir.join("c00.json")).unwrap();
    c.selection.bundles = Some(dir);
    let out = tempfile::tempdir().unwrap();
    let mut rd = RunDir::create(out.path(), "search", &c).unwrap();
    let err = commands::search(&c, &mut rd).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().starts_with("load bundles failed"), "{err}");
}

#[test]
fn validate_writes_studies() {
    let mut c = small();
    c.validate.trials = 100;
    c.validate.stability_trials = 100;
    c.validate.snr_levels = vec![5.0, 50.0];
    c.validate.decision_k = vec![1, 2, 6];
    let out = tempfile::tempdir().unwrap();
    run(&c, out.path(), commands::validate);
    let csv = fs::read_to_string(out.path().join("snr.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 100);
    let stability = read_json(&out.path().join("stability.json"));
    assert_eq!(stability["decision"].as_array().unwrap().len(), 2);
}

#[test]
fn audit_and_train_outputs() {
    let mut c = small();
    c.audit.n_targets = 100;
    let out = tempfile::tempdir().unwrap();
    run(&c, out.path(), commands::audit);
    let audit = read_json(&out.path().join("audit.json"));
    assert_eq!(audit["results"].as_array().unwrap().len(), 6);
    assert!(out.path().join("roc.csv").is_file());

    let out = tempfile::tempdir().unwrap();
    run(&c, out.path(), commands::train);
    let train = read_json(&out.path().join("train.json"));
    assert_eq!(train["selected"].as_array().map(Vec::len).unwrap_or(3), 3);
    assert_eq!(train["budgets"].as_array().unwrap().len(), 6);
    let curve = fs::read_to_string(out.path().join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + c.train.rounds);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_profed");
    let out = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();

    let ok = status(&["calibrate", "--out-dir", out.path().to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("18.9"));

    let bad = status(&[
        "calibrate",
        "--set",
        "calibrate.epsilon=0",
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("invalid configuration"));

    let empty = tempfile::tempdir().unwrap();
    fs::write(empty.path().join("manifest.json"), "{}").unwrap();
    let phase = status(&[
        "search",
        "--set",
        &format!("selection.bundles=\"{}\"", empty.path().display()),
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(phase.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&phase.stderr).contains("load bundles failed"));
}
