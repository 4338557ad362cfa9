//! One function per subcommand. Each writes its outputs into a [`RunDir`]
//! and prints a short summary on stdout.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use profed_core::anneal::search_many;
use profed_core::audit::run_audit;
use profed_core::flsim::{
    calibrate_weights, release_bundles, run_protocol, sample_federations, write_curve_csv,
    ProtocolConfig,
};
use profed_core::mipfl::{aggregate, BundlePool};
use profed_core::noiselab::{
    decision_variance_check, global_optimality_check, misorder_check, random_pair, snr_study,
    DecisionVarianceReport, GlobalOptimalityReport, MisorderReport,
};
use profed_core::privacy::{calibration_report, PrivacyBudget};
use profed_core::seed;
use profed_core::tabular::{compute_tables, FeatureSchema, TableBundle};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data;
use crate::error::CliError;
use crate::rundir::RunDir;

/// Index written next to released bundles.
#[derive(Debug, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema: FeatureSchema,
    pub sigma: f64,
    /// File names relative to the manifest.
    pub bundles: Vec<String>,
}

pub const BUNDLE_MANIFEST: &str = "manifest.json";

pub fn calibrate(config: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let c = &config.calibrate;
    let budget =
        PrivacyBudget::selection(c.epsilon, c.delta).map_err(CliError::phase("calibration"))?;
    let rows = c
        .features
        .iter()
        .map(|&k| calibration_report(&budget, k))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::phase("calibration"))?;
    println!("epsilon = {}, delta = {}", c.epsilon, c.delta);
    println!("{:>4} {:>6} {:>10} {:>10}", "K", "M", "sigma", "alpha*");
    for r in &rows {
        println!(
            "{:>4} {:>6} {:>10.4} {:>10.3}",
            r.k, r.m, r.sigma, r.optimal_order
        );
    }
    out.write_json("calibration.json", &rows)?;
    Ok(())
}

pub fn release(config: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let data = data::load(config)?;
    let cal = config
        .privacy
        .calibration(&data.schema)
        .map_err(CliError::phase("release"))?;
    let bundles =
        release_bundles(&data.clients, &cal, config.seed).map_err(CliError::phase("release"))?;
    let mut names = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let name = format!("{}.json", b.client_id());
        let json = b.to_json().map_err(CliError::phase("release"))?;
        out.write_with(&format!("bundles/{name}"), |w| {
            std::io::Write::write_all(w, json.as_bytes()).map_err(Into::into)
        })?;
        names.push(name);
    }
    let manifest = BundleManifest {
        schema: (*data.schema).clone(),
        sigma: cal.sigma,
        bundles: names,
    };
    out.write_json(&format!("bundles/{BUNDLE_MANIFEST}"), &manifest)?;
    println!(
        "released {} bundles with sigma = {:.4}",
        bundles.len(),
        cal.sigma
    );
    Ok(())
}

/// Reads a directory written by `release`.
pub fn load_bundles(dir: &Path) -> Result<BundlePool, CliError> {
    let read = |p: &Path| fs::read_to_string(p).map_err(CliError::io("load bundles"));
    let manifest: BundleManifest = serde_json::from_str(&read(&dir.join(BUNDLE_MANIFEST))?)
        .map_err(|e| CliError::phase("load bundles")(e.into()))?;
    let schema = Arc::new(manifest.schema);
    let bundles = manifest
        .bundles
        .iter()
        .map(|name| {
            let text = read(&dir.join(name))?;
            TableBundle::from_json(&text, &schema).map_err(CliError::phase("load bundles"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    BundlePool::new(schema, bundles).map_err(CliError::phase("load bundles"))
}

pub fn search(config: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let pool = match &config.selection.bundles {
        Some(dir) => load_bundles(dir)?,
        None => {
            let data = data::load(config)?;
            let cal = config
                .privacy
                .calibration(&data.schema)
                .map_err(CliError::phase("release"))?;
            let bundles = release_bundles(&data.clients, &cal, config.seed)
                .map_err(CliError::phase("release"))?;
            BundlePool::new(Arc::clone(&data.schema), bundles)
                .map_err(CliError::phase("release"))?
        }
    };
    let schedule = config
        .schedule
        .with_seed(seed::derive(config.seed, "search"));
    let (report, traces) = search_many(
        &pool,
        &config.weights,
        config.selection.k,
        &schedule,
        config.selection.runs,
    )
    .map_err(CliError::phase("selection"))?;
    out.write_json("search.json", &report)?;
    for (i, t) in traces.iter().enumerate() {
        out.write_with(&format!("traces/run_{i}.csv"), |w| t.write_csv(w))?;
    }
    let members: Vec<String> = report
        .best
        .members
        .iter()
        .map(ToString::to_string)
        .collect();
    println!(
        "best PFL {:.6} over {} runs (mean {:.6}, std {:.2e}): {}",
        report.best.pfl,
        report.runs.len(),
        report.mean_pfl,
        report.std_pfl,
        members.join(", ")
    );
    Ok(())
}

pub fn train(config: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let data = data::load(config)?;
    let protocol = ProtocolConfig {
        k: config.selection.k,
        weights: config.weights,
        budget: config.privacy,
        schedule: config.schedule,
        train: config.train,
    };
    let report = run_protocol(&data.clients, data.holdout()?, &protocol, config.seed)
        .map_err(CliError::phase("train"))?;
    out.write_json("train.json", &report)?;
    out.write_with("curve.csv", |w| write_curve_csv(&report.curve, w))?;
    if let Some(trace) = &report.trace {
        out.write_with("trace.csv", |w| trace.write_csv(w))?;
    }
    let r = &report.report;
    println!("selected {}", report.selected);
    println!(
        "accuracy {:.4}, F1 {}, EOD {}, MAD {}",
        r.accuracy,
        fmt_opt(r.f1),
        fmt_opt(r.eod),
        fmt_opt(r.mad)
    );
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

pub fn audit(config: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let data = data::load(config)?;
    let report = run_audit(
        &data.clients,
        &config.audit,
        seed::derive(config.seed, "audit"),
    )
    .map_err(CliError::phase("audit"))?;
    out.write_json("audit.json", &report)?;
    out.write_with("roc.csv", |w| report.write_roc_csv(w))?;
    println!(
        "{:>8} {:>10} {:>10} {:>10}",
        "epsilon", "sigma", "AUC(1)", "AUC(all)"
    );
    for r in &report.results {
        let eps =
            serde_json::to_value(r.epsilon).map_err(|e| CliError::phase("audit")(e.into()))?;
        println!(
            "{:>8} {:>10.4} {:>10.4} {:>10.4}",
            eps.to_string().trim_matches('"'),
            r.sigma,
            r.auc_single,
            r.auc_joint
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Stability {
    sigma: f64,
    decision: Vec<DecisionVarianceReport>,
    misorder: Vec<MisorderReport>,
    global: Option<GlobalOptimalityReport>,
}

pub fn validate(config: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let v = &config.validate;
    let table = v.table.build().map_err(CliError::phase("validate"))?;
    let study = snr_study(
        &table,
        &v.snr_levels,
        v.trials,
        seed::derive(config.seed, "snr"),
    )
    .map_err(CliError::phase("validate"))?;
    out.write_json("snr.json", &study)?;
    out.write_with("snr.csv", |w| study.write_csv(w))?;
    for l in &study.levels {
        println!(
            "SNR {:>6}: bias {:+.2e}, std {:.2e}, predicted {}",
            l.snr.map_or_else(|| "inf".into(), |s| s.to_string()),
            l.bias,
            l.std,
            l.predicted_std
                .map_or_else(|| "-".into(), |s| format!("{s:.2e}"))
        );
    }

    let data = data::load(config)?;
    let bundles = data
        .clients
        .iter()
        .map(compute_tables)
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::phase("validate"))?;
    let pool =
        BundlePool::new(Arc::clone(&data.schema), bundles).map_err(CliError::phase("validate"))?;
    let sigma = match v.sigma {
        Some(s) => s,
        None => {
            config
                .privacy
                .calibration(&data.schema)
                .map_err(CliError::phase("validate"))?
                .sigma
        }
    };
    let w = &config.weights;
    let mut stability = Stability {
        sigma,
        decision: Vec::new(),
        misorder: Vec::new(),
        global: None,
    };
    let fail = CliError::phase("validate");
    let run = |stability: &mut Stability| -> profed_core::Result<()> {
        for &k in v.decision_k.iter().filter(|&&k| k > 0 && k < pool.len()) {
            let (a, b) = random_pair(
                &pool,
                k,
                seed::derive_indexed(config.seed, "pair", k as u64),
            )?;
            let dv =
                decision_variance_check(&pool, &a, &b, sigma, w, v.stability_trials, config.seed)?;
            let (pa, pb) = (aggregate(&pool, &a)?.pfl(w), aggregate(&pool, &b)?.pfl(w));
            if pa != pb {
                let (better, worse) = if pa < pb { (&a, &b) } else { (&b, &a) };
                let m = misorder_check(
                    &pool,
                    better,
                    worse,
                    sigma,
                    w,
                    v.stability_trials,
                    config.seed,
                )?;
                stability.misorder.push(m);
            }
            stability.decision.push(dv);
        }
        if let Some(g) = v.global {
            stability.global = Some(global_optimality_check(
                &pool,
                g.k,
                sigma,
                w,
                v.stability_trials,
                g.mu,
                config.seed,
            )?);
        }
        Ok(())
    };
    run(&mut stability).map_err(fail)?;
    for d in &stability.decision {
        println!(
            "k = {:>3}: Var(d) = {:.3e}, 2 sigma2/k ratio {}",
            d.k,
            d.var_d,
            fmt_opt(d.variance_ratio)
        );
    }
    out.write_json("stability.json", &stability)?;
    Ok(())
}

pub fn weights(config: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let data = data::load(config)?;
    let f = &config.fit;
    let train = profed_core::flsim::TrainConfig {
        seed: seed::derive(config.seed, "training"),
        ..config.train
    };
    let samples = sample_federations(
        &data.clients,
        data.holdout()?,
        f.k,
        f.federations,
        &train,
        seed::derive(config.seed, "fit"),
    )
    .map_err(CliError::phase("weights"))?;
    let de = profed_core::flsim::DeConfig {
        seed: seed::derive(config.seed, "de"),
        ..f.de
    };
    let fit = calibrate_weights(&samples, &de, f.upper).map_err(CliError::phase("weights"))?;
    #[derive(Serialize)]
    struct Output<'a> {
        fit: &'a profed_core::flsim::WeightFit,
        samples: &'a [profed_core::flsim::FederationSample],
    }
    out.write_json(
        "weights.json",
        &Output {
            fit: &fit,
            samples: &samples,
        },
    )?;
    let [a, b, g, l] = fit.weights.as_array();
    println!(
        "alpha {a:.4}, beta {b:.4}, gamma {g:.4}, lambda {l:.4}; objective {:.4} (defaults {:.4})",
        fit.objective, fit.default_objective
    );
    Ok(())
}
