//! Client datasets named by the `[data]` section.

use std::sync::Arc;

use profed_core::seed;
use profed_core::tabular::ingest::ingest_csv;
use profed_core::tabular::synth::{presets, synth_clients};
use profed_core::tabular::{ClientDataset, FeatureSchema};

use crate::config::{DataSource, RunConfig};
use crate::error::CliError;

pub struct Data {
    pub schema: Arc<FeatureSchema>,
    pub clients: Vec<ClientDataset>,
    pub holdout: Option<ClientDataset>,
}

impl Data {
    pub fn holdout(&self) -> Result<&ClientDataset, CliError> {
        self.holdout.as_ref().ok_or_else(|| {
            CliError::Config("this command needs an evaluation set (data.csv.holdout)".into())
        })
    }
}

/// Generates or ingests the client pool and the evaluation set.
pub fn load(config: &RunConfig) -> Result<Data, CliError> {
    let d = &config.data;
    let data_seed = seed::derive(config.seed, "data");
    let holdout_seed = seed::derive(config.seed, "holdout");
    let fail = CliError::phase("data");
    let rename = |ds: ClientDataset| ds.with_rows("holdout", ds.rows().to_vec());
    let loaded = match d.source {
        DataSource::PlantedBias => {
            let pb = &d.planted_bias;
            let schema = pb.schema();
            synth_clients(&schema, &pb.spec(), data_seed).and_then(|clients| {
                let holdout = pb.holdout(&schema, d.holdout_rows, holdout_seed)?;
                Ok(Data {
                    schema,
                    clients,
                    holdout: Some(holdout),
                })
            })
        }
        DataSource::Heterogeneous | DataSource::Homogeneous => {
            let generate = if d.source == DataSource::Heterogeneous {
                presets::heterogeneous
            } else {
                presets::homogeneous
            };
            let s = d.synthetic;
            generate(s.clients, s.rows_per_client, data_seed).and_then(|(schema, clients)| {
                let (_, mut extra) = generate(1, d.holdout_rows, holdout_seed)?;
                let holdout = rename(extra.remove(0))?;
                Ok(Data {
                    schema,
                    clients,
                    holdout: Some(holdout),
                })
            })
        }
        DataSource::Csv => {
            let csv = d
                .csv
                .as_ref()
                .ok_or_else(|| CliError::Config("missing [data.csv]".into()))?;
            let schema = Arc::new(csv.schema.clone());
            let ingest = |p| ingest_csv(p, Arc::clone(&schema), &csv.binning);
            csv.clients
                .iter()
                .map(ingest)
                .collect::<profed_core::Result<Vec<_>>>()
                .and_then(|clients| {
                    let holdout = csv
                        .holdout
                        .as_ref()
                        .map(ingest)
                        .transpose()?
                        .map(rename)
                        .transpose()?;
                    Ok(Data {
                        schema: Arc::clone(&schema),
                        clients,
                        holdout,
                    })
                })
        }
    };
    loaded.map_err(fail)
}
