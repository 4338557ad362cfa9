//! CSV ingestion and export.
//!
//! The header row names the columns. Each feature and the target are looked
//! up by name; columns listed in the [`BinningSpec`] are parsed as numbers
//! and binned by half-open intervals, all others are matched against the
//! declared labels verbatim.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::dataset::{ClientDataset, ClientId, Record};
use super::schema::{FeatureSchema, Var};
use crate::error::{Error, Result};

/// Maps a continuous column name to ascending bin edges. `n` edges define
/// `n - 1` bins.
pub type BinningSpec = BTreeMap<String, Vec<f64>>;

/// Bin index of `value` under half-open intervals `[e_i, e_{i+1})`. Values
/// below the first edge or at/above the last edge clamp to the extreme bins.
pub fn bin_index(value: f64, edges: &[f64]) -> usize {
    let bins = edges.len().saturating_sub(1).max(1);
    let above = edges.partition_point(|&e| e <= value);
    above.saturating_sub(1).min(bins - 1)
}

fn check_binning(schema: &FeatureSchema, binning: &BinningSpec) -> Result<()> {
    for (name, edges) in binning {
        let var = schema
            .var_by_name(name)
            .ok_or_else(|| Error::Schema(format!("binning refers to unknown column `{name}`")))?;
        let card = schema.cardinality(var);
        if edges.len() != card + 1 {
            return Err(Error::Schema(format!(
                "column `{name}` has {} bin edges; its domain of {card} values needs {}",
                edges.len(),
                card + 1
            )));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Schema(format!(
                "bin edges of `{name}` must be strictly increasing"
            )));
        }
    }
    Ok(())
}

/// Reads a client dataset from a CSV file. The client id is the file stem.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    schema: Arc<FeatureSchema>,
    binning: &BinningSpec,
) -> Result<ClientDataset> {
    let path = path.as_ref();
    let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| {
        Error::invalid(format!("cannot derive a client id from {}", path.display()))
    })?;
    let file = std::fs::File::open(path)?;
    ingest_reader(file, id, schema, binning)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    client_id: impl Into<ClientId>,
    schema: Arc<FeatureSchema>,
    binning: &BinningSpec,
) -> Result<ClientDataset> {
    check_binning(&schema, binning)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();

    let vars: Vec<Var> = (0..schema.feature_count())
        .map(Var::Feature)
        .chain(std::iter::once(Var::Target))
        .collect();
    let mut columns = Vec::with_capacity(vars.len());
    for &var in &vars {
        let name = &schema.descriptor(var).name;
        let col = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Csv {
                line: 1,
                message: format!("missing column `{name}`"),
            })?;
        columns.push(col);
    }

    let mut rows = Vec::new();
    for (row_idx, result) in rdr.records().enumerate() {
        let record = result.map_err(csv_error)?;
        let mut values = Vec::with_capacity(vars.len());
        for (&var, &col) in vars.iter().zip(&columns) {
            let desc = schema.descriptor(var);
            let raw = record.get(col).unwrap_or("").trim();
            let unknown = || Error::UnknownCategory {
                row: row_idx,
                column: desc.name.clone(),
                value: raw.to_owned(),
            };
            let index = match binning.get(&desc.name) {
                Some(edges) => {
                    let v: f64 = raw.parse().map_err(|_| unknown())?;
                    if v.is_nan() {
                        return Err(unknown());
                    }
                    bin_index(v, edges)
                }
                None => desc.label_index(raw).ok_or_else(unknown)?,
            };
            values.push(index);
        }
        let target = values.pop().expect("target column present");
        rows.push(Record::new(values, target));
    }
    ClientDataset::new(client_id, rows, schema)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Csv {
        line,
        message: e.to_string(),
    }
}

/// Writes a dataset back to CSV. Binned columns are written as the left
/// edge of their bin, so re-ingesting yields the same indices.
pub fn export_csv<W: Write>(
    dataset: &ClientDataset,
    binning: &BinningSpec,
    writer: W,
) -> Result<()> {
    let schema = dataset.schema();
    let mut wtr = csv::Writer::from_writer(writer);
    let vars: Vec<Var> = (0..schema.feature_count())
        .map(Var::Feature)
        .chain(std::iter::once(Var::Target))
        .collect();
    wtr.write_record(vars.iter().map(|&v| schema.descriptor(v).name.as_str()))
        .map_err(csv_error)?;
    for r in dataset.rows() {
        let fields: Vec<String> = vars
            .iter()
            .map(|&v| {
                let desc = schema.descriptor(v);
                let idx = r.value(v);
                match binning.get(&desc.name) {
                    Some(edges) => format!("{}", edges[idx]),
                    None => desc.labels[idx].clone(),
                }
            })
            .collect();
        wtr.write_record(&fields).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}
