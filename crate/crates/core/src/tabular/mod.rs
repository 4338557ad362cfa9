//! Discretised tabular data: schemas, client datasets, contingency tables,
//! CSV ingestion and synthetic generation.

mod dataset;
pub mod ingest;
mod schema;
pub mod synth;
mod table;

pub use dataset::{ClientDataset, ClientId, Record};
pub use ingest::{bin_index, export_csv, ingest_csv, ingest_reader, BinningSpec};
pub use schema::{FeatureDescriptor, FeatureSchema, Var, VarPair};
pub use synth::{synth_clients, Coupling, SynthSpec};
pub use table::{compute_tables, empty_bundle, ContingencyTable, TableBundle};
