//! Proactive federation selection under differential privacy.
//!
//! Clients release Gaussian-noised pairwise contingency tables once. The
//! server sums them for any candidate subset of clients, reconstructs the
//! pooled mutual-information structure, scores the subset with the
//! Potential Federation Loss (PFL), and searches the space of fixed-size
//! subsets with simulated annealing. The selected federation then trains a
//! logistic-regression model with FedAvg.
//!
//! Module map:
//!
//! - [`tabular`]: schemas, datasets, contingency tables, CSV ingestion and
//!   synthetic client generation.
//! - [`privacy`]: Gaussian mechanism, RDP accounting and σ calibration.
//! - [`mipfl`]: plug-in MI, federated aggregation and the PFL objective.
//! - [`anneal`]: simulated annealing and exhaustive search over federations.
//! - [`noiselab`]: noise-propagation and stability studies.
//! - [`audit`]: likelihood-ratio membership-inference audit.
//! - [`flsim`]: FedAvg simulation, fairness metrics and PFL weight fitting.

// `!(x > 0.0)` deliberately rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anneal;
pub mod audit;
pub mod error;
pub mod flsim;
pub mod mipfl;
pub mod noiselab;
pub mod privacy;
pub mod seed;
pub mod tabular;

pub use anneal::{exhaustive, search, ScheduleConfig, SearchTrace};
pub use error::{Error, Result};
pub use mipfl::{
    aggregate, mi_from_counts, pfl, swap_update, AggregateView, BundlePool, Federation, PflTerms,
    PflWeights,
};
pub use privacy::{
    calibrate_sigma, noise_bundle, query_count, verify_epsilon, NoiseCalibration, PrivacyBudget,
};
pub use tabular::{
    compute_tables, ClientDataset, ClientId, ContingencyTable, FeatureDescriptor, FeatureSchema,
    TableBundle, Var,
};
