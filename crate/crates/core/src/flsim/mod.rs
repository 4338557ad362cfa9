//! FedAvg training, fairness metrics and PFL weight fitting.
//!
//! Clients train logistic regression on one-hot encoded features with
//! mini-batch SGD; the server averages their models weighted by dataset
//! size. Evaluation reports accuracy, F1 and the group gaps SPD, EOD and
//! MAD (accuracy difference) of the binary sensitive attribute.

mod de;
mod metrics;
mod model;
mod protocol;
mod weights;

pub use de::{minimize, DeConfig, DeResult};
pub use metrics::{
    average_ranks, evaluate, evaluate_predictions, spearman, EvalReport, GroupConfusion,
};
pub use model::{
    fedavg_round, local_train, sigmoid, weighted_average, Encoder, LocalUpdate, ModelState,
    TrainConfig,
};
pub use protocol::{
    release_bundles, run_protocol, train_federation, write_curve_csv, BudgetConfig, ClientBudget,
    CurvePoint, ProtocolConfig, ProtocolReport, TrainingRun,
};
pub use weights::{
    calibrate_weights, sample_federations, weight_objective, FederationSample, WeightFit,
};
