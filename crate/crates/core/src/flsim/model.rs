use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tabular::{ClientDataset, FeatureSchema, Record};

/// Logistic-regression parameters over one-hot encoded features. The last
/// entry is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub weights: Vec<f64>,
    pub round: usize,
}

/// Column offsets of each feature's one-hot block.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    offsets: Vec<usize>,
    dim: usize,
}

impl Encoder {
    /// Requires a binary target.
    pub fn new(schema: &FeatureSchema) -> Result<Self> {
        if schema.target().cardinality() != 2 {
            return Err(Error::invalid(format!(
                "logistic regression needs a binary target; `{}` has {} values",
                schema.target().name,
                schema.target().cardinality()
            )));
        }
        let mut offsets = Vec::with_capacity(schema.feature_count());
        let mut dim = 0;
        for f in schema.features() {
            offsets.push(dim);
            dim += f.cardinality();
        }
        Ok(Self { offsets, dim })
    }

    /// Number of weights including the bias.
    pub fn dim(&self) -> usize {
        self.dim + 1
    }

    fn logit(&self, w: &[f64], r: &Record) -> f64 {
        let mut z = w[self.dim];
        for (f, &v) in r.features.iter().enumerate() {
            z += w[self.offsets[f] + v];
        }
        z
    }

    pub fn probability(&self, model: &ModelState, r: &Record) -> f64 {
        sigmoid(self.logit(&model.weights, r))
    }

    /// Predicted label at threshold 0.5.
    pub fn predict(&self, model: &ModelState, r: &Record) -> usize {
        usize::from(self.logit(&model.weights, r) > 0.0)
    }

    pub fn zeros(&self) -> ModelState {
        ModelState {
            weights: vec![0.0; self.dim()],
            round: 0,
        }
    }

    /// Mean logistic loss over `rows`.
    pub fn loss(&self, model: &ModelState, rows: &[Record]) -> f64 {
        let total: f64 = rows
            .iter()
            .map(|r| {
                let z = self.logit(&model.weights, r);
                // log(1 + e^z) − y z, computed stably
                softplus(z) - r.target as f64 * z
            })
            .sum();
        total / rows.len().max(1) as f64
    }

    fn step(&self, w: &mut [f64], batch: &[&Record], lr: f64) {
        let scale = lr / batch.len() as f64;
        let mut grad_bias = 0.0;
        let mut updates: Vec<(usize, f64)> = Vec::with_capacity(batch.len() * self.offsets.len());
        for r in batch {
            let g = sigmoid(self.logit(w, r)) - r.target as f64;
            grad_bias += g;
            for (f, &v) in r.features.iter().enumerate() {
                updates.push((self.offsets[f] + v, g));
            }
        }
        for (i, g) in updates {
            w[i] -= scale * g;
        }
        w[self.dim] -= scale * grad_bias;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            local_epochs: 1,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Counts must be positive; a zero learning rate is accepted and leaves
    /// the model unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "rounds, local epochs and batch size must be positive",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub model: ModelState,
    pub samples: usize,
    /// Set when the client had no rows and returned the broadcast model.
    pub empty: bool,
}

/// `local_epochs` of shuffled mini-batch SGD on the logistic loss, seeded
/// by `(config.seed, round, client id)`.
pub fn local_train(
    encoder: &Encoder,
    model: &ModelState,
    client: &ClientDataset,
    config: &TrainConfig,
    round: usize,
) -> Result<LocalUpdate> {
    config.validate()?;
    if model.weights.len() != encoder.dim() {
        return Err(Error::invalid(format!(
            "model has {} weights, the encoding needs {}",
            model.weights.len(),
            encoder.dim()
        )));
    }
    if client.is_empty() {
        return Ok(LocalUpdate {
            model: model.clone(),
            samples: 0,
            empty: true,
        });
    }
    let stream = seed::derive_indexed(
        seed::derive(config.seed, client.client_id().as_str()),
        "round",
        round as u64,
    );
    let mut rng = seed::rng(stream);
    let mut w = model.weights.clone();
    let rows = client.rows();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| &rows[i]).collect();
            encoder.step(&mut w, &batch, config.learning_rate);
        }
    }
    Ok(LocalUpdate {
        model: ModelState {
            weights: w,
            round: model.round,
        },
        samples: rows.len(),
        empty: false,
    })
}

/// Size-weighted average `θ_ref + Σ (n_i/N)(θ_i − θ_ref)` of non-empty
/// updates, with `θ_ref` the first of them, so identical models average to
/// themselves exactly.
pub fn weighted_average(updates: &[LocalUpdate]) -> Result<Vec<f64>> {
    let live: Vec<&LocalUpdate> = updates
        .iter()
        .filter(|u| !u.empty && u.samples > 0)
        .collect();
    let reference = live
        .first()
        .ok_or_else(|| Error::invalid("FedAvg needs at least one non-empty client"))?;
    let total: usize = live.iter().map(|u| u.samples).sum();
    let mut avg = reference.model.weights.clone();
    for u in &live[1..] {
        let share = u.samples as f64 / total as f64;
        for ((a, &x), &r) in avg
            .iter_mut()
            .zip(&u.model.weights)
            .zip(&reference.model.weights)
        {
            *a += share * (x - r);
        }
    }
    Ok(avg)
}

/// One FedAvg round: members train locally in parallel, then their models
/// are averaged with weights `|D_i| / |D_W|` in member order.
pub fn fedavg_round(
    encoder: &Encoder,
    model: &ModelState,
    clients: &[&ClientDataset],
    config: &TrainConfig,
) -> Result<ModelState> {
    let round = model.round;
    let updates: Vec<LocalUpdate> = clients
        .par_iter()
        .map(|c| local_train(encoder, model, c, config, round))
        .collect::<Result<_>>()?;
    Ok(ModelState {
        weights: weighted_average(&updates)?,
        round: round + 1,
    })
}
