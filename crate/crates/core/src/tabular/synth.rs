//! Synthetic client generation with planted dependence.
//!
//! Variables are drawn in the order `S`, the non-sensitive features
//! ascending, then `T`. Each variable has its own marginal and a list of
//! incoming couplings `(parent, strength)`. For every row a single uniform
//! draw picks at most one parent: with probability `strength_j` the value is
//! copied from parent `j` (reduced modulo the child's domain), otherwise it
//! comes from the marginal. Strength 0 leaves the variable independent of
//! that parent; strength 1 makes it a deterministic copy. For a fixed input
//! distribution MI is convex in the channel and zero at strength 0, so it
//! increases strictly with the strength whenever the copy is informative.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::{ClientDataset, Record};
use super::schema::{FeatureSchema, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// Parent variable name.
    pub from: String,
    /// Child variable name.
    pub to: String,
    pub strength: f64,
}

impl Coupling {
    pub fn new(from: impl Into<String>, to: impl Into<String>, strength: f64) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSynthSpec {
    pub client_id: String,
    pub rows: usize,
    /// One probability vector per feature, in schema order.
    pub feature_marginals: Vec<Vec<f64>>,
    pub target_marginal: Vec<f64>,
    #[serde(default)]
    pub couplings: Vec<Coupling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clients: Vec<ClientSynthSpec>,
}

/// Uniform marginals for every variable of `schema`.
pub fn uniform_marginals(schema: &FeatureSchema) -> (Vec<Vec<f64>>, Vec<f64>) {
    let uni = |n: usize| vec![1.0 / n as f64; n];
    let features = schema
        .features()
        .iter()
        .map(|d| uni(d.cardinality()))
        .collect();
    (features, uni(schema.target().cardinality()))
}

/// Generation order: sensitive attribute, remaining features, target.
fn generation_order(schema: &FeatureSchema) -> Vec<Var> {
    let mut order = vec![schema.sensitive()];
    order.extend(schema.non_sensitive().map(Var::Feature));
    order.push(Var::Target);
    order
}

struct Node {
    var: Var,
    cumulative: Vec<f64>,
    parents: Vec<(Var, f64)>,
}

fn check_probabilities(context: &str, p: &[f64], cardinality: usize) -> Result<Vec<f64>> {
    let bad = |reason: String| Error::InvalidProbability {
        context: context.to_owned(),
        reason,
    };
    if p.len() != cardinality {
        return Err(bad(format!(
            "{} entries for a domain of {cardinality}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(bad("negative or non-finite entry".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(bad(format!("entries sum to {sum}")));
    }
    let mut acc = 0.0;
    Ok(p.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect())
}

fn build_nodes(schema: &FeatureSchema, spec: &ClientSynthSpec) -> Result<Vec<Node>> {
    if spec.feature_marginals.len() != schema.feature_count() {
        return Err(Error::InvalidProbability {
            context: spec.client_id.clone(),
            reason: format!(
                "{} feature marginals for {} features",
                spec.feature_marginals.len(),
                schema.feature_count()
            ),
        });
    }
    let order = generation_order(schema);
    let position = |v: Var| order.iter().position(|&o| o == v).expect("var in order");
    let mut nodes = Vec::with_capacity(order.len());
    for &var in &order {
        let desc = schema.descriptor(var);
        let marginal = match var {
            Var::Feature(i) => &spec.feature_marginals[i],
            Var::Target => &spec.target_marginal,
        };
        let context = format!("client `{}` variable `{}`", spec.client_id, desc.name);
        let cumulative = check_probabilities(&context, marginal, desc.cardinality())?;
        let mut parents = Vec::new();
        for c in spec.couplings.iter().filter(|c| c.to == desc.name) {
            let from = schema.var_by_name(&c.from).ok_or_else(|| {
                Error::invalid(format!("coupling from unknown variable `{}`", c.from))
            })?;
            if position(from) >= position(var) {
                return Err(Error::invalid(format!(
                    "coupling `{}` -> `{}` must point forward in the order S, features, T",
                    c.from, c.to
                )));
            }
            if !(0.0..=1.0).contains(&c.strength) {
                return Err(Error::InvalidProbability {
                    context: context.clone(),
                    reason: format!("coupling strength {} outside [0, 1]", c.strength),
                });
            }
            parents.push((from, c.strength));
        }
        let total: f64 = parents.iter().map(|p| p.1).sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::InvalidProbability {
                context,
                reason: format!("incoming coupling strengths sum to {total}"),
            });
        }
        nodes.push(Node {
            var,
            cumulative,
            parents,
        });
    }
    for c in &spec.couplings {
        if schema.var_by_name(&c.to).is_none() {
            return Err(Error::invalid(format!(
                "coupling to unknown variable `{}`",
                c.to
            )));
        }
    }
    Ok(nodes)
}

fn sample_categorical(cumulative: &[f64], u: f64) -> usize {
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

fn sample_rows(
    schema: &FeatureSchema,
    nodes: &[Node],
    n: usize,
    rng: &mut seed::Rng,
) -> Vec<Record> {
    let k = schema.feature_count();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut rec = Record::new(vec![0; k], 0);
        for node in nodes {
            let card = node.cumulative.len();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut value = None;
            for &(parent, strength) in &node.parents {
                acc += strength;
                if u < acc {
                    value = Some(rec.value(parent) % card);
                    break;
                }
            }
            let value = value.unwrap_or_else(|| sample_categorical(&node.cumulative, rng.random()));
            match node.var {
                Var::Feature(i) => rec.features[i] = value,
                Var::Target => rec.target = value,
            }
        }
        rows.push(rec);
    }
    rows
}

/// Generates one dataset per client spec. Each client draws from its own
/// stream derived from `(seed, client_id)`.
pub fn synth_clients(
    schema: &Arc<FeatureSchema>,
    spec: &SynthSpec,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    spec.clients
        .iter()
        .map(|c| {
            let nodes = build_nodes(schema, c)?;
            let mut rng = seed::rng(seed::derive(seed, &c.client_id));
            let rows = sample_rows(schema, &nodes, c.rows, &mut rng);
            ClientDataset::new(c.client_id.as_str(), rows, Arc::clone(schema))
        })
        .collect()
}

/// Draws `n` fresh records from one client's generative model.
pub fn sample_records(
    schema: &FeatureSchema,
    spec: &ClientSynthSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Record>> {
    let nodes = build_nodes(schema, spec)?;
    let mut rng = seed::rng(seed);
    Ok(sample_rows(schema, &nodes, n, &mut rng))
}

/// Ready-made pools used by the CLI, the acceptance suite and benches.
pub mod presets {
    use super::*;
    use crate::tabular::FeatureDescriptor;

    /// Schema `sex` (sensitive, binary), `f1..f{extra}` (ternary) and a
    /// binary target `y`.
    pub fn binary_task_schema(extra_features: usize) -> Arc<FeatureSchema> {
        let mut features = vec![FeatureDescriptor::new("sex", ["0", "1"])];
        for i in 1..=extra_features {
            features.push(FeatureDescriptor::indexed(format!("f{i}"), 3));
        }
        Arc::new(
            FeatureSchema::new(features, 0, FeatureDescriptor::new("y", ["0", "1"]))
                .expect("valid preset schema"),
        )
    }

    /// Pool of `clients` clients over `binary_task_schema(2)`, each with its
    /// own coupling strengths drawn uniformly from `seed`: `sex → f1` and
    /// `f1 → f2` in [0, 0.5], `sex → y` in [0, 0.4], `f1 → y` and `f2 → y`
    /// in [0, 0.3].
    pub fn heterogeneous(
        clients: usize,
        rows: usize,
        seed: u64,
    ) -> Result<(Arc<FeatureSchema>, Vec<ClientDataset>)> {
        let schema = binary_task_schema(2);
        let mut rng = seed::rng(seed::derive(seed, "heterogeneous-spec"));
        let (feature_marginals, target_marginal) = uniform_marginals(&schema);
        let mut draw = |hi: f64| hi * rng.random::<f64>();
        let spec = SynthSpec {
            clients: (0..clients)
                .map(|i| ClientSynthSpec {
                    client_id: format!("c{i:02}"),
                    rows,
                    feature_marginals: feature_marginals.clone(),
                    target_marginal: target_marginal.clone(),
                    couplings: vec![
                        Coupling::new("sex", "f1", draw(0.5)),
                        Coupling::new("f1", "f2", draw(0.5)),
                        Coupling::new("sex", "y", draw(0.4)),
                        Coupling::new("f1", "y", draw(0.3)),
                        Coupling::new("f2", "y", draw(0.3)),
                    ],
                })
                .collect(),
        };
        let data = synth_clients(&schema, &spec, seed)?;
        Ok((schema, data))
    }

    /// Pool of `clients` clients drawn from one generative model over
    /// `binary_task_schema(2)` with fixed moderate couplings.
    pub fn homogeneous(
        clients: usize,
        rows: usize,
        seed: u64,
    ) -> Result<(Arc<FeatureSchema>, Vec<ClientDataset>)> {
        let schema = binary_task_schema(2);
        let (feature_marginals, target_marginal) = uniform_marginals(&schema);
        let spec = SynthSpec {
            clients: (0..clients)
                .map(|i| ClientSynthSpec {
                    client_id: format!("c{i:02}"),
                    rows,
                    feature_marginals: feature_marginals.clone(),
                    target_marginal: target_marginal.clone(),
                    couplings: vec![
                        Coupling::new("sex", "f1", 0.3),
                        Coupling::new("f1", "f2", 0.4),
                        Coupling::new("sex", "y", 0.2),
                        Coupling::new("f1", "y", 0.3),
                        Coupling::new("f2", "y", 0.2),
                    ],
                })
                .collect(),
        };
        let data = synth_clients(&schema, &spec, seed)?;
        Ok((schema, data))
    }

    /// Knobs of the planted-bias pool.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    pub struct PlantedBias {
        pub clients: usize,
        /// Clients `0..biased` carry the planted bias.
        pub biased: usize,
        pub rows_per_client: usize,
        pub extra_features: usize,
        /// `sex -> y` copy strength for biased clients.
        pub direct_bias: f64,
        /// `sex -> f1` copy strength for biased clients.
        pub proxy_bias: f64,
        /// Total copy strength into `y` from the signal features for
        /// unbiased clients. With two or more extra features it is split
        /// evenly between `f1` and `f2`, so rows where they disagree have
        /// `P(y = 1) = 1/2`.
        pub signal: f64,
        /// The same for biased clients.
        pub biased_signal: f64,
        /// `f1 -> f2` copy strength (all clients).
        pub redundancy: f64,
    }

    impl Default for PlantedBias {
        fn default() -> Self {
            Self {
                clients: 20,
                biased: 10,
                rows_per_client: 3000,
                extra_features: 3,
                direct_bias: 0.5,
                proxy_bias: 0.4,
                signal: 0.7,
                biased_signal: 0.3,
                redundancy: 0.2,
            }
        }
    }

    impl PlantedBias {
        pub fn schema(&self) -> Arc<FeatureSchema> {
            binary_task_schema(self.extra_features)
        }

        /// Generative parameters of client `i`.
        pub fn client_spec(&self, schema: &FeatureSchema, i: usize) -> ClientSynthSpec {
            self.population(
                schema,
                format!("c{i:02}"),
                i < self.biased,
                self.rows_per_client,
            )
        }

        fn population(
            &self,
            schema: &FeatureSchema,
            client_id: String,
            biased: bool,
            rows: usize,
        ) -> ClientSynthSpec {
            let (feature_marginals, target_marginal) = uniform_marginals(schema);
            let mut couplings = Vec::new();
            let signal = if biased {
                self.biased_signal
            } else {
                self.signal
            };
            match self.extra_features {
                0 => {}
                1 => couplings.push(Coupling::new("f1", "y", signal)),
                _ => {
                    couplings.push(Coupling::new("f1", "f2", self.redundancy));
                    couplings.push(Coupling::new("f1", "y", signal / 2.0));
                    couplings.push(Coupling::new("f2", "y", signal / 2.0));
                }
            }
            if biased && self.extra_features >= 1 {
                couplings.push(Coupling::new("sex", "f1", self.proxy_bias));
            }
            if biased {
                couplings.push(Coupling::new("sex", "y", self.direct_bias));
            }
            ClientSynthSpec {
                client_id,
                rows,
                feature_marginals,
                target_marginal,
                couplings,
            }
        }

        /// Evaluation set drawn from the unbiased population: the planted
        /// bias is a labelling artefact of the biased clients, not a
        /// property of the population the model is deployed on.
        pub fn holdout(
            &self,
            schema: &Arc<FeatureSchema>,
            rows: usize,
            seed: u64,
        ) -> Result<ClientDataset> {
            let spec = self.population(schema, "holdout".into(), false, rows);
            let records = sample_records(schema, &spec, rows, seed::derive(seed, "holdout"))?;
            ClientDataset::new("holdout", records, Arc::clone(schema))
        }

        pub fn spec(&self) -> SynthSpec {
            let schema = self.schema();
            SynthSpec {
                clients: (0..self.clients)
                    .map(|i| self.client_spec(&schema, i))
                    .collect(),
            }
        }
    }
}
