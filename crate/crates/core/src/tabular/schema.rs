use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One discrete variable: a name and its ordered value labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub labels: Vec<String>,
}

impl FeatureDescriptor {
    pub fn new(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            name: name.into(),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    /// Descriptor whose labels are `0..cardinality`.
    pub fn indexed(name: impl Into<String>, cardinality: usize) -> Self {
        Self::new(name, (0..cardinality).map(|i| i.to_string()))
    }

    pub fn cardinality(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A variable of the schema. The target is addressed separately from the
/// feature list so that its index never collides with a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    Feature(usize),
    Target,
}

impl Var {
    /// Wire index: features keep their position, the target maps to `feature_count`.
    pub fn wire_index(self, feature_count: usize) -> usize {
        match self {
            Var::Feature(i) => i,
            Var::Target => feature_count,
        }
    }

    pub fn from_wire_index(index: usize, feature_count: usize) -> Option<Var> {
        match index.cmp(&feature_count) {
            std::cmp::Ordering::Less => Some(Var::Feature(index)),
            std::cmp::Ordering::Equal => Some(Var::Target),
            std::cmp::Ordering::Greater => None,
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Feature(i) => write!(f, "X{i}"),
            Var::Target => f.write_str("T"),
        }
    }
}

/// An unordered variable pair, stored canonically as `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarPair(Var, Var);

impl VarPair {
    pub fn new(a: Var, b: Var) -> Self {
        if a <= b {
            VarPair(a, b)
        } else {
            VarPair(b, a)
        }
    }

    pub fn first(self) -> Var {
        self.0
    }

    pub fn second(self) -> Var {
        self.1
    }
}

impl fmt::Display for VarPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

#[derive(Deserialize)]
struct RawSchema {
    features: Vec<FeatureDescriptor>,
    sensitive_index: usize,
    target: FeatureDescriptor,
}

/// Features with their discrete domains, the sensitive attribute `S` (one of
/// the features) and the binary-or-wider target `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct FeatureSchema {
    features: Vec<FeatureDescriptor>,
    sensitive_index: usize,
    target: FeatureDescriptor,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        FeatureSchema::new(raw.features, raw.sensitive_index, raw.target)
    }
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureDescriptor>,
        sensitive_index: usize,
        target: FeatureDescriptor,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Schema("at least one feature is required".into()));
        }
        if sensitive_index >= features.len() {
            return Err(Error::Schema(format!(
                "sensitive index {sensitive_index} out of range for {} features",
                features.len()
            )));
        }
        let mut names = HashSet::new();
        for d in features.iter().chain(std::iter::once(&target)) {
            if d.cardinality() < 2 {
                return Err(Error::Schema(format!(
                    "`{}` needs a domain of at least 2 values",
                    d.name
                )));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate variable name `{}`",
                    d.name
                )));
            }
        }
        Ok(Self {
            features,
            sensitive_index,
            target,
        })
    }

    pub fn features(&self) -> &[FeatureDescriptor] {
        &self.features
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn sensitive_index(&self) -> usize {
        self.sensitive_index
    }

    pub fn sensitive(&self) -> Var {
        Var::Feature(self.sensitive_index)
    }

    pub fn target(&self) -> &FeatureDescriptor {
        &self.target
    }

    /// Indices of the non-sensitive features, ascending.
    pub fn non_sensitive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.features.len()).filter(move |&i| i != self.sensitive_index)
    }

    pub fn descriptor(&self, var: Var) -> &FeatureDescriptor {
        match var {
            Var::Feature(i) => &self.features[i],
            Var::Target => &self.target,
        }
    }

    pub fn cardinality(&self, var: Var) -> usize {
        self.descriptor(var).cardinality()
    }

    pub fn var_by_name(&self, name: &str) -> Option<Var> {
        if self.target.name == name {
            return Some(Var::Target);
        }
        self.features
            .iter()
            .position(|d| d.name == name)
            .map(Var::Feature)
    }

    /// All unordered pairs of distinct variables over `{X_1..X_K, T}`, in
    /// canonical order.
    pub fn pairs(&self) -> Vec<VarPair> {
        let k = self.features.len();
        let var = |i: usize| if i == k { Var::Target } else { Var::Feature(i) };
        let mut out = Vec::with_capacity(k * (k + 1) / 2);
        for a in 0..k {
            for b in a + 1..=k {
                out.push(VarPair::new(var(a), var(b)));
            }
        }
        out
    }

    /// Number of released tables, `K(K+1)/2`.
    pub fn query_count(&self) -> usize {
        let k = self.features.len();
        k * (k + 1) / 2
    }

    /// Stable hex digest of the schema, shared by server and clients.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serialises");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn pair_name(&self, pair: VarPair) -> String {
        format!(
            "({}, {})",
            self.descriptor(pair.first()).name,
            self.descriptor(pair.second()).name
        )
    }
}
