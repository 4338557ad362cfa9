use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::schema::{FeatureSchema, Var};
use crate::error::{Error, Result};

/// Opaque client identifier. Ordering is lexicographic and is used for
/// tie-breaking wherever federations are enumerated.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(String);

impl ClientId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClientId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ClientId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// One discretised record: a domain index per feature plus the target index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<usize>,
    pub target: usize,
}

impl Record {
    pub fn new(features: Vec<usize>, target: usize) -> Self {
        Self { features, target }
    }

    pub fn value(&self, var: Var) -> usize {
        match var {
            Var::Feature(i) => self.features[i],
            Var::Target => self.target,
        }
    }

    pub(crate) fn check(&self, schema: &FeatureSchema, row: usize) -> Result<()> {
        if self.features.len() != schema.feature_count() {
            return Err(Error::Schema(format!(
                "row {row} has {} feature values, schema declares {}",
                self.features.len(),
                schema.feature_count()
            )));
        }
        let vars = (0..schema.feature_count())
            .map(Var::Feature)
            .chain(std::iter::once(Var::Target));
        for var in vars {
            let value = self.value(var);
            let cardinality = schema.cardinality(var);
            if value >= cardinality {
                return Err(Error::RowViolation {
                    row,
                    feature: schema.descriptor(var).name.clone(),
                    value,
                    cardinality,
                });
            }
        }
        Ok(())
    }
}

/// The local dataset `D_i` of one client.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    client_id: ClientId,
    rows: Vec<Record>,
    schema: Arc<FeatureSchema>,
}

impl ClientDataset {
    /// Validates every row against the schema.
    pub fn new(
        client_id: impl Into<ClientId>,
        rows: Vec<Record>,
        schema: Arc<FeatureSchema>,
    ) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            r.check(&schema, i)?;
        }
        Ok(Self {
            client_id: client_id.into(),
            rows,
            schema,
        })
    }

    pub fn client_id(&self) -> &ClientId {
        &self.client_id
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    /// A new dataset with the same schema and the given rows.
    pub fn with_rows(&self, client_id: impl Into<ClientId>, rows: Vec<Record>) -> Result<Self> {
        Self::new(client_id, rows, Arc::clone(&self.schema))
    }
}
