use serde::{Deserialize, Serialize};

use super::dataset::{ClientDataset, ClientId};
use super::schema::{FeatureSchema, Var, VarPair};
use crate::error::{Error, Result};

/// Dense joint-count grid for one variable pair, row-major with the first
/// variable of the pair on rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pair: VarPair,
    rows: usize,
    cols: usize,
    cells: Vec<f64>,
    exact: bool,
}

impl ContingencyTable {
    pub fn zeros(pair: VarPair, rows: usize, cols: usize) -> Self {
        Self {
            pair,
            rows,
            cols,
            cells: vec![0.0; rows * cols],
            exact: true,
        }
    }

    /// Builds a table from real-valued cells. The result is flagged exact
    /// only if `exact` is requested and every cell is a non-negative integer.
    pub fn from_cells(
        pair: VarPair,
        rows: usize,
        cols: usize,
        cells: Vec<f64>,
        exact: bool,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || cells.len() != rows * cols {
            return Err(Error::invalid(format!(
                "table for {pair} has {} cells, expected {rows}x{cols}",
                cells.len()
            )));
        }
        if cells.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!(
                "table for {pair} has non-finite cells"
            )));
        }
        if exact && cells.iter().any(|&c| c < 0.0 || c.fract() != 0.0) {
            return Err(Error::invalid(format!(
                "exact table for {pair} must hold non-negative integers"
            )));
        }
        Ok(Self {
            pair,
            rows,
            cols,
            cells,
            exact,
        })
    }

    /// Convenience constructor for tests and examples: a table over
    /// `(X0, X1)` from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged table rows"));
        }
        let cells: Vec<f64> = rows.iter().flat_map(|row| row.iter().copied()).collect();
        let exact = cells.iter().all(|&v| v >= 0.0 && v.fract() == 0.0);
        Self::from_cells(
            VarPair::new(Var::Feature(0), Var::Feature(1)),
            r,
            c,
            cells,
            exact,
        )
    }

    pub fn pair(&self) -> VarPair {
        self.pair
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.cols + col]
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum()
    }

    pub fn row_marginals(&self) -> Vec<f64> {
        self.cells
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_marginals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.cells.chunks(self.cols) {
            for (acc, v) in out.iter_mut().zip(row) {
                *acc += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut cells = vec![0.0; self.cells.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                cells[c * self.rows + r] = self.cells[r * self.cols + c];
            }
        }
        Self {
            pair: self.pair,
            rows: self.cols,
            cols: self.rows,
            cells,
            exact: self.exact,
        }
    }

    /// Same pair and shape, new cells, flagged non-exact.
    pub(crate) fn with_cells(&self, cells: Vec<f64>) -> Self {
        debug_assert_eq!(cells.len(), self.cells.len());
        Self {
            pair: self.pair,
            rows: self.rows,
            cols: self.cols,
            cells,
            exact: false,
        }
    }

    pub(crate) fn increment(&mut self, row: usize, col: usize) {
        self.cells[row * self.cols + col] += 1.0;
    }
}

/// All `M = K(K+1)/2` pairwise tables released by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct TableBundle {
    client_id: ClientId,
    schema_hash: String,
    feature_count: usize,
    noise_scale: f64,
    exact: bool,
    tables: Vec<ContingencyTable>,
}

impl TableBundle {
    pub fn client_id(&self) -> &ClientId {
        &self.client_id
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn tables(&self) -> &[ContingencyTable] {
        &self.tables
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn table(&self, pair: VarPair) -> Option<&ContingencyTable> {
        self.tables.iter().find(|t| t.pair == pair)
    }

    pub fn with_client_id(mut self, id: impl Into<ClientId>) -> Self {
        self.client_id = id.into();
        self
    }

    pub(crate) fn replace_tables(&self, tables: Vec<ContingencyTable>, noise_scale: f64) -> Self {
        Self {
            client_id: self.client_id.clone(),
            schema_hash: self.schema_hash.clone(),
            feature_count: self.feature_count,
            noise_scale,
            exact: false,
            tables,
        }
    }

    /// Adds one record's contribution to every table of an exact bundle.
    pub(crate) fn add_record(&mut self, record: &super::Record) {
        for t in &mut self.tables {
            let (a, b) = (t.pair.first(), t.pair.second());
            t.increment(record.value(a), record.value(b));
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let wire = WireBundle {
            client_id: self.client_id.clone(),
            schema_hash: self.schema_hash.clone(),
            noise_scale: self.noise_scale,
            tables: self
                .tables
                .iter()
                .map(|t| WireTable {
                    pair: [
                        t.pair.first().wire_index(self.feature_count),
                        t.pair.second().wire_index(self.feature_count),
                    ],
                    shape: [t.rows, t.cols],
                    cells: t.cells.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&wire)?)
    }

    /// Parses a bundle and checks it against `schema`. A bundle is exact
    /// when its noise scale is zero and all cells are non-negative integers.
    pub fn from_json(json: &str, schema: &FeatureSchema) -> Result<Self> {
        let wire: WireBundle = serde_json::from_str(json)?;
        let expected = schema.hash();
        if wire.schema_hash != expected {
            return Err(Error::SchemaMismatch {
                client: wire.client_id.to_string(),
                expected,
                found: wire.schema_hash,
            });
        }
        if !(wire.noise_scale >= 0.0 && wire.noise_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "bundle noise scale {} is invalid",
                wire.noise_scale
            )));
        }
        let k = schema.feature_count();
        let canonical = schema.pairs();
        if wire.tables.len() != canonical.len() {
            return Err(Error::QueryCountMismatch {
                expected: canonical.len(),
                found: wire.tables.len(),
            });
        }
        let exact_candidate = wire.noise_scale == 0.0
            && wire
                .tables
                .iter()
                .all(|t| t.cells.iter().all(|&c| c >= 0.0 && c.fract() == 0.0));
        let mut tables = Vec::with_capacity(wire.tables.len());
        for (wt, &pair) in wire.tables.into_iter().zip(&canonical) {
            let a = Var::from_wire_index(wt.pair[0], k);
            let b = Var::from_wire_index(wt.pair[1], k);
            let (Some(a), Some(b)) = (a, b) else {
                return Err(Error::invalid(format!(
                    "table pair {:?} out of range",
                    wt.pair
                )));
            };
            if VarPair::new(a, b) != pair || a > b {
                return Err(Error::invalid(format!(
                    "table pair {:?} is not canonical; expected {pair}",
                    wt.pair
                )));
            }
            let shape = [schema.cardinality(a), schema.cardinality(b)];
            if wt.shape != shape {
                return Err(Error::invalid(format!(
                    "table {pair} has shape {:?}, schema requires {shape:?}",
                    wt.shape
                )));
            }
            tables.push(ContingencyTable::from_cells(
                pair,
                shape[0],
                shape[1],
                wt.cells,
                exact_candidate,
            )?);
        }
        Ok(Self {
            client_id: wire.client_id,
            schema_hash: wire.schema_hash,
            feature_count: k,
            noise_scale: wire.noise_scale,
            exact: exact_candidate,
            tables,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireTable {
    pair: [usize; 2],
    shape: [usize; 2],
    cells: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireBundle {
    client_id: ClientId,
    schema_hash: String,
    noise_scale: f64,
    tables: Vec<WireTable>,
}

/// Exact bundle with zero counts for every pair of `schema`.
pub fn empty_bundle(client_id: ClientId, schema: &FeatureSchema) -> TableBundle {
    let tables = schema
        .pairs()
        .into_iter()
        .map(|p| {
            ContingencyTable::zeros(
                p,
                schema.cardinality(p.first()),
                schema.cardinality(p.second()),
            )
        })
        .collect();
    TableBundle {
        client_id,
        schema_hash: schema.hash(),
        feature_count: schema.feature_count(),
        noise_scale: 0.0,
        exact: true,
        tables,
    }
}

/// Counts every unordered variable pair of the dataset into an exact bundle.
pub fn compute_tables(dataset: &ClientDataset) -> Result<TableBundle> {
    let schema = dataset.schema();
    let mut bundle = empty_bundle(dataset.client_id().clone(), schema);
    for (i, record) in dataset.rows().iter().enumerate() {
        record.check(schema, i)?;
        bundle.add_record(record);
    }
    Ok(bundle)
}
