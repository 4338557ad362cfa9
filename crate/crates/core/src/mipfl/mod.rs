//! Federated MI reconstruction and the Potential Federation Loss.
//!
//! The server never sees rows. For a candidate federation `W` it sums the
//! released tables cell-wise, `N_W(x, y) = Σ_{i∈W} N_i(x, y)`, estimates the
//! pooled MI of every pair from the sums, and combines them into
//!
//! ```text
//! PFL(W) = α MI(S,T) + β Σ_k MI(S,N_k) + γ Σ_{k<j} MI(N_k,N_j) − λ Σ_k MI(N_k,T)
//! ```
//!
//! Sums are kept in 2⁻²⁴ fixed point so that adding and removing a client
//! during the search is exact and order-independent, including for noisy
//! real-valued cells.

mod mi;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tabular::{ClientId, ContingencyTable, FeatureSchema, TableBundle, Var, VarPair};

pub(crate) use mi::mi_bits;
pub use mi::{marginal_entropy, mi_from_counts};

const FIXED_SCALE: f64 = (1u64 << 24) as f64;

fn to_fixed(x: f64) -> i64 {
    (x * FIXED_SCALE).round() as i64
}

fn from_fixed(x: i64) -> f64 {
    x as f64 / FIXED_SCALE
}

/// Trade-off weights of the PFL objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PflWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl PflWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, lambda: f64) -> Result<Self> {
        let w = Self {
            alpha,
            beta,
            gamma,
            lambda,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.lambda];
        if all.iter().all(|&x| x >= 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "PFL weights must be finite and non-negative: {self:?}"
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.lambda]
    }

    pub fn from_array(w: [f64; 4]) -> Result<Self> {
        Self::new(w[0], w[1], w[2], w[3])
    }
}

impl Default for PflWeights {
    /// Weights fitted on the ACS Folktables tasks.
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.89,
            gamma: 0.11,
            lambda: 1.33,
        }
    }
}

/// Unweighted MI sums of the four PFL terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PflTerms {
    /// `MI(S, T)`
    pub direct: f64,
    /// `Σ_k MI(S, N_k)`
    pub indirect: f64,
    /// `Σ_{k<j} MI(N_k, N_j)`, each unordered pair once.
    pub redundancy: f64,
    /// `Σ_k MI(N_k, T)`
    pub signal: f64,
}

impl PflTerms {
    pub fn pfl(&self, w: &PflWeights) -> f64 {
        w.alpha * self.direct + w.beta * self.indirect + w.gamma * self.redundancy
            - w.lambda * self.signal
    }
}

/// A fixed-size set of clients, stored sorted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Federation {
    members: Vec<ClientId>,
}

impl Federation {
    /// Sorts the members and rejects duplicates.
    pub fn new(members: impl IntoIterator<Item = impl Into<ClientId>>) -> Result<Self> {
        let mut members: Vec<ClientId> = members.into_iter().map(Into::into).collect();
        members.sort();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidFederation("duplicate member".into()));
        }
        if members.is_empty() {
            return Err(Error::InvalidFederation(
                "a federation needs at least one member".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[ClientId] {
        &self.members
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, id: &ClientId) -> bool {
        self.members.binary_search(id).is_ok()
    }

    /// Short hex digest identifying the member set.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.members {
            h.update(m.as_str().as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl fmt::Display for Federation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.members.iter().map(ClientId::as_str).collect();
        f.write_str(&ids.join(", "))
    }
}

/// The candidate pool: one validated bundle per client, sorted by id.
#[derive(Debug, Clone)]
pub struct BundlePool {
    schema: Arc<FeatureSchema>,
    ids: Vec<ClientId>,
    bundles: Vec<TableBundle>,
    index: HashMap<ClientId, usize>,
    pairs: Vec<VarPair>,
    shapes: Vec<(usize, usize)>,
    fixed: Vec<Vec<Vec<i64>>>,
}

impl BundlePool {
    /// Checks schema hashes, table layout and that all bundles share one
    /// noise scale.
    pub fn new(
        schema: Arc<FeatureSchema>,
        bundles: impl IntoIterator<Item = TableBundle>,
    ) -> Result<Self> {
        let mut bundles: Vec<TableBundle> = bundles.into_iter().collect();
        bundles.sort_by(|a, b| a.client_id().cmp(b.client_id()));
        let hash = schema.hash();
        let pairs = schema.pairs();
        let shapes: Vec<(usize, usize)> = pairs
            .iter()
            .map(|p| {
                (
                    schema.cardinality(p.first()),
                    schema.cardinality(p.second()),
                )
            })
            .collect();
        let noise = bundles.first().map_or(0.0, TableBundle::noise_scale);
        let mut index = HashMap::with_capacity(bundles.len());
        let mut fixed = Vec::with_capacity(bundles.len());
        for (i, b) in bundles.iter().enumerate() {
            if b.schema_hash() != hash {
                return Err(Error::SchemaMismatch {
                    client: b.client_id().to_string(),
                    expected: hash,
                    found: b.schema_hash().to_owned(),
                });
            }
            if b.noise_scale() != noise {
                return Err(Error::NoiseScaleMismatch {
                    client: b.client_id().to_string(),
                    expected: noise,
                    found: b.noise_scale(),
                });
            }
            if b.len() != pairs.len() || b.tables().iter().zip(&pairs).any(|(t, p)| t.pair() != *p)
            {
                return Err(Error::invalid(format!(
                    "bundle of `{}` does not hold the schema's pairs in canonical order",
                    b.client_id()
                )));
            }
            if index.insert(b.client_id().clone(), i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate bundle for `{}`",
                    b.client_id()
                )));
            }
            fixed.push(
                b.tables()
                    .iter()
                    .map(|t| t.cells().iter().map(|&c| to_fixed(c)).collect())
                    .collect(),
            );
        }
        let ids = bundles.iter().map(|b| b.client_id().clone()).collect();
        Ok(Self {
            schema,
            ids,
            bundles,
            index,
            pairs,
            shapes,
            fixed,
        })
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn ids(&self) -> &[ClientId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bundles(&self) -> &[TableBundle] {
        &self.bundles
    }

    pub fn index_of(&self, id: &ClientId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingBundle(id.to_string()))
    }

    pub fn noise_scale(&self) -> f64 {
        self.bundles.first().map_or(0.0, TableBundle::noise_scale)
    }

    /// Pool indices of a federation's members.
    pub fn indices(&self, federation: &Federation) -> Result<Vec<usize>> {
        federation
            .members()
            .iter()
            .map(|m| self.index_of(m))
            .collect()
    }

    pub fn federation(&self, indices: &[usize]) -> Federation {
        Federation::new(indices.iter().map(|&i| self.ids[i].clone()))
            .expect("distinct pool indices")
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PairAggregate {
    pair: VarPair,
    rows: usize,
    cols: usize,
    sums: Vec<i64>,
    total: f64,
    mi: f64,
}

/// Summed tables, per-pair MI and PFL terms of one federation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateView {
    members: Vec<usize>,
    pairs: Vec<PairAggregate>,
    terms: PflTerms,
}

impl AggregateView {
    /// Pool indices of the members, ascending.
    pub fn member_indices(&self) -> &[usize] {
        &self.members
    }

    pub fn terms(&self) -> PflTerms {
        self.terms
    }

    pub fn pfl(&self, weights: &PflWeights) -> f64 {
        self.terms.pfl(weights)
    }

    pub fn pairs(&self) -> impl Iterator<Item = VarPair> + '_ {
        self.pairs.iter().map(|p| p.pair)
    }

    pub fn mi(&self, pair: VarPair) -> Option<f64> {
        self.pairs.iter().find(|p| p.pair == pair).map(|p| p.mi)
    }

    /// `n_W` of the pair: the sum of its aggregated cells.
    pub fn total(&self, pair: VarPair) -> Option<f64> {
        self.pairs.iter().find(|p| p.pair == pair).map(|p| p.total)
    }

    pub fn totals(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.total)
    }

    /// Aggregated counts of a pair as a table.
    pub fn table(&self, pair: VarPair) -> Option<ContingencyTable> {
        let p = self.pairs.iter().find(|p| p.pair == pair)?;
        let cells: Vec<f64> = p.sums.iter().map(|&s| from_fixed(s)).collect();
        let exact = cells.iter().all(|&c| c >= 0.0 && c.fract() == 0.0);
        ContingencyTable::from_cells(p.pair, p.rows, p.cols, cells, exact).ok()
    }

    /// Raw fixed-point sums; equality of these is the exactness contract of
    /// [`swap_update`].
    pub fn fixed_sums(&self) -> Vec<&[i64]> {
        self.pairs.iter().map(|p| p.sums.as_slice()).collect()
    }

    pub fn without_mi(pool: &BundlePool, members: &[usize]) -> Self {
        let pairs = pool
            .pairs
            .iter()
            .zip(&pool.shapes)
            .enumerate()
            .map(|(pi, (&pair, &(rows, cols)))| {
                let mut sums = vec![0i64; rows * cols];
                for &m in members {
                    for (s, &c) in sums.iter_mut().zip(&pool.fixed[m][pi]) {
                        *s += c;
                    }
                }
                PairAggregate {
                    pair,
                    rows,
                    cols,
                    sums,
                    total: 0.0,
                    mi: 0.0,
                }
            })
            .collect();
        Self {
            members: members.to_vec(),
            pairs,
            terms: PflTerms::default(),
        }
    }

    fn refresh(&mut self, schema: &FeatureSchema) -> Result<()> {
        for p in &mut self.pairs {
            let cells: Vec<f64> = p.sums.iter().map(|&s| from_fixed(s)).collect();
            p.total = cells.iter().sum();
            p.mi = mi_bits(&cells, p.rows, p.cols).ok_or_else(|| Error::DegenerateAggregate {
                pair: schema.pair_name(p.pair),
            })?;
        }
        self.terms = pfl_terms(self, schema)?;
        Ok(())
    }
}

/// Aggregates the members' bundles and fills the MI and PFL caches.
pub fn aggregate(pool: &BundlePool, federation: &Federation) -> Result<AggregateView> {
    let members = pool.indices(federation)?;
    aggregate_indices(pool, &members)
}

/// [`aggregate`] addressed by pool indices. Indices are sorted; duplicates
/// are rejected.
pub fn aggregate_indices(pool: &BundlePool, members: &[usize]) -> Result<AggregateView> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidFederation("duplicate member".into()));
    }
    if let Some(&bad) = sorted.iter().find(|&&i| i >= pool.len()) {
        return Err(Error::MissingBundle(format!("pool index {bad}")));
    }
    let mut view = AggregateView::without_mi(pool, &sorted);
    view.refresh(&pool.schema)?;
    Ok(view)
}

/// The four unweighted PFL sums, looked up pair by pair.
pub fn pfl_terms(view: &AggregateView, schema: &FeatureSchema) -> Result<PflTerms> {
    let mi = |a: Var, b: Var| {
        let pair = VarPair::new(a, b);
        view.mi(pair)
            .ok_or_else(|| Error::MissingPair(schema.pair_name(pair)))
    };
    let s = schema.sensitive();
    let ns: Vec<usize> = schema.non_sensitive().collect();
    let mut terms = PflTerms {
        direct: mi(s, Var::Target)?,
        ..PflTerms::default()
    };
    for (idx, &k) in ns.iter().enumerate() {
        terms.indirect += mi(s, Var::Feature(k))?;
        terms.signal += mi(Var::Feature(k), Var::Target)?;
        for &j in &ns[idx + 1..] {
            terms.redundancy += mi(Var::Feature(k), Var::Feature(j))?;
        }
    }
    Ok(terms)
}

/// PFL of an aggregate under `weights`.
pub fn pfl(view: &AggregateView, weights: &PflWeights, schema: &FeatureSchema) -> Result<f64> {
    Ok(pfl_terms(view, schema)?.pfl(weights))
}

/// Replaces `out_client` by `in_client`, subtracting and adding one bundle
/// instead of re-summing all members. Counts equal those of a fresh
/// [`aggregate`] exactly.
pub fn swap_update(
    view: &AggregateView,
    pool: &BundlePool,
    out_client: &ClientId,
    in_client: &ClientId,
) -> Result<AggregateView> {
    let out = pool.index_of(out_client)?;
    let inn = pool.index_of(in_client)?;
    swap_update_indices(view, pool, out, inn)
}

pub fn swap_update_indices(
    view: &AggregateView,
    pool: &BundlePool,
    out: usize,
    inn: usize,
) -> Result<AggregateView> {
    let pos = view
        .members
        .binary_search(&out)
        .map_err(|_| Error::InvalidFederation(format!("`{}` is not a member", pool.ids[out])))?;
    if view.members.binary_search(&inn).is_ok() {
        return Err(Error::InvalidFederation(format!(
            "`{}` is already a member",
            pool.ids[inn]
        )));
    }
    let mut next = view.clone();
    next.members.remove(pos);
    let at = next.members.binary_search(&inn).unwrap_err();
    next.members.insert(at, inn);
    for (pi, p) in next.pairs.iter_mut().enumerate() {
        for ((s, &o), &i) in p
            .sums
            .iter_mut()
            .zip(&pool.fixed[out][pi])
            .zip(&pool.fixed[inn][pi])
        {
            *s += i - o;
        }
    }
    next.refresh(&pool.schema)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRange {
    pub min: f64,
    pub max: f64,
}

/// JSON evaluation report of one federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PflReport {
    pub federation: Vec<ClientId>,
    pub pfl: f64,
    pub terms: PflTerms,
    pub n_w: SampleRange,
}

pub fn pfl_report(
    pool: &BundlePool,
    federation: &Federation,
    weights: &PflWeights,
) -> Result<PflReport> {
    let view = aggregate(pool, federation)?;
    let (min, max) = view
        .totals()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            (lo.min(t), hi.max(t))
        });
    Ok(PflReport {
        federation: federation.members().to_vec(),
        pfl: view.pfl(weights),
        terms: view.terms(),
        n_w: SampleRange { min, max },
    })
}
