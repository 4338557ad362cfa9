//! Simulated annealing over fixed-size federations.
//!
//! The chain starts from a uniformly random federation and proposes single
//! swaps (one member out, one non-member in). A proposal with
//! `Δ = PFL(W') − PFL(W) ≤ 0` is always accepted, otherwise with probability
//! `exp(−Δ/τ)`. After `iters_per_temperature` proposals the temperature is
//! multiplied by `eta`. The run stops when `τ ≤ tau_min` or after
//! `max_iterations` proposals, whichever comes first.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use itertools::Itertools;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mipfl::{
    aggregate_indices, swap_update_indices, AggregateView, BundlePool, Federation, PflWeights,
};
use crate::seed;
use crate::tabular::ClientId;

/// Largest number of federations [`exhaustive`] will enumerate.
pub const EXHAUSTIVE_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub tau0: f64,
    pub eta: f64,
    pub tau_min: f64,
    /// Cap on proposals (not temperature levels).
    pub max_iterations: usize,
    pub iters_per_temperature: usize,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            eta: 0.98,
            tau_min: 1e-4,
            max_iterations: 5000,
            iters_per_temperature: 15,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::invalid(format!(
                "eta must lie in (0, 1), got {}",
                self.eta
            )));
        }
        if !(self.tau_min > 0.0 && self.tau_min < self.tau0 && self.tau0.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < tau_min < tau0, got tau_min = {}, tau0 = {}",
                self.tau_min, self.tau0
            )));
        }
        if self.max_iterations == 0 || self.iters_per_temperature == 0 {
            return Err(Error::invalid("iteration counts must be positive"));
        }
        Ok(())
    }

    /// Number of temperature levels above `tau_min`.
    pub fn temperature_levels(&self) -> usize {
        ((self.tau_min / self.tau0).ln() / self.eta.ln()).ceil() as usize
    }

    /// Proposals the schedule will make.
    pub fn planned_proposals(&self) -> usize {
        self.max_iterations
            .min(self.temperature_levels() * self.iters_per_temperature)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One proposal of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub temperature: f64,
    /// PFL of the state the proposal was made from.
    pub current_pfl: f64,
    pub proposal_pfl: f64,
    pub accepted: bool,
    /// Best PFL seen so far, including this proposal.
    pub incumbent_pfl: f64,
    pub digest: String,
}

impl TraceRecord {
    pub fn is_uphill(&self) -> bool {
        self.proposal_pfl > self.current_pfl
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub initial_federation: Federation,
    pub initial_pfl: f64,
    pub records: Vec<TraceRecord>,
    pub best_federation: Federation,
    pub best_pfl: f64,
    /// PFL queries, the initial state included.
    pub evaluations: usize,
    /// Distinct federations whose PFL was computed.
    pub distinct_evaluations: usize,
    pub temperature_levels: usize,
    pub wall_time: f64,
}

/// Final result of a run, as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub members: Vec<ClientId>,
    pub pfl: f64,
    pub evaluations: usize,
    pub seconds: f64,
}

impl SearchTrace {
    pub fn result(&self) -> SearchResult {
        SearchResult {
            members: self.best_federation.members().to_vec(),
            pfl: self.best_pfl,
            evaluations: self.evaluations,
            seconds: self.wall_time,
        }
    }

    pub fn accepted(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.accepted)
    }

    /// Writes `iteration,temperature,proposal_pfl,accepted,incumbent_pfl`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::invalid(format!("writing trace: {e}"));
        w.write_record([
            "iteration",
            "temperature",
            "proposal_pfl",
            "accepted",
            "incumbent_pfl",
        ])
        .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.temperature),
                r.proposal_pfl.to_string(),
                u8::from(r.accepted).to_string(),
                r.incumbent_pfl.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn require_neighbor(pool: usize, k: usize) -> Result<()> {
    if k == 0 || pool <= k {
        Err(Error::NoNeighbor { pool, k })
    } else {
        Ok(())
    }
}

/// Picks the member to drop and the outsider to add, both uniformly.
/// `members` must be sorted.
pub(crate) fn propose_swap<R: rand::Rng + ?Sized>(
    members: &[usize],
    pool: usize,
    rng: &mut R,
) -> (usize, usize) {
    let out = members[rng.random_range(0..members.len())];
    let mut slot = rng.random_range(0..pool - members.len());
    for &m in members {
        if m <= slot {
            slot += 1;
        } else {
            break;
        }
    }
    (out, slot)
}

/// A uniformly random single-swap neighbour of `federation`.
pub fn neighbor<R: rand::Rng + ?Sized>(
    federation: &Federation,
    pool: &BundlePool,
    rng: &mut R,
) -> Result<Federation> {
    require_neighbor(pool.len(), federation.k())?;
    let mut members = pool.indices(federation)?;
    members.sort_unstable();
    let (out, inn) = propose_swap(&members, pool.len(), rng);
    let next: Vec<usize> = members
        .iter()
        .map(|&m| if m == out { inn } else { m })
        .collect();
    Ok(pool.federation(&next))
}

fn failed(pool: &BundlePool, members: &[usize], source: Error) -> Error {
    Error::SearchFailed {
        federation: pool.federation(members).to_string(),
        source: Box::new(source),
    }
}

fn random_federation<R: rand::Rng + ?Sized>(pool: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut members = rand::seq::index::sample(rng, pool, k).into_vec();
    members.sort_unstable();
    members
}

/// Runs one annealing chain.
pub fn search(
    pool: &BundlePool,
    weights: &PflWeights,
    k: usize,
    config: &ScheduleConfig,
) -> Result<SearchTrace> {
    config.validate()?;
    weights.validate()?;
    require_neighbor(pool.len(), k)?;
    let started = Instant::now();
    let mut rng = seed::rng(seed::derive(config.seed, "anneal"));

    let init = random_federation(pool.len(), k, &mut rng);
    let mut view: AggregateView =
        aggregate_indices(pool, &init).map_err(|e| failed(pool, &init, e))?;
    let mut current = view.pfl(weights);
    let initial_pfl = current;
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::from([(init.clone(), current)]);
    let mut best = (init.clone(), current);
    let mut records = Vec::with_capacity(config.planned_proposals());

    let mut tau = config.tau0;
    let mut levels = 0;
    let mut proposals = 0;
    while tau > config.tau_min && proposals < config.max_iterations {
        levels += 1;
        for _ in 0..config.iters_per_temperature {
            if proposals == config.max_iterations {
                break;
            }
            proposals += 1;
            let members = view.member_indices();
            let (out, inn) = propose_swap(members, pool.len(), &mut rng);
            let mut key: Vec<usize> = members
                .iter()
                .map(|&m| if m == out { inn } else { m })
                .collect();
            key.sort_unstable();

            let mut fresh = None;
            let proposal_pfl = match cache.get(&key) {
                Some(&v) => v,
                None => {
                    let next = swap_update_indices(&view, pool, out, inn)
                        .map_err(|e| failed(pool, &key, e))?;
                    let v = next.pfl(weights);
                    cache.insert(key.clone(), v);
                    fresh = Some(next);
                    v
                }
            };
            let delta = proposal_pfl - current;
            let accepted = delta <= 0.0 || rng.random::<f64>() < (-delta / tau).exp();
            let current_pfl = current;
            if accepted {
                view = match fresh {
                    Some(v) => v,
                    None => swap_update_indices(&view, pool, out, inn)
                        .map_err(|e| failed(pool, &key, e))?,
                };
                current = proposal_pfl;
                if current < best.1 {
                    best = (key.clone(), current);
                }
            }
            records.push(TraceRecord {
                iteration: proposals,
                temperature: tau,
                current_pfl,
                proposal_pfl,
                accepted,
                incumbent_pfl: best.1,
                digest: pool.federation(&key).digest(),
            });
        }
        tau *= config.eta;
    }

    Ok(SearchTrace {
        initial_federation: pool.federation(&init),
        initial_pfl,
        records,
        best_federation: pool.federation(&best.0),
        best_pfl: best.1,
        evaluations: proposals + 1,
        distinct_evaluations: cache.len(),
        temperature_levels: levels,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Outcome of several independently seeded chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub runs: Vec<SearchResult>,
    pub best: SearchResult,
    pub mean_pfl: f64,
    pub std_pfl: f64,
}

/// Runs `runs` chains in parallel, seeding run `i` from
/// `derive_indexed(config.seed, "run", i)`, and keeps the best. Ties go to
/// the lowest run index.
pub fn search_many(
    pool: &BundlePool,
    weights: &PflWeights,
    k: usize,
    config: &ScheduleConfig,
    runs: usize,
) -> Result<(MultiRunReport, Vec<SearchTrace>)> {
    if runs == 0 {
        return Err(Error::invalid("at least one run is required"));
    }
    let traces: Vec<SearchTrace> = (0..runs as u64)
        .into_par_iter()
        .map(|i| {
            search(
                pool,
                weights,
                k,
                &config.with_seed(seed::derive_indexed(config.seed, "run", i)),
            )
        })
        .collect::<Result<_>>()?;
    let results: Vec<SearchResult> = traces.iter().map(SearchTrace::result).collect();
    let best = results
        .iter()
        .fold(&results[0], |b, r| if r.pfl < b.pfl { r } else { b })
        .clone();
    let n = results.len() as f64;
    let mean_pfl = results.iter().map(|r| r.pfl).sum::<f64>() / n;
    let var = results
        .iter()
        .map(|r| (r.pfl - mean_pfl).powi(2))
        .sum::<f64>()
        / n;
    Ok((
        MultiRunReport {
            runs: results,
            best,
            mean_pfl,
            std_pfl: var.sqrt(),
        },
        traces,
    ))
}

/// `C(n, k)` without overflow for the sizes used here.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k as u128).fold(1u128, |acc, i| acc * (n as u128 - i) / (i + 1))
}

/// PFL of every federation of size `k`, in lexicographic order of pool
/// indices.
pub fn enumerate_pfl(
    pool: &BundlePool,
    weights: &PflWeights,
    k: usize,
    budget: u128,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let count = binomial(pool.len(), k);
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidFederation(format!(
            "k = {k} with a pool of {}",
            pool.len()
        )));
    }
    if count > budget {
        return Err(Error::CombinatorialBudget {
            pool: pool.len(),
            k,
            count,
            budget,
        });
    }
    (0..pool.len())
        .combinations(k)
        .map(|members| {
            let v = aggregate_indices(pool, &members).map_err(|e| failed(pool, &members, e))?;
            let p = v.pfl(weights);
            Ok((members, p))
        })
        .collect()
}

/// Exact minimiser over all federations of size `k`. Ties go to the
/// lexicographically first member list.
pub fn exhaustive(pool: &BundlePool, weights: &PflWeights, k: usize) -> Result<(Federation, f64)> {
    let all = enumerate_pfl(pool, weights, k, EXHAUSTIVE_BUDGET)?;
    let (members, value) = all
        .iter()
        .fold(&all[0], |b, c| if c.1 < b.1 { c } else { b });
    Ok((pool.federation(members), *value))
}
