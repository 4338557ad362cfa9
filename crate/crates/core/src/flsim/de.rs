use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Hyperparameters of rand/1/bin differential evolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub population: usize,
    /// Differential weight, in (0, 2).
    pub f: f64,
    /// Crossover rate, in (0, 1).
    pub cr: f64,
    pub generations: usize,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            population: 20,
            f: 0.8,
            cr: 0.9,
            generations: 200,
            seed: 0,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::invalid(
                "differential evolution needs a population of at least 4",
            ));
        }
        if !(self.f > 0.0 && self.f < 2.0) || !(self.cr > 0.0 && self.cr < 1.0) {
            return Err(Error::invalid(format!(
                "need F in (0, 2) and CR in (0, 1), got F = {}, CR = {}",
                self.f, self.cr
            )));
        }
        if self.generations == 0 {
            return Err(Error::invalid("generations must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Minimises `objective` over the box `bounds`. Rows of `initial` replace
/// the first random members of the starting population. Mutants leaving
/// the box are clipped to it. Selection keeps the trial on ties.
pub fn minimize(
    objective: impl Fn(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    initial: &[Vec<f64>],
    config: &DeConfig,
) -> Result<DeResult> {
    config.validate()?;
    if bounds.is_empty() || bounds.iter().any(|&(lo, hi)| !(lo <= hi)) {
        return Err(Error::invalid("bounds must be non-empty with lo ≤ hi"));
    }
    let dim = bounds.len();
    let np = config.population;
    let mut rng = seed::rng(seed::derive(config.seed, "differential-evolution"));
    let clip = |x: f64, d: usize| x.clamp(bounds[d].0, bounds[d].1);

    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|i| match initial.get(i) {
            Some(x) if x.len() == dim => x.iter().enumerate().map(|(d, &v)| clip(v, d)).collect(),
            _ => bounds
                .iter()
                .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                .collect(),
        })
        .collect();
    let mut fit: Vec<f64> = pop.iter().map(|x| objective(x)).collect();
    let mut evaluations = np;

    for _ in 0..config.generations {
        for i in 0..np {
            let pick = |rng: &mut seed::Rng, taken: &[usize]| loop {
                let r = rng.random_range(0..np);
                if !taken.contains(&r) {
                    break r;
                }
            };
            let r1 = pick(&mut rng, &[i]);
            let r2 = pick(&mut rng, &[i, r1]);
            let r3 = pick(&mut rng, &[i, r1, r2]);
            let jrand = rng.random_range(0..dim);
            let trial: Vec<f64> = (0..dim)
                .map(|d| {
                    if d == jrand || rng.random::<f64>() < config.cr {
                        clip(pop[r1][d] + config.f * (pop[r2][d] - pop[r3][d]), d)
                    } else {
                        pop[i][d]
                    }
                })
                .collect();
            let v = objective(&trial);
            evaluations += 1;
            if v <= fit[i] {
                pop[i] = trial;
                fit[i] = v;
            }
        }
    }
    let best = (0..np).fold(0, |b, i| if fit[i] < fit[b] { i } else { b });
    Ok(DeResult {
        best: pop[best].clone(),
        value: fit[best],
        evaluations,
    })
}
