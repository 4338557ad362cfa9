use serde::{Deserialize, Serialize};

use super::model::{Encoder, ModelState};
use crate::error::{Error, Result};
use crate::tabular::{ClientDataset, FeatureSchema, Record};

/// Confusion counts of one sensitive group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl GroupConfusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn positive_rate(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.total())
    }

    fn true_positive_rate(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Utility and fairness of a model on a held-out set. Group 1 is the
/// sensitive value with index 1; differences are group 1 minus group 0.
/// Metrics whose denominator is zero are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub f1: Option<f64>,
    /// Statistical parity difference `P(Ŷ=1|S=1) − P(Ŷ=1|S=0)`.
    pub spd: Option<f64>,
    /// Equal opportunity difference `P(Ŷ=1|T=1,S=1) − P(Ŷ=1|T=1,S=0)`.
    pub eod: Option<f64>,
    /// Model accuracy difference `acc(S=1) − acc(S=0)`.
    pub mad: Option<f64>,
    pub groups: [GroupConfusion; 2],
}

impl EvalReport {
    pub fn from_confusion(groups: [GroupConfusion; 2]) -> Result<Self> {
        let all = groups[0].add(groups[1]);
        if all.total() == 0 {
            return Err(Error::invalid("evaluation set is empty"));
        }
        let f1 = ratio(2 * all.tp, 2 * all.tp + all.fp + all.fn_);
        Ok(Self {
            samples: all.total(),
            accuracy: all.accuracy().expect("non-empty"),
            f1,
            spd: diff(groups[1].positive_rate(), groups[0].positive_rate()),
            eod: diff(
                groups[1].true_positive_rate(),
                groups[0].true_positive_rate(),
            ),
            mad: diff(groups[1].accuracy(), groups[0].accuracy()),
            groups,
        })
    }
}

/// Evaluates arbitrary predictions `(record, ŷ)` grouped by the binary
/// sensitive attribute of `schema`.
pub fn evaluate_predictions<'a>(
    schema: &FeatureSchema,
    predictions: impl IntoIterator<Item = (&'a Record, usize)>,
) -> Result<EvalReport> {
    let s = schema.sensitive_index();
    if schema.features()[s].cardinality() != 2 {
        return Err(Error::invalid(format!(
            "fairness metrics need a binary sensitive attribute; `{}` has {} values",
            schema.features()[s].name,
            schema.features()[s].cardinality()
        )));
    }
    let mut groups = [GroupConfusion::default(); 2];
    for (r, yhat) in predictions {
        let g = &mut groups[r.features[s]];
        match (r.target == 1, yhat == 1) {
            (true, true) => g.tp += 1,
            (false, true) => g.fp += 1,
            (false, false) => g.tn += 1,
            (true, false) => g.fn_ += 1,
        }
    }
    EvalReport::from_confusion(groups)
}

/// Evaluates `model` on `holdout` at threshold 0.5.
pub fn evaluate(
    encoder: &Encoder,
    model: &ModelState,
    holdout: &ClientDataset,
) -> Result<EvalReport> {
    if holdout.is_empty() {
        return Err(Error::invalid("holdout set is empty"));
    }
    evaluate_predictions(
        holdout.schema(),
        holdout
            .rows()
            .iter()
            .map(|r| (r, encoder.predict(model, r))),
    )
}

/// Average ranks, 1-based; ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation. `None` when either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::invalid(format!(
            "spearman needs two series of equal length ≥ 3, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::invalid("spearman input contains NaN"));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}
