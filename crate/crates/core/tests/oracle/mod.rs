//! Reference implementations used as test oracles. They work from raw rows
//! and share no code with the library's table and aggregation paths.

#![allow(dead_code)]

use std::collections::HashMap;

use profed_core::tabular::Record;

/// Column `c` of a record; `None` is the target.
fn col(r: &Record, c: Option<usize>) -> usize {
    match c {
        Some(i) => r.features[i],
        None => r.target,
    }
}

/// Plug-in MI in bits between two columns of pooled rows.
pub fn pooled_mi(rows: &[&Record], a: Option<usize>, b: Option<usize>) -> f64 {
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ma: HashMap<usize, f64> = HashMap::new();
    let mut mb: HashMap<usize, f64> = HashMap::new();
    for r in rows {
        let (x, y) = (col(r, a), col(r, b));
        *joint.entry((x, y)).or_default() += 1.0;
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
    }
    let n = rows.len() as f64;
    let mut keys: Vec<_> = joint.keys().copied().collect();
    keys.sort_unstable();
    keys.iter()
        .map(|&(x, y)| {
            let pxy = joint[&(x, y)] / n;
            pxy * (pxy / ((ma[&x] / n) * (mb[&y] / n))).ln()
        })
        .sum::<f64>()
        / std::f64::consts::LN_2
}

/// Weighted PFL of pooled rows with sensitive feature `s` among `k`
/// features.
pub fn pooled_pfl(rows: &[&Record], k: usize, s: usize, w: [f64; 4]) -> f64 {
    let others: Vec<usize> = (0..k).filter(|&i| i != s).collect();
    let direct = pooled_mi(rows, Some(s), None);
    let indirect: f64 = others
        .iter()
        .map(|&i| pooled_mi(rows, Some(s), Some(i)))
        .sum();
    let signal: f64 = others.iter().map(|&i| pooled_mi(rows, Some(i), None)).sum();
    let mut redundancy = 0.0;
    for (x, &i) in others.iter().enumerate() {
        for &j in &others[x + 1..] {
            redundancy += pooled_mi(rows, Some(i), Some(j));
        }
    }
    w[0] * direct + w[1] * indirect + w[2] * redundancy - w[3] * signal
}
