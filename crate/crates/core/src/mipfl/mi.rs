use crate::error::{Error, Result};
use crate::tabular::ContingencyTable;

/// Plug-in mutual information of a joint-count grid, in bits.
///
/// Probabilities are the cells and marginals divided by the grand total.
/// Cells whose joint or marginal probability is not positive contribute
/// nothing, which covers both `0 log 0` and negative noisy counts. Returns
/// `None` when the grand total is not positive.
pub(crate) fn mi_bits(cells: &[f64], rows: usize, cols: usize) -> Option<f64> {
    debug_assert_eq!(cells.len(), rows * cols);
    let n: f64 = cells.iter().sum();
    if !(n > 0.0) {
        return None;
    }
    let mut row_sums = vec![0.0; rows];
    let mut col_sums = vec![0.0; cols];
    for (r, row) in cells.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            row_sums[r] += v;
            col_sums[c] += v;
        }
    }
    let mut acc = 0.0;
    for (r, row) in cells.chunks_exact(cols).enumerate() {
        let rs = row_sums[r];
        if rs <= 0.0 {
            continue;
        }
        for (c, &v) in row.iter().enumerate() {
            let cs = col_sums[c];
            if v <= 0.0 || cs <= 0.0 {
                continue;
            }
            acc += (v / n) * (v * n / (rs * cs)).log2();
        }
    }
    Some(acc)
}

/// Mutual information of a contingency table in bits.
pub fn mi_from_counts(table: &ContingencyTable) -> Result<f64> {
    let (rows, cols) = table.shape();
    mi_bits(table.cells(), rows, cols).ok_or_else(|| Error::DegenerateAggregate {
        pair: table.pair().to_string(),
    })
}

/// Shannon entropy of the row (`axis = 0`) or column marginal, in bits.
pub fn marginal_entropy(table: &ContingencyTable, axis: usize) -> f64 {
    let m = if axis == 0 {
        table.row_marginals()
    } else {
        table.col_marginals()
    };
    let n: f64 = m.iter().filter(|&&v| v > 0.0).sum();
    m.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -(v / n) * (v / n).log2())
        .sum()
}
