//! Brute-force k-nearest-neighbour search in predictor space.
//!
//! Candidates are ordered by squared Euclidean distance, then by a tie key,
//! then by index. Tie keys are only computed when two distances are exactly
//! equal.

use std::cmp::Ordering;

/// Indices of the `k` rows of `rows` (row-major, `dim` columns) nearest to
/// `x`, nearest first. `exclude` drops one row from consideration.
pub fn nearest<F>(
    rows: &[f64],
    dim: usize,
    x: &[f64],
    k: usize,
    exclude: Option<usize>,
    tie_key: F,
) -> Vec<usize>
where
    F: Fn(usize) -> u64,
{
    debug_assert_eq!(x.len(), dim);
    let n = rows.len() / dim;
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n);
    for i in 0..n {
        if Some(i) == exclude {
            continue;
        }
        let row = &rows[i * dim..(i + 1) * dim];
        let d: f64 = row.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        cand.push((d, i as u32));
    }
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, u32), b: &(f64, u32)| -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| {
            if a.1 == b.1 {
                Ordering::Equal
            } else {
                tie_key(a.1 as usize)
                    .cmp(&tie_key(b.1 as usize))
                    .then(a.1.cmp(&b.1))
            }
        })
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|(_, i)| i as usize).collect()
}
