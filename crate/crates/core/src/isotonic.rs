//! Weighted isotonic (nondecreasing) least squares by pool-adjacent-violators.

/// Minimises `Σ wᵢ (zᵢ − yᵢ)²` over nondecreasing `z`. Weights must be
/// positive.
pub fn isotonic_nondecreasing(y: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), w.len(), "values and weights differ in length");
    // Blocks as (weighted mean, total weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        debug_assert!(wt > 0.0);
        let mut cur = (v, wt, 1usize);
        while let Some(&(m, tw, len)) = blocks.last() {
            if m <= cur.0 {
                break;
            }
            blocks.pop();
            let total = tw + cur.1;
            cur = ((m * tw + cur.0 * cur.1) / total, total, len + cur.2);
        }
        blocks.push(cur);
    }
    let mut out = Vec::with_capacity(y.len());
    for (m, _, len) in blocks {
        out.extend(std::iter::repeat_n(m, len));
    }
    out
}
