//! Pool-adjacent-violators projection onto nondecreasing sequences.

/// Weighted least-squares projection of `y` onto `{z : z_1 <= ... <= z_n}`.
/// Unit weights when `weights` is `None`.
pub fn isotonic(y: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    // blocks of (weighted mean, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let wt = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / wt, wt, n1 + n2));
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (m, _, n) in blocks {
        out.extend(std::iter::repeat_n(m, n));
    }
    out
}
