//! Scalar-loop depth metrics, written without the library's helpers.

/// `[abs_rel, sq_rel, rmse, rmse_log, delta]`.
pub fn reference(pred: &[f64], gt: &[f64], min: f64, max: f64, threshold: f64, median: bool) -> [f64; 5] {
    let mut p_valid = Vec::new();
    let mut g_valid = Vec::new();
    for i in 0..gt.len() {
        if gt[i] >= min && gt[i] <= max {
            p_valid.push(pred[i]);
            g_valid.push(gt[i]);
        }
    }
    if median {
        let ratio = middle(&g_valid) / middle(&p_valid);
        for p in p_valid.iter_mut() {
            *p *= ratio;
        }
    }
    let n = g_valid.len() as f64;
    let mut sums = [0.0f64; 5];
    for i in 0..g_valid.len() {
        let g = g_valid[i];
        let mut p = p_valid[i];
        if p < min {
            p = min;
        }
        if p > max {
            p = max;
        }
        sums[0] += (p - g).abs() / g;
        sums[1] += (p - g) * (p - g) / g;
        sums[2] += (p - g) * (p - g);
        sums[3] += (p.ln() - g.ln()) * (p.ln() - g.ln());
        let ratio = if p > g { p / g } else { g / p };
        if ratio < threshold {
            sums[4] += 1.0;
        }
    }
    [
        sums[0] / n,
        sums[1] / n,
        (sums[2] / n).sqrt(),
        (sums[3] / n).sqrt(),
        sums[4] / n,
    ]
}

fn middle(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}
