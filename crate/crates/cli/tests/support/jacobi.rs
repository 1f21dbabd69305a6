//! Cyclic Jacobi eigen-decomposition of a small symmetric matrix, and the
//! brute-force best rank-r column subspace built on it.

/// Eigenvalues and column eigenvectors (`vecs[i][k]` is entry `i` of vector
/// `k`) of the symmetric `n × n` matrix `a`.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let total: f64 = a.iter().flatten().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= 1e-30 * total.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// `‖G − P·Pᵀ·G‖_F` for `G` (`m × n`, row-major) and orthonormal columns
/// `cols` (each of length `m`).
pub fn residual(g: &[f64], m: usize, n: usize, cols: &[Vec<f64>]) -> f64 {
    let mut res = g.to_vec();
    for u in cols {
        for j in 0..n {
            let dot: f64 = (0..m).map(|i| u[i] * g[i * n + j]).sum();
            for i in 0..m {
                res[i * n + j] -= u[i] * dot;
            }
        }
    }
    res.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Every `r`-element subset of `0..n`.
pub fn subsets(n: usize, r: usize) -> Vec<Vec<usize>> {
    if r == 0 {
        return vec![Vec::new()];
    }
    if n < r {
        return Vec::new();
    }
    let mut out = subsets(n - 1, r);
    for mut s in subsets(n - 1, r - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

/// Smallest residual over all rank-`r` spans of eigenvectors of `G·Gᵀ`, and
/// the Eckart–Young value `sqrt(Σ_{i>r} σᵢ²)`.
pub fn best_rank_residual(g: &[f64], m: usize, n: usize, r: usize) -> (f64, f64) {
    let ggt: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|k| (0..n).map(|j| g[i * n + j] * g[k * n + j]).sum()).collect())
        .collect();
    let (vals, vecs) = symmetric_eigen(&ggt);
    let column = |k: usize| -> Vec<f64> { (0..m).map(|i| vecs[i][k]).collect() };
    let brute = subsets(m, r)
        .into_iter()
        .map(|s| residual(g, m, n, &s.iter().map(|&k| column(k)).collect::<Vec<_>>()))
        .fold(f64::INFINITY, f64::min);
    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tail: f64 = sorted[r..].iter().map(|v| v.max(0.0)).sum();
    (brute, tail.sqrt())
}
