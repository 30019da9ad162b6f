//! Trustworthiness: how faithfully a low-dimensional layout preserves the
//! high-dimensional neighborhoods.
//!
//! For each point, every low-dimensional k-nearest neighbor that is not also a
//! high-dimensional k-nearest neighbor is penalized by how far down the
//! high-dimensional ranking it actually sits:
//!
//! ```text
//! T(k) = 1 − 2/(N·k·(2N − 3k − 1)) · Σᵢ Σ_{j ∈ Uᵢ(k)} (r(i, j) − k)
//! ```
//!
//! Ranks break distance ties by point index, so the score is deterministic.

use ndarray::ArrayView2;

use super::{Metric, TsneError};

/// Rows processed per matrix block when computing high-dimensional
/// dissimilarities; keeps peak memory at `BLOCK × N` doubles.
const BLOCK: usize = 256;

/// Trustworthiness of the embedding `y` relative to the original data `x`,
/// using the same metric the affinities were built with. Requires
/// `1 ≤ k < N/2`.
pub fn trustworthiness(
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    k: usize,
    metric: Metric,
) -> Result<f64, TsneError> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(TsneError::InvalidConfig(format!(
            "embedding has {} rows but the data has {n}",
            y.nrows()
        )));
    }
    if y.ncols() != 2 {
        return Err(TsneError::InvalidConfig(format!(
            "embedding must be N×2, got {} columns",
            y.ncols()
        )));
    }
    if k < 1 || 2 * k >= n {
        return Err(TsneError::KTooLarge { k, n });
    }

    // Precompute the per-row quantities the blocked Gram products need.
    let mut sq = vec![0.0; n];
    for (i, row) in x.rows().into_iter().enumerate() {
        sq[i] = row.iter().map(|v| v * v).sum();
    }
    let xn = match metric {
        Metric::Euclidean => x.to_owned(),
        Metric::Cosine => {
            let mut xn = x.to_owned();
            for (i, mut row) in xn.rows_mut().into_iter().enumerate() {
                let norm = sq[i].sqrt();
                if norm <= 0.0 || !norm.is_finite() {
                    return Err(TsneError::ZeroVector { index: i });
                }
                row.mapv_inplace(|v| v / norm);
            }
            xn
        }
    };

    let flat_y: Vec<f64> = y.rows().into_iter().flat_map(|r| [r[0], r[1]]).collect();
    let mut dy: Vec<(f64, u32)> = Vec::with_capacity(n);
    let mut penalty = 0.0f64;

    let xnt = xn.t();
    let mut start = 0;
    while start < n {
        let stop = (start + BLOCK).min(n);
        // Gram block against the whole data set in one matrix product.
        let gram = xn.slice(ndarray::s![start..stop, ..]).dot(&xnt);
        for i in start..stop {
            let g = gram.row(i - start);
            // High-dimensional dissimilarities for row i. Squared Euclidean
            // and cosine distance are both monotone in the true distance, so
            // ranks are unaffected.
            let dx_at = |l: usize| -> f64 {
                match metric {
                    Metric::Euclidean => sq[i] + sq[l] - 2.0 * g[l],
                    Metric::Cosine => 1.0 - g[l],
                }
            };

            // k nearest in the embedding, ties broken by index.
            dy.clear();
            let (px, py) = (flat_y[2 * i], flat_y[2 * i + 1]);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dxj = px - flat_y[2 * j];
                let dyj = py - flat_y[2 * j + 1];
                dy.push((dxj * dxj + dyj * dyj, j as u32));
            }
            dy.select_nth_unstable_by(k - 1, |a, b| {
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
            });

            for &(_, jc) in &dy[..k] {
                let j = jc as usize;
                let dj = dx_at(j);
                // 1-based high-dimensional rank of j among all l ≠ i.
                let mut rank = 1usize;
                for l in 0..n {
                    if l == i || l == j {
                        continue;
                    }
                    let dl = dx_at(l);
                    if dl < dj || (dl == dj && l < j) {
                        rank += 1;
                    }
                }
                if rank > k {
                    penalty += (rank - k) as f64;
                }
            }
        }
        start = stop;
    }

    let norm = 2.0 / (n as f64 * k as f64 * (2.0 * n as f64 - 3.0 * k as f64 - 1.0));
    Ok((1.0 - norm * penalty).clamp(0.0, 1.0))
}
