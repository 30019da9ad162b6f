//! Sparse pairwise affinities for t-SNE.
//!
//! Conditional rows are Gaussian kernels over each point's k = ⌊3·perplexity⌋
//! nearest neighbors, with per-row bandwidths found by binary search so the row
//! entropy hits log₂(perplexity) in bits. Rows are then symmetrized into a
//! joint distribution. Everything is CSR with columns sorted ascending, so
//! assembly is deterministic.

use ndarray::ArrayView2;

use super::{Metric, TsneError};

/// Row-compressed sparse matrix of affinities. Columns are sorted within each
/// row and the diagonal is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAffinities {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl SparseAffinities {
    pub(crate) fn from_parts(n: usize, row_ptr: Vec<usize>, col: Vec<u32>, val: Vec<f64>) -> Self {
        debug_assert_eq!(row_ptr.len(), n + 1);
        debug_assert_eq!(col.len(), val.len());
        debug_assert_eq!(*row_ptr.last().unwrap_or(&0), col.len());
        SparseAffinities {
            n,
            row_ptr,
            col,
            val,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col[span.clone()], &self.val[span])
    }

    pub fn total_mass(&self) -> f64 {
        self.val.iter().sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// A copy with every value multiplied by `factor` (early exaggeration).
    pub fn scaled(&self, factor: f64) -> SparseAffinities {
        let mut out = self.clone();
        for v in &mut out.val {
            *v *= factor;
        }
        out
    }

    /// Dense N×N view for small-N oracles and tests.
    pub fn to_dense(&self) -> ndarray::Array2<f64> {
        let mut m = ndarray::Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m[(i, j as usize)] = v;
            }
        }
        m
    }
}

/// `1 − (x·y)/(‖x‖‖y‖)`, in [0, 2]. Zero-norm inputs are degenerate
/// embeddings and abort affinity construction; `index` names the offending
/// argument (0 = x, 1 = y).
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64, TsneError> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || nx.is_nan() {
        return Err(TsneError::ZeroVector { index: 0 });
    }
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ny == 0.0 || ny.is_nan() {
        return Err(TsneError::ZeroVector { index: 1 });
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nx * ny))
}

/// Squared metric distance between rows `i` and `j`; the Gaussian kernel is
/// `exp(−β·d²)` in the chosen metric.
fn metric_d2(x: &ArrayView2<f64>, norms: &[f64], i: usize, j: usize, metric: Metric) -> f64 {
    let (a, b) = (x.row(i), x.row(j));
    match metric {
        Metric::Euclidean => {
            let mut s = 0.0;
            for (p, q) in a.iter().zip(b.iter()) {
                let d = p - q;
                s += d * d;
            }
            s
        }
        Metric::Cosine => {
            let mut dot = 0.0;
            for (p, q) in a.iter().zip(b.iter()) {
                dot += p * q;
            }
            let d = 1.0 - dot / (norms[i] * norms[j]);
            d * d
        }
    }
}

/// Conditional affinities plus the bandwidths the search settled on.
#[derive(Debug, Clone)]
pub struct ConditionalAffinities {
    /// Row-stochastic: row i holds p(j|i) over i's k nearest neighbors.
    pub rows: SparseAffinities,
    /// Per-row precision β = 1/(2σ²).
    pub betas: Vec<f64>,
    /// Rows where the entropy search did not reach tolerance (kept at the
    /// last iterate).
    pub failed_rows: Vec<usize>,
}

/// Entropy (bits) and normalized kernel values for one row at precision `beta`.
/// `d2` must be non-empty; exponents are shifted by the minimum distance so the
/// largest kernel value is exactly 1 (no overflow for any beta).
fn row_entropy_bits(d2: &[f64], beta: f64, p_out: &mut [f64]) -> f64 {
    let m = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (p, &d) in p_out.iter_mut().zip(d2) {
        let e = (-beta * (d - m)).exp();
        *p = e;
        sum += e;
        weighted += e * (d - m);
    }
    for p in p_out.iter_mut() {
        *p /= sum;
    }
    let h_nats = sum.ln() + beta * weighted / sum;
    h_nats / std::f64::consts::LN_2
}

/// Number of neighbors kept per row for a given perplexity.
pub fn neighbors_for(n: usize, perplexity: f64) -> usize {
    ((3.0 * perplexity).floor() as usize).min(n - 1)
}

const ENTROPY_TOL_BITS: f64 = 1e-5;
const MAX_SEARCH_STEPS: usize = 50;

/// Builds conditional affinities over each point's nearest neighbors.
///
/// Requires N ≥ 2 and perplexity ≥ 2; the pipeline-level guard
/// `N > 3·perplexity` is enforced by `run_tsne`, not here, so small synthetic
/// fixtures remain usable.
pub fn conditional_affinities(
    x: &ArrayView2<f64>,
    perplexity: f64,
    metric: Metric,
) -> Result<ConditionalAffinities, TsneError> {
    let n = x.nrows();
    if n < 2 {
        return Err(TsneError::InvalidConfig(format!(
            "need at least 2 points, got {n}"
        )));
    }
    if perplexity.is_nan() || perplexity < 2.0 {
        return Err(TsneError::InvalidConfig(format!(
            "perplexity must be ≥ 2, got {perplexity}"
        )));
    }

    let mut norms = vec![0.0; n];
    if metric == Metric::Cosine {
        for (i, slot) in norms.iter_mut().enumerate() {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || norm.is_nan() {
                return Err(TsneError::ZeroVector { index: i });
            }
            *slot = norm;
        }
    }

    let k = neighbors_for(n, perplexity);
    let target_bits = perplexity.log2();

    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0usize);
    let mut col = Vec::with_capacity(n * k);
    let mut val = Vec::with_capacity(n * k);
    let mut betas = Vec::with_capacity(n);
    let mut failed_rows = Vec::new();

    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    let mut d2 = vec![0.0f64; k];
    let mut p = vec![0.0f64; k];

    for i in 0..n {
        scratch.clear();
        for j in 0..n {
            if j != i {
                scratch.push((metric_d2(x, &norms, i, j, metric), j as u32));
            }
        }
        // The k nearest under the strict total order (distance, index); the
        // selected set is unique, so any selection algorithm yields it.
        let cmp = |a: &(f64, u32), b: &(f64, u32)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by_key(|p| p.1);
        for (slot, &(d, _)) in d2.iter_mut().zip(scratch.iter()) {
            *slot = d;
        }

        // Binary search on beta; entropy in bits decreases monotonically in beta.
        let mut beta = 1.0f64;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        let mut converged = false;
        for _ in 0..MAX_SEARCH_STEPS {
            let h = row_entropy_bits(&d2, beta, &mut p);
            let diff = h - target_bits;
            if diff.abs() < ENTROPY_TOL_BITS {
                converged = true;
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() {
                    (beta + beta_max) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() {
                    (beta + beta_min) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        if !converged {
            failed_rows.push(i);
        }
        betas.push(beta);
        for (&(_, j), &pv) in scratch.iter().zip(p.iter()) {
            col.push(j);
            val.push(pv);
        }
        row_ptr.push(col.len());
    }

    Ok(ConditionalAffinities {
        rows: SparseAffinities::from_parts(n, row_ptr, col, val),
        betas,
        failed_rows,
    })
}

/// Joint affinities: `P_ij = (p_j|i + p_i|j) / 2N`, entries floored at 1e-12.
/// Output is exactly symmetric (`P_ij == P_ji` bitwise).
pub fn symmetrize(cond: &SparseAffinities) -> SparseAffinities {
    let n = cond.n();
    // Transpose in CSR by counting sort; scanning rows in order keeps each
    // transpose row's columns sorted.
    let mut t_ptr = vec![0usize; n + 1];
    for &j in &cond.col {
        t_ptr[j as usize + 1] += 1;
    }
    for i in 0..n {
        t_ptr[i + 1] += t_ptr[i];
    }
    let mut t_col = vec![0u32; cond.nnz()];
    let mut t_val = vec![0.0f64; cond.nnz()];
    let mut cursor = t_ptr.clone();
    for i in 0..n {
        let (cols, vals) = cond.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            let slot = cursor[j as usize];
            t_col[slot] = i as u32;
            t_val[slot] = v;
            cursor[j as usize] += 1;
        }
    }

    let scale = 1.0 / (2.0 * n as f64);
    let floor = 1e-12;
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0usize);
    let mut col = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        let (a_cols, a_vals) = cond.row(i);
        let (t_cols, t_vals) = (
            &t_col[t_ptr[i]..t_ptr[i + 1]],
            &t_val[t_ptr[i]..t_ptr[i + 1]],
        );
        // Merge two column-sorted lists.
        let (mut a, mut b) = (0usize, 0usize);
        while a < a_cols.len() || b < t_cols.len() {
            let (j, v) = if b >= t_cols.len() || (a < a_cols.len() && a_cols[a] < t_cols[b]) {
                let out = (a_cols[a], a_vals[a]);
                a += 1;
                out
            } else if a >= a_cols.len() || t_cols[b] < a_cols[a] {
                let out = (t_cols[b], t_vals[b]);
                b += 1;
                out
            } else {
                let out = (a_cols[a], a_vals[a] + t_vals[b]);
                a += 1;
                b += 1;
                out
            };
            col.push(j);
            val.push((v * scale).max(floor));
        }
        row_ptr.push(col.len());
    }
    SparseAffinities::from_parts(n, row_ptr, col, val)
}
