//! Barnes-Hut t-SNE over pooled embedding vectors.
//!
//! The pipeline: conditional Gaussian affinities with a per-row bandwidth
//! search ([`affinity`]), symmetrization to a sparse joint distribution,
//! gradient descent on KL(P ‖ Q) under a Student-t kernel with quadtree
//! approximation of the repulsive term ([`gradient`], [`quadtree`]), and
//! trustworthiness scoring of the final layout ([`quality`]).
//!
//! [`run_tsne`] drives the whole thing: restarts, early exaggeration,
//! adaptive gains, momentum, divergence tracing, and selection of the best
//! restart by final KL among those clearing the trustworthiness floor.

pub mod affinity;
pub mod gradient;
pub mod quadtree;
pub mod quality;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use affinity::{
    conditional_affinities, cosine_distance, symmetrize, ConditionalAffinities, SparseAffinities,
};
pub use gradient::{bh_gradient, exact_gradient, kl_divergence};
pub use quality::trustworthiness;

use gradient::{bh_gradient_into, exact_gradient_into, kl_divergence_flat, BhWorkspace};

#[derive(Debug, Error, PartialEq)]
pub enum TsneError {
    #[error("vector {index} has zero norm; cosine distance is undefined for it")]
    ZeroVector { index: usize },
    #[error("perplexity {perplexity} is too large for {n} points (need N > 3·perplexity)")]
    PerplexityTooLarge { n: usize, perplexity: f64 },
    #[error("trustworthiness k={k} is out of range for {n} points (need 1 ≤ k < N/2)")]
    KTooLarge { k: usize, n: usize },
    #[error("restart {restart} diverged to a non-finite iterate at iteration {iteration}")]
    NonFiniteIterate { restart: usize, iteration: usize },
    #[error("every restart diverged; lower the learning rate or exaggeration")]
    AllRestartsFailed,
    #[error("invalid t-SNE configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Pca,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub early_exaggeration: f64,
    /// Iterations (from the start) during which the attractive term is
    /// multiplied by `early_exaggeration`.
    pub exaggeration_iters: usize,
    pub n_iter: usize,
    pub learning_rate: f64,
    /// Barnes-Hut accuracy knob in `[0, 1]`; 0 switches to the exact gradient.
    pub theta: f64,
    pub metric: Metric,
    pub init: InitScheme,
    pub momentum_early: f64,
    pub momentum_late: f64,
    /// Iteration at which momentum switches from early to late.
    pub momentum_switch_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Restarts scoring below this trustworthiness are passed over during
    /// selection (with a fallback to the overall best if none qualify).
    pub min_trust: f64,
    /// Sample the exact KL divergence every this many iterations, in addition
    /// to the end of the exaggeration phase and the final iteration.
    pub kl_every: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            early_exaggeration: 15.0,
            exaggeration_iters: 250,
            n_iter: 5000,
            learning_rate: 750.0,
            theta: 0.5,
            metric: Metric::Cosine,
            init: InitScheme::Pca,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch_iter: 250,
            restarts: 3,
            seed: 0,
            min_trust: 0.0,
            kl_every: 100,
        }
    }
}

/// One exact-KL measurement taken during optimization. Iterations are
/// 1-based: the sample at `iteration == n_iter` is the final divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlSample {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// Final N×2 layout of the selected restart.
    pub coords: Array2<f64>,
    pub final_kl: f64,
    /// Trustworthiness of the selected layout at `trust_k` neighbors.
    pub trustworthiness_k12: f64,
    /// Neighborhood size actually used: 12 unless N is too small for it.
    pub trust_k: usize,
    /// Which restart won selection.
    pub restart_index: usize,
    pub kl_trace: Vec<KlSample>,
    /// How many restarts were actually optimized. Deterministic PCA
    /// initialization collapses all restarts into one.
    pub restarts_run: usize,
    pub warnings: Vec<String>,
}

pub struct PcaInit {
    pub y0: Array2<f64>,
    /// True when any output column came from the seeded Gaussian fallback
    /// rather than a principal component.
    pub used_fallback: bool,
}

/// Column standard deviation of every initial layout, PCA-projected or
/// Gaussian.
const INIT_STD: f64 = 1e-4;

fn flatten(y: &ArrayView2<f64>) -> Vec<f64> {
    let mut flat = Vec::with_capacity(2 * y.nrows());
    for row in y.rows() {
        flat.push(row[0]);
        flat.push(row[1]);
    }
    flat
}

fn unflatten(flat: Vec<f64>, n: usize) -> Array2<f64> {
    Array2::from_shape_vec((n, 2), flat).expect("flat layout has n×2 entries")
}

fn gaussian_flat(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            INIT_STD * z
        })
        .collect()
}

/// Projects the data onto its top two principal components and rescales each
/// column to standard deviation 1e-4. Degenerate components (zero variance,
/// failed eigendecomposition, fewer than two input dimensions) fall back to a
/// seeded Gaussian column, flagged through [`PcaInit::used_fallback`].
pub fn pca_init(x: &ArrayView2<f64>, seed: u64) -> Result<PcaInit, TsneError> {
    let n = x.nrows();
    let d = x.ncols();
    if n < 2 || d == 0 {
        return Err(TsneError::InvalidConfig(format!(
            "PCA initialization needs at least 2 points with at least 1 dimension, got {n}×{d}"
        )));
    }

    let mut xc = x.to_owned();
    for mut col in xc.columns_mut() {
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|v| v - mean);
    }
    let cov = xc.t().dot(&xc) / (n as f64 - 1.0);
    let cov_na = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = nalgebra::SymmetricEigen::try_new(cov_na, 1e-13, 0)
        .filter(|e| e.eigenvalues.iter().all(|v| v.is_finite()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::zeros((n, 2));
    let mut used_fallback = false;
    let fill_gaussian = |col: usize, y: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
        for i in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            y[[i, col]] = INIT_STD * z;
        }
    };

    let order: Vec<usize> = eig.as_ref().map_or_else(Vec::new, |e| {
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]).then(a.cmp(&b)));
        idx
    });

    for c in 0..2 {
        let projected = eig.as_ref().is_some_and(|e| {
            if c >= d {
                return false;
            }
            let lambda = e.eigenvalues[order[c]];
            if lambda <= 0.0 {
                return false;
            }
            let v = e.eigenvectors.column(order[c]);
            // Sign convention: the loading with the largest magnitude (first
            // on ties) is made positive, so the layout does not depend on the
            // eigensolver's arbitrary orientation.
            let mut best = 0;
            for (i, val) in v.iter().enumerate() {
                if val.abs() > v[best].abs() {
                    best = i;
                }
            }
            let sign = if v[best] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                let mut acc = 0.0;
                for dd in 0..d {
                    acc += xc[[i, dd]] * v[dd];
                }
                y[[i, c]] = sign * acc;
            }
            true
        });
        if !projected {
            fill_gaussian(c, &mut y, &mut rng);
            used_fallback = true;
            continue;
        }
        // Rescale the projection to the init scale (population std; the
        // column is mean-zero by construction).
        let col = y.column(c);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std > 0.0 && std.is_finite() {
            let scale = INIT_STD / std;
            y.column_mut(c).mapv_inplace(|v| v * scale);
        } else {
            fill_gaussian(c, &mut y, &mut rng);
            used_fallback = true;
        }
    }

    Ok(PcaInit { y0: y, used_fallback })
}

fn validate_config(cfg: &TsneConfig, n: usize) -> Result<(), TsneError> {
    if !cfg.perplexity.is_finite() || cfg.perplexity < 2.0 {
        return Err(TsneError::InvalidConfig(format!(
            "perplexity must be a finite value ≥ 2, got {}",
            cfg.perplexity
        )));
    }
    if n as f64 <= 3.0 * cfg.perplexity {
        return Err(TsneError::PerplexityTooLarge {
            n,
            perplexity: cfg.perplexity,
        });
    }
    if !(0.0..=1.0).contains(&cfg.theta) {
        return Err(TsneError::InvalidConfig(format!(
            "theta must lie in [0, 1], got {}",
            cfg.theta
        )));
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate <= 0.0 {
        return Err(TsneError::InvalidConfig(format!(
            "learning rate must be a finite positive value, got {}",
            cfg.learning_rate
        )));
    }
    if !cfg.early_exaggeration.is_finite() || cfg.early_exaggeration < 1.0 {
        return Err(TsneError::InvalidConfig(format!(
            "early exaggeration must be a finite value ≥ 1, got {}",
            cfg.early_exaggeration
        )));
    }
    if cfg.n_iter == 0 {
        return Err(TsneError::InvalidConfig("n_iter must be at least 1".into()));
    }
    if cfg.exaggeration_iters > cfg.n_iter {
        return Err(TsneError::InvalidConfig(format!(
            "exaggeration_iters ({}) cannot exceed n_iter ({})",
            cfg.exaggeration_iters, cfg.n_iter
        )));
    }
    for (name, m) in [
        ("momentum_early", cfg.momentum_early),
        ("momentum_late", cfg.momentum_late),
    ] {
        if !(0.0..1.0).contains(&m) {
            return Err(TsneError::InvalidConfig(format!(
                "{name} must lie in [0, 1), got {m}"
            )));
        }
    }
    if cfg.restarts == 0 {
        return Err(TsneError::InvalidConfig("restarts must be at least 1".into()));
    }
    if cfg.kl_every == 0 {
        return Err(TsneError::InvalidConfig("kl_every must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.min_trust) {
        return Err(TsneError::InvalidConfig(format!(
            "min_trust must lie in [0, 1], got {}",
            cfg.min_trust
        )));
    }
    Ok(())
}

/// Gradient descent with momentum, adaptive per-coordinate gains, and early
/// exaggeration. Returns the final flat layout and the KL trace, or the
/// 1-based iteration at which the iterate went non-finite.
fn optimize(
    p: &SparseAffinities,
    mut y: Vec<f64>,
    cfg: &TsneConfig,
    ws: &mut BhWorkspace,
) -> Result<(Vec<f64>, Vec<KlSample>), usize> {
    let n = p.n();
    let dims = 2 * n;
    let mut uy = vec![0.0f64; dims];
    let mut gains = vec![1.0f64; dims];
    let mut grad = vec![0.0f64; dims];
    let mut trace = Vec::new();

    for it in 0..cfg.n_iter {
        let it1 = it + 1;
        let exagg = if it < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        if cfg.theta == 0.0 {
            exact_gradient_into(p, &y, exagg, &mut grad);
        } else {
            bh_gradient_into(p, &y, cfg.theta, exagg, ws, &mut grad);
        }
        let momentum = if it < cfg.momentum_switch_iter {
            cfg.momentum_early
        } else {
            cfg.momentum_late
        };
        for j in 0..dims {
            let g = grad[j];
            gains[j] = if (g > 0.0) == (uy[j] > 0.0) {
                (gains[j] * 0.8).max(0.01)
            } else {
                gains[j] + 0.2
            };
            uy[j] = momentum * uy[j] - cfg.learning_rate * gains[j] * g;
            y[j] += uy[j];
        }
        let mut mx = 0.0;
        let mut my = 0.0;
        for i in 0..n {
            mx += y[2 * i];
            my += y[2 * i + 1];
        }
        mx /= n as f64;
        my /= n as f64;
        let mut finite = true;
        for i in 0..n {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
            finite &= y[2 * i].is_finite() && y[2 * i + 1].is_finite();
        }
        if !finite {
            return Err(it1);
        }
        // The divergence is always measured against the pristine affinities,
        // never the exaggerated ones.
        if it1 % cfg.kl_every == 0 || it1 == cfg.exaggeration_iters || it1 == cfg.n_iter {
            trace.push(KlSample {
                iteration: it1,
                kl: kl_divergence_flat(p, &y),
            });
        }
    }
    Ok((y, trace))
}

struct RestartOutcome {
    restart: usize,
    flat: Vec<f64>,
    final_kl: f64,
    trace: Vec<KlSample>,
}

/// Embeds `x` (N×D) into two dimensions. Runs `cfg.restarts` optimizations
/// seeded `seed, seed+1, …` and keeps the one with the lowest final KL among
/// those whose trustworthiness clears `cfg.min_trust`; restarts that diverge
/// are dropped with a warning. With PCA initialization and no fallback the
/// restarts would all be identical, so only the first is run.
pub fn run_tsne(x: &ArrayView2<f64>, cfg: &TsneConfig) -> Result<TsneResult, TsneError> {
    let n = x.nrows();
    validate_config(cfg, n)?;

    let cond = conditional_affinities(x, cfg.perplexity, cfg.metric)?;
    let p = symmetrize(&cond.rows);
    let mut warnings = Vec::new();
    if !cond.failed_rows.is_empty() {
        warnings.push(format!(
            "bandwidth search did not converge for {} of {n} rows; kept the last bisection iterate",
            cond.failed_rows.len()
        ));
    }

    let trust_k = 12.min((n - 1) / 2).max(1);
    let mut ws = BhWorkspace::new(n);
    let mut outcomes: Vec<RestartOutcome> = Vec::new();
    let mut restarts_run = 0;
    for r in 0..cfg.restarts {
        let seed = cfg.seed.wrapping_add(r as u64);
        let (y0, fallback) = match cfg.init {
            InitScheme::Random => (gaussian_flat(n, seed), false),
            InitScheme::Pca => {
                let init = pca_init(x, seed)?;
                (flatten(&init.y0.view()), init.used_fallback)
            }
        };
        restarts_run += 1;
        match optimize(&p, y0, cfg, &mut ws) {
            Ok((flat, trace)) => {
                let final_kl = trace.last().expect("final iteration is always traced").kl;
                outcomes.push(RestartOutcome {
                    restart: r,
                    flat,
                    final_kl,
                    trace,
                });
            }
            Err(iteration) => {
                warnings.push(format!(
                    "restart {r} diverged to a non-finite iterate at iteration {iteration} and was dropped"
                ));
            }
        }
        // A fully deterministic initialization makes every remaining restart
        // an exact replay of this one.
        if cfg.init == InitScheme::Pca && !fallback {
            break;
        }
    }
    if outcomes.is_empty() {
        return Err(TsneError::AllRestartsFailed);
    }

    struct Scored {
        restart: usize,
        final_kl: f64,
        trace: Vec<KlSample>,
        coords: Array2<f64>,
        trust: f64,
    }
    let mut scored = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let coords = unflatten(o.flat, n);
        let trust = trustworthiness(x, &coords.view(), trust_k, cfg.metric)?;
        scored.push(Scored {
            restart: o.restart,
            final_kl: o.final_kl,
            trace: o.trace,
            coords,
            trust,
        });
    }
    let qualified: Vec<usize> = (0..scored.len())
        .filter(|&i| scored[i].trust >= cfg.min_trust)
        .collect();
    let pool = if qualified.is_empty() {
        warnings.push(format!(
            "no restart reached the trustworthiness floor {}; selected by divergence alone",
            cfg.min_trust
        ));
        (0..scored.len()).collect()
    } else {
        qualified
    };
    let best = pool
        .into_iter()
        .min_by(|&a, &b| scored[a].final_kl.total_cmp(&scored[b].final_kl))
        .expect("selection pool is never empty");
    let chosen = scored.swap_remove(best);

    Ok(TsneResult {
        coords: chosen.coords,
        final_kl: chosen.final_kl,
        trustworthiness_k12: chosen.trust,
        trust_k,
        restart_index: chosen.restart,
        kl_trace: chosen.trace,
        restarts_run,
        warnings,
    })
}
