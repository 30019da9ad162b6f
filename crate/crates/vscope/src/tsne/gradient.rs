//! Kullback-Leibler gradient of the t-SNE objective, exact and Barnes-Hut.
//!
//! Both paths compute the true gradient of KL(P ‖ Q) under the Student-t
//! kernel `w = 1/(1 + ‖yᵢ−yⱼ‖²)`:
//!
//! ```text
//! ∂C/∂yᵢ = 4·( Σⱼ pᵢⱼ·wᵢⱼ·(yᵢ−yⱼ)  −  (1/Z)·Σⱼ wᵢⱼ²·(yᵢ−yⱼ) )
//! ```
//!
//! with `Z = Σ_{k≠l} w_kl`. The Barnes-Hut variant approximates only the
//! repulsive sum; the attractive sum runs over the sparse affinities exactly.

use ndarray::{Array2, ArrayView2};

use super::affinity::SparseAffinities;
use super::quadtree::QuadTree;

/// Scratch space reused across optimizer iterations so the hot loop does not
/// allocate.
pub(crate) struct BhWorkspace {
    tree: QuadTree,
    stack: Vec<u32>,
    neg: Vec<f64>,
}

impl BhWorkspace {
    pub(crate) fn new(n: usize) -> Self {
        BhWorkspace {
            tree: QuadTree::new(),
            stack: Vec::new(),
            neg: vec![0.0; 2 * n],
        }
    }
}

/// KL floor shared by the divergence and its tests; keeps logs finite when a
/// low-dimensional pair has collapsed onto the same spot.
const EPS: f64 = 1e-12;

fn flatten(y: &ArrayView2<f64>) -> Vec<f64> {
    assert_eq!(y.ncols(), 2, "embedding must be N×2");
    let mut flat = Vec::with_capacity(2 * y.nrows());
    for row in y.rows() {
        flat.push(row[0]);
        flat.push(row[1]);
    }
    flat
}

fn unflatten(flat: Vec<f64>, n: usize) -> Array2<f64> {
    Array2::from_shape_vec((n, 2), flat).expect("flat gradient has n×2 entries")
}

pub(crate) fn bh_gradient_into(
    p: &SparseAffinities,
    y: &[f64],
    theta: f64,
    exaggeration: f64,
    ws: &mut BhWorkspace,
    grad: &mut [f64],
) {
    let n = p.n();
    ws.tree.build(y);
    let mut z_total = 0.0;
    for i in 0..n {
        let (fx, fy, z) =
            ws.tree
                .repulsion(i as u32, y[2 * i], y[2 * i + 1], theta, &mut ws.stack, y);
        ws.neg[2 * i] = fx;
        ws.neg[2 * i + 1] = fy;
        z_total += z;
    }
    attract_and_combine(p, y, exaggeration, &ws.neg, z_total, grad);
}

pub(crate) fn exact_gradient_into(
    p: &SparseAffinities,
    y: &[f64],
    exaggeration: f64,
    grad: &mut [f64],
) {
    let n = p.n();
    let mut neg = vec![0.0; 2 * n];
    let mut z_total = 0.0;
    for i in 0..n {
        let (px, py) = (y[2 * i], y[2 * i + 1]);
        for j in i + 1..n {
            let dx = px - y[2 * j];
            let dy = py - y[2 * j + 1];
            let w = 1.0 / (1.0 + dx * dx + dy * dy);
            z_total += 2.0 * w;
            let w2 = w * w;
            neg[2 * i] += w2 * dx;
            neg[2 * i + 1] += w2 * dy;
            neg[2 * j] -= w2 * dx;
            neg[2 * j + 1] -= w2 * dy;
        }
    }
    attract_and_combine(p, y, exaggeration, &neg, z_total, grad);
}

fn attract_and_combine(
    p: &SparseAffinities,
    y: &[f64],
    exaggeration: f64,
    neg: &[f64],
    z_total: f64,
    grad: &mut [f64],
) {
    let n = p.n();
    for i in 0..n {
        let (cols, vals) = p.row(i);
        let (px, py) = (y[2 * i], y[2 * i + 1]);
        let mut ax = 0.0;
        let mut ay = 0.0;
        for (&jc, &pv) in cols.iter().zip(vals) {
            let j = jc as usize;
            let dx = px - y[2 * j];
            let dy = py - y[2 * j + 1];
            let w = 1.0 / (1.0 + dx * dx + dy * dy);
            let m = exaggeration * pv * w;
            ax += m * dx;
            ay += m * dy;
        }
        grad[2 * i] = 4.0 * (ax - neg[2 * i] / z_total);
        grad[2 * i + 1] = 4.0 * (ay - neg[2 * i + 1] / z_total);
    }
}

/// Barnes-Hut approximation of the KL gradient at `y`. `theta` in `[0, 1]`
/// trades accuracy for speed; `theta = 0` is the exact gradient.
pub fn bh_gradient(p: &SparseAffinities, y: &ArrayView2<f64>, theta: f64) -> Array2<f64> {
    assert!((0.0..=1.0).contains(&theta), "theta must lie in [0, 1]");
    let n = p.n();
    assert_eq!(y.nrows(), n, "embedding rows must match affinity size");
    let flat = flatten(y);
    let mut ws = BhWorkspace::new(n);
    let mut grad = vec![0.0; 2 * n];
    bh_gradient_into(p, &flat, theta, 1.0, &mut ws, &mut grad);
    unflatten(grad, n)
}

/// Exact O(N²) KL gradient, the oracle the Barnes-Hut path is tested against.
pub fn exact_gradient(p: &SparseAffinities, y: &ArrayView2<f64>) -> Array2<f64> {
    let n = p.n();
    assert_eq!(y.nrows(), n, "embedding rows must match affinity size");
    let flat = flatten(y);
    let mut grad = vec![0.0; 2 * n];
    exact_gradient_into(p, &flat, 1.0, &mut grad);
    unflatten(grad, n)
}

pub(crate) fn kl_divergence_flat(p: &SparseAffinities, y: &[f64]) -> f64 {
    let n = p.n();
    let mut z = 0.0;
    for i in 0..n {
        let (px, py) = (y[2 * i], y[2 * i + 1]);
        for j in i + 1..n {
            let dx = px - y[2 * j];
            let dy = py - y[2 * j + 1];
            z += 2.0 / (1.0 + dx * dx + dy * dy);
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (cols, vals) = p.row(i);
        let (px, py) = (y[2 * i], y[2 * i + 1]);
        for (&jc, &pv) in cols.iter().zip(vals) {
            if pv <= 0.0 {
                continue;
            }
            let j = jc as usize;
            let dx = px - y[2 * j];
            let dy = py - y[2 * j + 1];
            let w = 1.0 / (1.0 + dx * dx + dy * dy);
            let q = (w / z).max(EPS);
            kl += pv * (pv.max(EPS) / q).ln();
        }
    }
    kl
}

/// KL(P ‖ Q) with the exact partition function; always evaluated against the
/// unexaggerated affinities.
pub fn kl_divergence(p: &SparseAffinities, y: &ArrayView2<f64>) -> f64 {
    assert_eq!(y.nrows(), p.n(), "embedding rows must match affinity size");
    kl_divergence_flat(p, &flatten(y))
}
