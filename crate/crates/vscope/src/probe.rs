//! Viseme probing classifier.
//!
//! A one-hidden-layer feed-forward network (input → hidden ReLU → classes)
//! trained with Adam and early stopping on validation loss. One training job
//! is single-threaded and fully deterministic under its seed, and the returned
//! model always carries the parameters from the best validation epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::VisemeLabel;
use crate::features::{emb1, FeatureDataset};
use crate::ioutil;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("viseme class {class:?} has {count} record(s); a stratified split needs at least 2")]
    ClassTooSmall { class: String, count: usize },
    #[error("loss became non-finite at epoch {0}; lower the learning rate or standardize inputs")]
    NonFiniteLoss(usize),
    #[error("label {0:?} does not appear in the probe's class index")]
    UnknownLabel(String),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature width {found} does not match the configured input_dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("malformed model file: {0}")]
    BadModelFile(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Probe hyper-parameters. `input_dim` and `classes` declare the expected
/// data shape and are validated against the provided dataset and class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub classes: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Standardize each input dimension to zero mean / unit variance
    /// (statistics fit on the training split only). The transform is folded
    /// into the first layer of the returned model, so inference always
    /// consumes raw features.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            input_dim: 768,
            hidden_units: 200,
            classes: 14,
            max_epochs: 200,
            learning_rate: 0.001,
            batch_size: 256,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            standardize: false,
        }
    }
}

fn validate_config(cfg: &ProbeConfig) -> Result<(), ProbeError> {
    let bad = |msg: String| Err(ProbeError::InvalidConfig(msg));
    if cfg.input_dim < 1 {
        return bad("input_dim must be at least 1".to_string());
    }
    if cfg.hidden_units < 1 {
        return bad("hidden_units must be at least 1".to_string());
    }
    if cfg.classes < 1 {
        return bad("classes must be at least 1".to_string());
    }
    if cfg.max_epochs < 1 {
        return bad("max_epochs must be at least 1".to_string());
    }
    if cfg.batch_size < 1 {
        return bad("batch_size must be at least 1".to_string());
    }
    if cfg.patience < 1 {
        return bad("patience must be at least 1".to_string());
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return bad(format!("learning_rate {} must be finite and positive", cfg.learning_rate));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return bad(format!("val_fraction {} must lie strictly between 0 and 1", cfg.val_fraction));
    }
    for (name, beta) in [("adam_beta1", cfg.adam_beta1), ("adam_beta2", cfg.adam_beta2)] {
        if !(0.0..1.0).contains(&beta) {
            return bad(format!("{name} {beta} must lie in [0, 1)"));
        }
    }
    if !(cfg.adam_eps.is_finite() && cfg.adam_eps > 0.0) {
        return bad(format!("adam_eps {} must be finite and positive", cfg.adam_eps));
    }
    Ok(())
}

/// Trained probe. Weights map raw (unstandardized) features to class logits:
/// `logits = max(0, x·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// input_dim × hidden.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// hidden × classes.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Output order: logits column `c` scores `class_index[c]`.
    pub class_index: Vec<VisemeLabel>,
}

/// Per-epoch statistics, 1-based epoch numbering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Training history. `best_epoch` is the first epoch attaining the minimum
/// recorded validation loss; the returned model holds that epoch's weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Intermediate activations captured by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    /// Post-ReLU hidden activations; the ReLU mask is `hidden > 0`.
    pub hidden: Array2<f64>,
}

/// Parameter gradients, same shapes as the model tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Splits a dataset into train/validation parts, stratified by viseme: every
/// class contributes `round(val_fraction · n)` records (at least 1, at most
/// n−1) to the validation side. Record order within each part follows the
/// input dataset, so the split is deterministic under `seed`.
pub fn split_train_val(
    ds: &FeatureDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset), ProbeError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(ProbeError::InvalidConfig(format!(
            "val_fraction {val_fraction} must lie strictly between 0 and 1"
        )));
    }
    if ds.records.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }

    let mut by_class: BTreeMap<&VisemeLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        by_class.entry(&r.viseme).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; ds.records.len()];
    for (class, mut idxs) in by_class {
        if idxs.len() < 2 {
            return Err(ProbeError::ClassTooSmall {
                class: class.as_str().to_string(),
                count: idxs.len(),
            });
        }
        let n_val = ((idxs.len() as f64 * val_fraction).round() as usize).clamp(1, idxs.len() - 1);
        idxs.shuffle(&mut rng);
        for &i in &idxs[..n_val] {
            is_val[i] = true;
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in ds.records.iter().enumerate() {
        if is_val[i] {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((FeatureDataset::new(train, 0), FeatureDataset::new(val, 0)))
}

/// Runs the network on a batch: `logits = max(0, x·w1 + b1)·w2 + b2`.
pub fn forward(m: &ProbeModel, x: &ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
    let mut hidden = x.dot(&m.w1);
    hidden += &m.b1;
    hidden.mapv_inplace(|v| v.max(0.0));
    let mut logits = hidden.dot(&m.w2);
    logits += &m.b2;
    (
        logits,
        ForwardCache {
            input: x.to_owned(),
            hidden,
        },
    )
}

/// Mean softmax cross-entropy over the batch, computed with log-sum-exp
/// stabilization, plus its gradient `(softmax − onehot) / batch`.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, c) = logits.dim();
    assert_eq!(n, labels.len(), "one label per logit row");
    assert!(n > 0, "cross_entropy needs a non-empty batch");
    let mut dlogits = Array2::zeros((n, c));
    let mut total = 0.0;
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        assert!(label < c, "label {label} out of range for {c} classes");
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            let soft = (v - lse).exp();
            let hot = if j == label { 1.0 } else { 0.0 };
            dlogits[(i, j)] = (soft - hot) / n as f64;
        }
    }
    (total / n as f64, dlogits)
}

/// Backpropagates `dlogits` through the cached forward pass.
pub fn backward(m: &ProbeModel, cache: &ForwardCache, dlogits: &ArrayView2<f64>) -> Gradients {
    let w2_grad = cache.hidden.t().dot(dlogits);
    let b2_grad = dlogits.sum_axis(Axis(0));
    let mut dhidden = dlogits.dot(&m.w2.t());
    dhidden.zip_mut_with(&cache.hidden, |d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
    let w1_grad = cache.input.t().dot(&dhidden);
    let b1_grad = dhidden.sum_axis(Axis(0));
    Gradients {
        w1: w1_grad,
        b1: b1_grad,
        w2: w2_grad,
        b2: b2_grad,
    }
}

/// One bias-corrected Adam update (step counter `t` starts at 1).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: usize,
    cfg: &ProbeConfig,
) {
    assert!(t >= 1, "Adam step counter starts at 1");
    assert_eq!(params.len(), grads.len(), "parameter/gradient shape mismatch");
    assert_eq!(params.len(), state.m.len(), "parameter/state shape mismatch");
    let c1 = 1.0 - cfg.adam_beta1.powi(t as i32);
    let c2 = 1.0 - cfg.adam_beta2.powi(t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
        *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Predicted class indices: argmax over logits, ties broken toward the lowest
/// class index.
pub fn predict_indices(m: &ProbeModel, x: &ArrayView2<f64>) -> Vec<usize> {
    let (logits, _) = forward(m, x);
    logits.rows().into_iter().map(|row| argmax(&row)).collect()
}

/// Predicted viseme labels (see [`predict_indices`]).
pub fn predict(m: &ProbeModel, x: &ArrayView2<f64>) -> Vec<VisemeLabel> {
    predict_indices(m, x)
        .into_iter()
        .map(|i| m.class_index[i].clone())
        .collect()
}

fn argmax(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_value = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best_value {
            best = j;
            best_value = v;
        }
    }
    best
}

/// Extracts `(x, y)` matrices from a dataset, mapping visemes to positions in
/// `class_index`.
fn to_matrix(
    ds: &FeatureDataset,
    class_index: &[VisemeLabel],
    input_dim: usize,
) -> Result<(Array2<f64>, Vec<usize>), ProbeError> {
    if ds.records.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let positions: BTreeMap<&VisemeLabel, usize> = class_index
        .iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let n = ds.records.len();
    let mut x = Array2::zeros((n, input_dim));
    let mut y = Vec::with_capacity(n);
    for (i, r) in ds.records.iter().enumerate() {
        if r.vector.len() != input_dim {
            return Err(ProbeError::DimMismatch {
                expected: input_dim,
                found: r.vector.len(),
            });
        }
        let &class = positions
            .get(&r.viseme)
            .ok_or_else(|| ProbeError::UnknownLabel(r.viseme.as_str().to_string()))?;
        y.push(class);
        for (d, &v) in r.vector.iter().enumerate() {
            x[(i, d)] = v;
        }
    }
    Ok((x, y))
}

/// Per-dimension mean and standard deviation over training rows. Dimensions
/// with zero variance get a unit scale so they pass through unchanged.
fn fit_standardizer(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
    let mut std = vec![0.0; x.ncols()];
    for row in x.rows() {
        for (d, &v) in row.iter().enumerate() {
            let c = v - mean[d];
            std[d] += c * c;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mean, std)
}

fn apply_standardizer(x: &mut Array2<f64>, mean: &[f64], std: &[f64]) {
    for mut row in x.rows_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[d]) / std[d];
        }
    }
}

/// Rewrites the first layer so the model consumes raw features:
/// `(x − μ)/σ · w1 + b1  ≡  x · w1' + b1'` with `w1'[d,·] = w1[d,·]/σ_d` and
/// `b1' = b1 − Σ_d μ_d · w1'[d,·]`. Keeps the on-disk format at exactly four
/// parameter tensors.
fn fold_standardizer(m: &mut ProbeModel, mean: &[f64], std: &[f64]) {
    for (d, mut row) in m.w1.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v /= std[d];
        }
    }
    for h in 0..m.b1.len() {
        let mut shift = 0.0;
        for (d, &mu) in mean.iter().enumerate() {
            shift += mu * m.w1[(d, h)];
        }
        m.b1[h] -= shift;
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

struct Snapshot {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

/// Trains a probe on pre-split data. Initialization is Glorot uniform
/// (`±sqrt(6/(fan_in+fan_out))` per layer, zero biases), mini-batches are
/// reshuffled each epoch, and training stops once validation loss has failed
/// to improve for `patience` consecutive epochs (or at `max_epochs`). The
/// returned model holds the best validation epoch's weights.
pub fn train_probe(
    train: &FeatureDataset,
    val: &FeatureDataset,
    class_index: &[VisemeLabel],
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, TrainTrace), ProbeError> {
    validate_config(cfg)?;
    if class_index.len() != cfg.classes {
        return Err(ProbeError::InvalidConfig(format!(
            "class index has {} entries but the configuration declares {} classes",
            class_index.len(),
            cfg.classes
        )));
    }
    let unique: BTreeSet<&VisemeLabel> = class_index.iter().collect();
    if unique.len() != class_index.len() {
        return Err(ProbeError::InvalidConfig(
            "class index contains duplicate labels".to_string(),
        ));
    }

    let (mut x_train, y_train) = to_matrix(train, class_index, cfg.input_dim)?;
    let (mut x_val, y_val) = to_matrix(val, class_index, cfg.input_dim)?;

    let norm = if cfg.standardize {
        let (mean, std) = fit_standardizer(&x_train);
        apply_standardizer(&mut x_train, &mean, &std);
        apply_standardizer(&mut x_val, &mean, &std);
        Some((mean, std))
    } else {
        None
    };

    let d = cfg.input_dim;
    let h = cfg.hidden_units;
    let c = cfg.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ProbeModel {
        w1: glorot(d, h, &mut rng),
        b1: Array1::zeros(h),
        w2: glorot(h, c, &mut rng),
        b2: Array1::zeros(c),
        class_index: class_index.to_vec(),
    };

    let mut st_w1 = AdamState::new(d * h);
    let mut st_b1 = AdamState::new(h);
    let mut st_w2 = AdamState::new(h * c);
    let mut st_b2 = AdamState::new(c);
    let mut t = 0;

    let n_train = x_train.nrows();
    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut epochs = Vec::new();
    let mut best = Snapshot {
        w1: model.w1.clone(),
        b1: model.b1.clone(),
        w2: model.w2.clone(),
        b2: model.b2.clone(),
    };
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad_streak = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let (logits, cache) = forward(&model, &xb.view());
            let (loss, dlogits) = cross_entropy(&logits.view(), &yb);
            if !loss.is_finite() {
                return Err(ProbeError::NonFiniteLoss(epoch));
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = backward(&model, &cache, &dlogits.view());
            t += 1;
            adam_step(model.w1.as_slice_mut().unwrap(), grads.w1.as_slice().unwrap(), &mut st_w1, t, cfg);
            adam_step(model.b1.as_slice_mut().unwrap(), grads.b1.as_slice().unwrap(), &mut st_b1, t, cfg);
            adam_step(model.w2.as_slice_mut().unwrap(), grads.w2.as_slice().unwrap(), &mut st_w2, t, cfg);
            adam_step(model.b2.as_slice_mut().unwrap(), grads.b2.as_slice().unwrap(), &mut st_b2, t, cfg);
        }
        let train_loss = loss_sum / n_train as f64;

        let (val_logits, _) = forward(&model, &x_val.view());
        let (val_loss, _) = cross_entropy(&val_logits.view(), &y_val);
        if !val_loss.is_finite() {
            return Err(ProbeError::NonFiniteLoss(epoch));
        }
        let hits = val_logits
            .rows()
            .into_iter()
            .zip(&y_val)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        let val_acc = hits as f64 / y_val.len() as f64;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = Snapshot {
                w1: model.w1.clone(),
                b1: model.b1.clone(),
                w2: model.w2.clone(),
                b2: model.b2.clone(),
            };
            bad_streak = 0;
        } else {
            bad_streak += 1;
            if bad_streak >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    model.w1 = best.w1;
    model.b1 = best.b1;
    model.w2 = best.w2;
    model.b2 = best.b2;
    if let Some((mean, std)) = norm {
        fold_standardizer(&mut model, &mean, &std);
    }

    Ok((
        model,
        TrainTrace {
            epochs,
            best_epoch,
            stopped_early,
        },
    ))
}

/// Training log CSV: `epoch,train_loss,val_loss,val_acc`, one row per epoch.
pub fn train_log_csv(trace: &TrainTrace) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
    for e in &trace.epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_acc
        ));
    }
    out
}

pub const MODEL_FORMAT: &str = "PROBE1";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    input_dim: usize,
    hidden_units: usize,
    classes: usize,
    class_index: Vec<String>,
    seed: u64,
    config: ProbeConfig,
}

fn tensor_blob(rows: usize, cols: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let data: Vec<f32> = values.map(|v| v as f32).collect();
    let arr = Array2::from_shape_vec((rows, cols), data).expect("shape matches value count");
    emb1::write_embedding_container(&arr)
}

/// Serializes a model: one JSON header line, then the four parameter tensors
/// (w1, b1, w2, b2) as EMB1 blobs. Biases are stored as 1×n matrices.
pub fn model_to_bytes(m: &ProbeModel, cfg: &ProbeConfig) -> Vec<u8> {
    let header = ModelHeader {
        format: MODEL_FORMAT.to_string(),
        input_dim: m.w1.nrows(),
        hidden_units: m.w1.ncols(),
        classes: m.class_index.len(),
        class_index: m.class_index.iter().map(|v| v.as_str().to_string()).collect(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(tensor_blob(m.w1.nrows(), m.w1.ncols(), m.w1.iter().copied()));
    out.extend(tensor_blob(1, m.b1.len(), m.b1.iter().copied()));
    out.extend(tensor_blob(m.w2.nrows(), m.w2.ncols(), m.w2.iter().copied()));
    out.extend(tensor_blob(1, m.b2.len(), m.b2.iter().copied()));
    out
}

fn take_blob(rest: &mut &[u8]) -> Result<Array2<f32>, ProbeError> {
    let bad = |msg: &str| ProbeError::BadModelFile(msg.to_string());
    if rest.len() < 16 {
        return Err(bad("truncated parameter blob header"));
    }
    let t = u32::from_le_bytes(rest[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(rest[12..16].try_into().unwrap()) as usize;
    let len = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| bad("parameter blob shape overflows"))?;
    if rest.len() < len {
        return Err(bad("truncated parameter blob payload"));
    }
    let arr = emb1::read_embedding_container(&rest[..len], None)
        .map_err(|e| ProbeError::BadModelFile(e.to_string()))?;
    *rest = &rest[len..];
    Ok(arr)
}

/// Parses bytes produced by [`model_to_bytes`].
pub fn model_from_bytes(bytes: &[u8]) -> Result<(ProbeModel, ProbeConfig), ProbeError> {
    let bad = |msg: String| ProbeError::BadModelFile(msg);
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".to_string()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| bad(format!("header is not valid JSON: {e}")))?;
    if header.format != MODEL_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    if header.class_index.len() != header.classes {
        return Err(bad(format!(
            "header declares {} classes but lists {}",
            header.classes,
            header.class_index.len()
        )));
    }
    let mut class_index = Vec::with_capacity(header.class_index.len());
    let mut seen = BTreeSet::new();
    for name in &header.class_index {
        let label = VisemeLabel::new(name).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(label.clone()) {
            return Err(bad(format!("duplicate class {name:?}")));
        }
        class_index.push(label);
    }

    let mut rest = &bytes[newline + 1..];
    let w1 = take_blob(&mut rest)?;
    let b1 = take_blob(&mut rest)?;
    let w2 = take_blob(&mut rest)?;
    let b2 = take_blob(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes after parameters", rest.len())));
    }
    let shape = |name: &str, got: (usize, usize), want: (usize, usize)| {
        if got == want {
            Ok(())
        } else {
            Err(bad(format!("{name} has shape {got:?}, expected {want:?}")))
        }
    };
    shape("w1", w1.dim(), (header.input_dim, header.hidden_units))?;
    shape("b1", b1.dim(), (1, header.hidden_units))?;
    shape("w2", w2.dim(), (header.hidden_units, header.classes))?;
    shape("b2", b2.dim(), (1, header.classes))?;

    let model = ProbeModel {
        w1: w1.mapv(f64::from),
        b1: b1.row(0).mapv(f64::from),
        w2: w2.mapv(f64::from),
        b2: b2.row(0).mapv(f64::from),
        class_index,
    };
    Ok((model, header.config))
}

/// Writes a model file atomically.
pub fn write_model(m: &ProbeModel, cfg: &ProbeConfig, path: &Path) -> Result<(), ProbeError> {
    ioutil::write_atomic(path, &model_to_bytes(m, cfg)).map_err(|e| ProbeError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads a model file written by [`write_model`].
pub fn read_model(path: &Path) -> Result<(ProbeModel, ProbeConfig), ProbeError> {
    let bytes = std::fs::read(path).map_err(|e| ProbeError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    model_from_bytes(&bytes)
}
