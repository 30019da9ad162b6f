//! Classification metrics: confusion matrix, accuracy, per-class
//! precision/recall/F1, macro-F1, and per-viseme condition deltas.
//!
//! All functions are pure; reports keep classes in the order of the supplied
//! class index so serialized output is deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::VisemeLabel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("true/predicted label lists have lengths {true_len} and {pred_len}")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("label {0:?} does not appear in the class index")]
    UnknownLabel(String),
    #[error("reports are not comparable: {0}")]
    ClassIndexMismatch(String),
}

/// Count matrix with rows indexed by true class and columns by predicted
/// class, both in `class_index` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_index: Vec<VisemeLabel>,
}

impl ConfusionMatrix {
    /// Number of evaluated records.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Correctly classified records.
    pub fn trace(&self) -> u64 {
        self.counts.iter().enumerate().map(|(i, row)| row[i]).sum()
    }
}

/// Metrics for one class. `support` is the number of true instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub viseme: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Evaluation of one (condition, layer) slice. `per_class` follows the
/// confusion matrix's class order; zero-support classes keep their rows but
/// are excluded from `macro_f1` and listed in `zero_support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub layer: u32,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassReport>,
    pub zero_support: Vec<String>,
}

/// Tallies `counts[true][pred]` over paired label lists.
pub fn confusion(
    true_labels: &[VisemeLabel],
    predicted_labels: &[VisemeLabel],
    class_index: &[VisemeLabel],
) -> Result<ConfusionMatrix, MetricsError> {
    if true_labels.len() != predicted_labels.len() {
        return Err(MetricsError::LengthMismatch {
            true_len: true_labels.len(),
            pred_len: predicted_labels.len(),
        });
    }
    let position = |label: &VisemeLabel| {
        class_index
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| MetricsError::UnknownLabel(label.as_str().to_string()))
    };
    let c = class_index.len();
    let mut counts = vec![vec![0u64; c]; c];
    for (t, p) in true_labels.iter().zip(predicted_labels) {
        counts[position(t)?][position(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_index: class_index.to_vec(),
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall, and F1 with the 0/0 → 0 convention.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<ClassReport> {
    let c = cm.class_index.len();
    (0..c)
        .map(|i| {
            let tp = cm.counts[i][i];
            let support: u64 = cm.counts[i].iter().sum();
            let predicted: u64 = cm.counts.iter().map(|row| row[i]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassReport {
                viseme: cm.class_index[i].as_str().to_string(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Fraction of correctly classified records; 0 on an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total())
}

/// Micro-averaged recall, summed per class: Σ tp / Σ (tp + fn). Equals
/// [`accuracy`] by construction — kept as an independent computation path.
pub fn micro_recall(cm: &ConfusionMatrix) -> f64 {
    let mut tp_sum = 0;
    let mut truth_sum = 0;
    for (i, row) in cm.counts.iter().enumerate() {
        tp_sum += row[i];
        truth_sum += row.iter().sum::<u64>();
    }
    ratio(tp_sum, truth_sum)
}

/// Assembles the full report for one (condition, layer) slice.
pub fn eval_report(cm: &ConfusionMatrix, condition: &str, layer: u32) -> EvalReport {
    let per_class = per_class_f1(cm);
    let zero_support: Vec<String> = per_class
        .iter()
        .filter(|r| r.support == 0)
        .map(|r| r.viseme.clone())
        .collect();
    let scored: Vec<&ClassReport> = per_class.iter().filter(|r| r.support > 0).collect();
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|r| r.f1).sum::<f64>() / scored.len() as f64
    };
    EvalReport {
        condition: condition.to_string(),
        layer,
        accuracy: accuracy(cm),
        macro_f1,
        per_class,
        zero_support,
    }
}

/// Per-viseme F1 differences `f1_b − f1_a`, in class-index order. Both
/// reports must cover the same classes and layer.
pub fn condition_delta(
    a: &EvalReport,
    b: &EvalReport,
) -> Result<Vec<(VisemeLabel, f64)>, MetricsError> {
    if a.layer != b.layer {
        return Err(MetricsError::ClassIndexMismatch(format!(
            "layer {} vs {}",
            a.layer, b.layer
        )));
    }
    let names = |r: &EvalReport| -> Vec<String> {
        r.per_class.iter().map(|c| c.viseme.clone()).collect()
    };
    if names(a) != names(b) {
        return Err(MetricsError::ClassIndexMismatch(format!(
            "class index {:?} vs {:?}",
            names(a),
            names(b)
        )));
    }
    Ok(a
        .per_class
        .iter()
        .zip(&b.per_class)
        .map(|(ca, cb)| {
            let label = VisemeLabel::new(&ca.viseme).expect("label validated at construction");
            (label, cb.f1 - ca.f1)
        })
        .collect())
}

/// CSV over many reports: `condition,layer,viseme,precision,recall,f1,support`,
/// one row per class, reports in the given order.
pub fn f1_by_layer_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("condition,layer,viseme,precision,recall,f1,support\n");
    for r in reports {
        for c in &r.per_class {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.condition, r.layer, c.viseme, c.precision, c.recall, c.f1, c.support
            ));
        }
    }
    out
}
