//! Confusion matrices and per-class precision, recall and F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::images::ImageSet;
use crate::ingest::ClassLabel;
use crate::model::{argmax_class, predict_set, ModelError, Network};
use crate::tfr::ramp_image;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("no labels to evaluate")]
    Empty,
    #[error("label {0} is not among the report classes")]
    UnknownClass(ClassLabel),
    #[error("confusion matrices cover different classes")]
    ClassMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Counts indexed `[true][predicted]` over `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ClassLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: &[ClassLabel]) -> Self {
        Self {
            classes: classes.to_vec(),
            counts: vec![vec![0; classes.len()]; classes.len()],
        }
    }

    fn index(&self, c: ClassLabel) -> Result<usize, EvalError> {
        self.classes
            .iter()
            .position(|&k| k == c)
            .ok_or(EvalError::UnknownClass(c))
    }

    pub fn add(&mut self, truth: ClassLabel, pred: ClassLabel) -> Result<(), EvalError> {
        let (i, j) = (self.index(truth)?, self.index(pred)?);
        self.counts[i][j] += 1;
        Ok(())
    }

    /// Elementwise sum.
    pub fn merge(&self, other: &Self) -> Result<Self, EvalError> {
        if self.classes != other.classes {
            return Err(EvalError::ClassMismatch);
        }
        let mut out = self.clone();
        for (row, orow) in out.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
        Ok(out)
    }

    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            let _ = write!(s, "{c}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix over all five classes in report order.
pub fn confusion_matrix(truth: &[ClassLabel], pred: &[ClassLabel]) -> Result<ConfusionMatrix, EvalError> {
    confusion_matrix_over(&ClassLabel::REPORT_ORDER, truth, pred)
}

pub fn confusion_matrix_over(
    classes: &[ClassLabel],
    truth: &[ClassLabel],
    pred: &[ClassLabel],
) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub confusion_matrix: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class metrics with `0/0 = 0`, accuracy, and macro and
/// support-weighted averages.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.classes.len();
    let total = cm.total();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|i| {
            let tp = cm.counts[i][i];
            let support = cm.support(i);
            let predicted: u64 = (0..k).map(|r| cm.counts[r][i]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                class: cm.classes[i],
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
            }
        })
        .collect();
    let trace: u64 = (0..k).map(|i| cm.counts[i][i]).sum();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
        }
    };
    let macro_avg = Averages {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        support: total,
    };
    let weighted_avg = Averages {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        support: total,
    };
    MetricsReport {
        per_class,
        accuracy: ratio(trace, total),
        macro_avg,
        weighted_avg,
        confusion_matrix: cm.clone(),
    }
}

impl MetricsReport {
    pub fn total_support(&self) -> u64 {
        self.weighted_avg.support
    }

    pub fn class(&self, c: ClassLabel) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|m| m.class == c)
    }

    /// Aligned table with four decimals, one row per class then accuracy,
    /// macro and weighted averages.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>12}{:>11}{:>10}{:>10}{:>10}\n\n", "", "precision", "recall", "f1-score", "support");
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:>12}{:>11.4}{:>10.4}{:>10.4}{:>10}",
                m.class.code(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        s.push('\n');
        let _ = writeln!(s, "{:>12}{:>11}{:>10}{:>10.4}{:>10}", "accuracy", "", "", self.accuracy, self.total_support());
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(
                s,
                "{:>12}{:>11.4}{:>10.4}{:>10.4}{:>10}",
                name, a.precision, a.recall, a.f1, a.support
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Strip the coordinate ramp from the images before inference.
    pub no_ramp: bool,
    /// Drop Q records and score the remaining four classes, never
    /// predicting Q.
    pub drop_q: bool,
}

impl EvalOptions {
    pub fn classes(&self) -> Vec<ClassLabel> {
        ClassLabel::REPORT_ORDER
            .into_iter()
            .filter(|&c| !(self.drop_q && c == ClassLabel::Q))
            .collect()
    }
}

/// Report for probability rows (file-ordinal order) against true labels.
pub fn evaluate_probabilities(
    truth: &[ClassLabel],
    probs: &[Vec<f64>],
    opts: EvalOptions,
) -> Result<MetricsReport, EvalError> {
    if truth.len() != probs.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            pred: probs.len(),
        });
    }
    let classes = opts.classes();
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for (&label, row) in truth.iter().zip(probs) {
        if opts.drop_q && label == ClassLabel::Q {
            continue;
        }
        t.push(label);
        p.push(argmax_class(row, |c| classes.contains(&c)));
    }
    Ok(per_class_metrics(&confusion_matrix_over(&classes, &t, &p)?))
}

/// Removes the additive ramp recorded in `set.ramp_strength`.
pub fn strip_ramp(set: &ImageSet) -> ImageSet {
    if set.ramp_strength == 0.0 {
        return set.clone();
    }
    let ramp = ramp_image(set.rows, set.cols, set.ramp_strength);
    let mut out = set.clone();
    let n = set.pixels();
    for img in out.data.chunks_exact_mut(n) {
        for (v, r) in img.iter_mut().zip(&ramp.values) {
            *v = (*v as f64 - r) as f32;
        }
    }
    out.ramp_strength = 0.0;
    out
}

pub fn evaluate(net: &Network<f32>, test: &ImageSet, opts: EvalOptions) -> Result<MetricsReport, EvalError> {
    let filtered;
    let mut set = test;
    if opts.drop_q {
        filtered = set.filter_labels(|c| c != ClassLabel::Q);
        set = &filtered;
    }
    if set.is_empty() {
        return Err(EvalError::Empty);
    }
    let stripped;
    if opts.no_ramp && set.ramp_strength != 0.0 {
        stripped = strip_ramp(set);
        set = &stripped;
    }
    let probs = predict_set(net, set, 64)?;
    evaluate_probabilities(&set.labels, &probs, opts)
}
