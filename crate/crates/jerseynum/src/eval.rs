//! Turning prediction triples into final labels and scoring them: accuracy
//! plus macro-averaged precision, recall and F1 over a confusion matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    compose_digits, decompose_digits, holistic_index, ClassSet, DigitClass, JerseyLabel,
};
use crate::loss::LOG_CLAMP;
use crate::model::PredictionTriple;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("input error: {0}")]
    Input(String),
}

/// How a final label is read off the three heads.
///
/// `MultiTaskDefault` scores the holistic head, the natural reading for a
/// multi-task model (it is the full-label head). `Fused` combines all three
/// heads in log space and is available but never the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    Holistic,
    DigitWise,
    MultiTaskDefault,
    Fused,
}

impl PredictionMode {
    pub fn tag(self) -> &'static str {
        match self {
            PredictionMode::Holistic => "holistic",
            PredictionMode::DigitWise => "digit-wise",
            PredictionMode::MultiTaskDefault => "multi-task-default",
            PredictionMode::Fused => "fused",
        }
    }
}

/// Index of the largest score; ties break to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Reads the final label off a prediction triple.
///
/// Digit-wise composition can produce a number outside the class set (the
/// two heads are independent); such labels collapse to null, the same
/// treatment the codec gives the unrepresentable (digit, Absent) pair.
pub fn predict_label(
    pred: &PredictionTriple,
    mode: PredictionMode,
    classes: &ClassSet,
) -> JerseyLabel {
    match mode {
        PredictionMode::Holistic | PredictionMode::MultiTaskDefault => classes
            .label_at(argmax(&pred.p))
            .expect("distribution length matches class set"),
        PredictionMode::DigitWise => {
            let d1 = DigitClass::from_index(argmax(&pred.p1)).expect("11-way head");
            let d2 = DigitClass::from_index(argmax(&pred.p2)).expect("11-way head");
            let composed = compose_digits(d1, d2);
            if classes.contains(composed) {
                composed
            } else {
                JerseyLabel::NULL
            }
        }
        PredictionMode::Fused => {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, &label) in classes.labels().iter().enumerate() {
                let (d1, d2) = decompose_digits(label);
                let score = pred.p[i].max(LOG_CLAMP).ln()
                    + pred.p1[d1.index()].max(LOG_CLAMP).ln()
                    + pred.p2[d2.index()].max(LOG_CLAMP).ln();
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            classes.label_at(best).expect("index from enumeration")
        }
    }
}

/// The digit-wise correctness rule: a prediction counts only if both digit
/// heads are individually right.
pub fn digitwise_correct(pred: &PredictionTriple, truth: JerseyLabel) -> bool {
    let (d1, d2) = decompose_digits(truth);
    argmax(&pred.p1) == d1.index() && argmax(&pred.p2) == d2.index()
}

/// Count matrix indexed by the class set; rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Vec<usize>,
    k: usize,
    total: usize,
}

/// Tallies predictions against ground truth.
pub fn confusion(
    preds: &[JerseyLabel],
    truths: &[JerseyLabel],
    classes: &ClassSet,
) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::Input(format!(
            "{} predictions but {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(EvalError::Input("empty prediction list".into()));
    }
    let k = classes.len();
    let mut counts = vec![0usize; k * k];
    for (&p, &t) in preds.iter().zip(truths) {
        let pi = holistic_index(p, classes).map_err(|e| EvalError::Input(e.to_string()))?;
        let ti = holistic_index(t, classes).map_err(|e| EvalError::Input(e.to_string()))?;
        counts[ti * k + pi] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        k,
        total: preds.len(),
    })
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<usize>, k: usize) -> Result<Self, EvalError> {
        if counts.len() != k * k {
            return Err(EvalError::Input(format!(
                "count matrix length {} is not {k}x{k}",
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(ConfusionMatrix { counts, k, total })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.k + pred]
    }

    pub fn accuracy(&self) -> f64 {
        let trace: usize = (0..self.k).map(|i| self.count(i, i)).sum();
        trace as f64 / self.total as f64
    }

    fn true_count(&self, class: usize) -> usize {
        (0..self.k).map(|p| self.count(class, p)).sum()
    }

    fn predicted_count(&self, class: usize) -> usize {
        (0..self.k).map(|t| self.count(t, class)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    /// Whether the class occurs in the ground truth at all; absent classes
    /// are excluded from macro averages.
    pub present: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// One CSV row matching the results-table column layout.
    pub fn to_csv_row(&self, method: &str) -> String {
        format!(
            "{method},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        )
    }
}

/// Per-class precision/recall/F1 and their unweighted means over classes
/// present in the truth set. Zero-division cases score 0.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    if cm.total == 0 {
        return Err(EvalError::Input("empty confusion matrix".into()));
    }
    let mut per_class = Vec::with_capacity(cm.k);
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let mut present_count = 0usize;
    for c in 0..cm.k {
        let tp = cm.count(c, c) as f64;
        let fp = cm.predicted_count(c) as f64 - tp;
        let fn_ = cm.true_count(c) as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let present = cm.true_count(c) > 0;
        if present {
            present_count += 1;
            sp += precision;
            sr += recall;
            sf += f1;
        }
        per_class.push(ClassMetrics {
            present,
            precision,
            recall,
            f1,
        });
    }
    if present_count == 0 {
        return Err(EvalError::Input("no class has a true instance".into()));
    }
    let n = present_count as f64;
    Ok(MetricsReport {
        accuracy: cm.accuracy(),
        macro_precision: sp / n,
        macro_recall: sr / n,
        macro_f1: sf / n,
        per_class,
    })
}
