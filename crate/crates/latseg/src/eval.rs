//! Segmentation metrics: confusion-matrix accumulation, per-class IoU,
//! mIoU, and moving/static group breakdowns.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {predictions} predictions, {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("class id {class} out of range (K = {classes}) at index {index}")]
    OutOfRange {
        class: i64,
        classes: usize,
        index: usize,
    },
}

/// K x K counts, rows = ground truth, columns = prediction. Ignored
/// ground-truth points are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignore_label: i64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_label: i64) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            ignore_label,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, predictions: &[i64], labels: &[i64]) -> Result<(), EvalError> {
        if predictions.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                predictions: predictions.len(),
                labels: labels.len(),
            });
        }
        let k = self.classes as i64;
        for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
            if t == self.ignore_label {
                continue;
            }
            if t < 0 || t >= k {
                return Err(EvalError::OutOfRange {
                    class: t,
                    classes: self.classes,
                    index: i,
                });
            }
            if p < 0 || p >= k {
                return Err(EvalError::OutOfRange {
                    class: p,
                    classes: self.classes,
                    index: i,
                });
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum of two matrices from parallel workers.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merge: class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU; classes with zero denominator (never seen as truth or
    /// prediction) are None and excluded from the mean.
    pub fn iou(&self) -> IouReport {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty())
            .then(|| present.iter().sum::<f64>() / present.len() as f64);
        IouReport { per_class, mean }
    }

    /// Overall point accuracy (diagonal mass over total).
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| {
            let correct: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
            correct as f64 / total as f64
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IouReport {
    /// None marks a class absent from both truth and predictions.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupedReport {
    pub class_names: Vec<String>,
    pub moving: Vec<bool>,
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub miou_static: Option<f64>,
    pub miou_moving: Option<f64>,
    pub accuracy: Option<f64>,
}

fn group_mean(per_class: &[Option<f64>], select: impl Fn(usize) -> bool) -> Option<f64> {
    let vals: Vec<f64> = per_class
        .iter()
        .enumerate()
        .filter(|(i, v)| select(*i) && v.is_some())
        .map(|(_, v)| v.unwrap())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Group the per-class IoUs into static and moving means. `moving` flags one
/// entry per class.
pub fn moving_static_report(
    cm: &ConfusionMatrix,
    class_names: &[String],
    moving: &[bool],
) -> GroupedReport {
    assert_eq!(class_names.len(), cm.classes());
    assert_eq!(moving.len(), cm.classes());
    let iou = cm.iou();
    GroupedReport {
        class_names: class_names.to_vec(),
        moving: moving.to_vec(),
        miou_static: group_mean(&iou.per_class, |i| !moving[i]),
        miou_moving: group_mean(&iou.per_class, |i| moving[i]),
        miou: iou.mean,
        per_class: iou.per_class,
        accuracy: cm.accuracy(),
    }
}

impl GroupedReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let name_w = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "absent".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("{:<name_w$}  {:>6}  {:>6}\n", "class", "IoU", "group"));
        for i in 0..self.class_names.len() {
            let group = if self.moving[i] { "moving" } else { "static" };
            out.push_str(&format!(
                "{:<name_w$}  {:>6}  {:>6}\n",
                self.class_names[i],
                fmt(self.per_class[i]),
                group
            ));
        }
        out.push_str(&format!("{:<name_w$}  {:>6}\n", "mIoU", fmt(self.miou)));
        out.push_str(&format!(
            "{:<name_w$}  {:>6}\n",
            "mIoU-static",
            fmt(self.miou_static)
        ));
        out.push_str(&format!(
            "{:<name_w$}  {:>6}\n",
            "mIoU-moving",
            fmt(self.miou_moving)
        ));
        out.push_str(&format!("{:<name_w$}  {:>6}\n", "accuracy", fmt(self.accuracy)));
        out
    }
}
