use std::collections::BTreeMap;

use crate::error::{invalid, Result};

/// Evaluation summary. Segmentation-only fields are `None` for
/// classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Fraction of correct predictions (clouds, or points for
    /// segmentation).
    pub overall_accuracy: f64,
    /// Unweighted mean of per-class recall over classes present in the
    /// ground truth.
    pub avg_class_accuracy: f64,
    pub instance_miou: Option<f64>,
    pub category_miou: Option<f64>,
    /// `TP / (TP + FP + FN)` per class over all predictions, for classes
    /// that occur in the ground truth or the predictions.
    pub per_class_iou: BTreeMap<usize, f64>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

fn confusion(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != truth.len() {
        invalid!("{} predictions for {} labels", predicted.len(), truth.len());
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            invalid!("class id {} out of range for {num_classes} classes", p.max(t));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn summarize(m: Vec<Vec<u64>>) -> Metrics {
    let n = m.len();
    let total: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..n).map(|i| m[i][i]).sum();
    let mut recalls = Vec::new();
    let mut per_class_iou = BTreeMap::new();
    for c in 0..n {
        let support: u64 = m[c].iter().sum();
        let predicted: u64 = m.iter().map(|row| row[c]).sum();
        let tp = m[c][c];
        if support > 0 {
            recalls.push(tp as f64 / support as f64);
        } else {
            log::warn!("class {c} is absent from the ground truth; excluded from the class average");
        }
        let union = support + predicted - tp;
        if union > 0 {
            per_class_iou.insert(c, tp as f64 / union as f64);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Metrics {
        overall_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        avg_class_accuracy: mean(&recalls),
        instance_miou: None,
        category_miou: None,
        per_class_iou,
        confusion: m,
    }
}

/// Overall and class-averaged accuracy of cloud-level predictions.
pub fn evaluate_classification(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Metrics> {
    if truth.is_empty() {
        invalid!("no samples to evaluate");
    }
    Ok(summarize(confusion(predicted, truth, num_classes)?))
}

/// Per-point predictions and labels of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeResult {
    pub category: usize,
    pub predicted: Vec<u32>,
    pub truth: Vec<u32>,
}

/// Mean IoU over the parts of the shape's category. A part absent from
/// both prediction and truth scores 1.
pub fn shape_iou(shape: &ShapeResult, parts: &[u32]) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let sum: f64 = parts
        .iter()
        .map(|&p| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&a, &b) in shape.predicted.iter().zip(&shape.truth) {
                let (x, y) = (a == p, b == p);
                inter += u64::from(x && y);
                union += u64::from(x || y);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    sum / parts.len() as f64
}

/// Part segmentation metrics: instance mIoU (mean shape IoU), category
/// mIoU (mean over categories of their mean shape IoU), and pointwise
/// accuracy and per-part IoU over all points.
pub fn evaluate_segmentation(shapes: &[ShapeResult], part_sets: &[Vec<u32>], num_parts: usize) -> Result<Metrics> {
    if shapes.is_empty() {
        invalid!("no shapes to evaluate");
    }
    let mut per_category: Vec<Vec<f64>> = vec![Vec::new(); part_sets.len()];
    let mut ious = Vec::with_capacity(shapes.len());
    let mut pred_all = Vec::new();
    let mut truth_all = Vec::new();
    for s in shapes {
        let Some(parts) = part_sets.get(s.category) else {
            invalid!("unknown category id {}", s.category);
        };
        if s.predicted.len() != s.truth.len() {
            invalid!("{} predictions for {} labelled points", s.predicted.len(), s.truth.len());
        }
        let iou = shape_iou(s, parts);
        ious.push(iou);
        per_category[s.category].push(iou);
        pred_all.extend(s.predicted.iter().map(|&p| p as usize));
        truth_all.extend(s.truth.iter().map(|&t| t as usize));
    }
    let mut m = summarize(confusion(&pred_all, &truth_all, num_parts)?);
    m.instance_miou = Some(ious.iter().sum::<f64>() / ious.len() as f64);
    let cats: Vec<f64> = per_category
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    m.category_miou = Some(cats.iter().sum::<f64>() / cats.len() as f64);
    Ok(m)
}

/// Highest-scoring class among `allowed` (all classes when empty); ties go
/// to the lowest class id.
pub fn argmax_restricted(row: &[f64], allowed: &[u32]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    let mut consider = |i: usize| {
        if best.is_none_or(|(_, v)| row[i] > v) {
            best = Some((i, row[i]));
        }
    };
    if allowed.is_empty() {
        (0..row.len()).for_each(&mut consider);
    } else {
        let mut ids: Vec<usize> = allowed.iter().map(|&a| a as usize).collect();
        ids.sort_unstable();
        ids.into_iter().for_each(&mut consider);
    }
    best.map_or(0, |(i, _)| i)
}
