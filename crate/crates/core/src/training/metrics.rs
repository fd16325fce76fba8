//! Segmentation and classification metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// Mean over shapes of the per-shape part IoU (segmentation) or mean
    /// class IoU from the confusion matrix (classification).
    pub miou: f64,
    /// Keyed by category (segmentation) or class (classification).
    pub per_class_iou: BTreeMap<usize, f64>,
    pub oa: f64,
    pub macc: f64,
    pub loss: f64,
}

/// IoU of one shape averaged over its category's parts. A part missing
/// from both prediction and truth scores 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], parts: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("shape_iou", truth.len(), pred.len()));
    }
    if parts.is_empty() {
        return Err(Error::invalid("shape_iou needs at least one part"));
    }
    let mut total = 0.0;
    for &part in parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            let (a, b) = (p == part, t == part);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / parts.len() as f64)
}

/// Shape-averaged part IoU plus point accuracy. `mAcc` averages the
/// per-part recall over parts that occur in the truth.
pub fn compute_miou(
    preds: &[Vec<usize>],
    truths: &[Vec<usize>],
    categories: &[usize],
    parts_of_category: impl Fn(usize) -> Vec<usize>,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::invalid("cannot compute metrics on an empty set"));
    }
    if preds.len() != truths.len() || preds.len() != categories.len() {
        return Err(Error::shape("compute_miou", preds.len(), format!("{} truths, {} categories", truths.len(), categories.len())));
    }
    let mut shape_sum = 0.0;
    let mut per_cat: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    let mut points = 0usize;
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((pred, truth), &cat) in preds.iter().zip(truths).zip(categories) {
        let iou = shape_iou(pred, truth, &parts_of_category(cat))?;
        shape_sum += iou;
        let e = per_cat.entry(cat).or_default();
        e.0 += iou;
        e.1 += 1;
        for (&p, &t) in pred.iter().zip(truth) {
            correct += (p == t) as usize;
            let h = hits.entry(t).or_default();
            h.0 += (p == t) as usize;
            h.1 += 1;
        }
        points += truth.len();
    }
    if points == 0 {
        return Err(Error::invalid("cannot compute metrics on shapes without points"));
    }
    Ok(MetricReport {
        miou: shape_sum / preds.len() as f64,
        per_class_iou: per_cat.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
        oa: correct as f64 / points as f64,
        macc: hits.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / hits.len() as f64,
        loss: 0.0,
    })
}

/// Instance accuracy, class-averaged accuracy and class IoU.
pub fn classification_report(preds: &[usize], truths: &[usize], num_classes: usize) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::invalid("cannot compute metrics on an empty set"));
    }
    if preds.len() != truths.len() {
        return Err(Error::shape("classification_report", truths.len(), preds.len()));
    }
    if let Some(&bad) = preds.iter().chain(truths).find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("class {bad} out of range for {num_classes} classes")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut acc = Vec::new();
    let mut per_class_iou = BTreeMap::new();
    for c in 0..num_classes {
        let truth_c: usize = confusion[c].iter().sum();
        let pred_c: usize = confusion.iter().map(|row| row[c]).sum();
        if truth_c > 0 {
            acc.push(confusion[c][c] as f64 / truth_c as f64);
        }
        let union = truth_c + pred_c - confusion[c][c];
        if union > 0 {
            per_class_iou.insert(c, confusion[c][c] as f64 / union as f64);
        }
    }
    Ok(MetricReport {
        miou: per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64,
        per_class_iou,
        oa: correct as f64 / preds.len() as f64,
        macc: acc.iter().sum::<f64>() / acc.len() as f64,
        loss: 0.0,
    })
}

/// Index of the largest entry among `allowed` columns of a logit row;
/// ties go to the earlier column.
pub fn argmax_among(row: &[f32], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &c in &allowed[1..] {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = vec![vec![0, 1, 1, 0]];
        let r = compute_miou(&t, &t, &[0], |_| vec![0, 1]).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.oa, 1.0);
    }

    #[test]
    fn single_part_prediction_of_a_split_shape() {
        let r = compute_miou(&[vec![0, 0, 0, 0]], &[vec![0, 0, 1, 1]], &[0], |_| vec![0, 1]).unwrap();
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn shapes_average() {
        let preds = vec![vec![0], vec![0, 0]];
        let truths = vec![vec![0], vec![0, 1]];
        let r = compute_miou(&preds, &truths, &[0, 0], |_| vec![0]).unwrap();
        assert_eq!(r.miou, 0.75);
    }

    #[test]
    fn absent_part_counts_as_one() {
        assert_eq!(shape_iou(&[2, 2], &[2, 2], &[2, 3]).unwrap(), 1.0);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(compute_miou(&[], &[], &[], |_| vec![0]).is_err());
        assert!(classification_report(&[], &[], 3).is_err());
    }

    #[test]
    fn classification_numbers() {
        let r = classification_report(&[0, 0, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(r.oa, 0.75);
        assert!((r.macc - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
        assert!((r.miou - (0.5 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn restricted_argmax() {
        assert_eq!(argmax_among(&[5.0, 1.0, 2.0, 2.0], &[2, 3]), 2);
        assert_eq!(argmax_among(&[5.0, 1.0, 2.0, 3.0], &[2, 3]), 3);
    }
}
