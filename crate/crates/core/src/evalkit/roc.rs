use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive. The first point uses +inf.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// ROC over every distinct score threshold, AUC by the trapezoid rule.
///
/// Trapezoid area counts a tied (positive, negative) pair as half, so the
/// AUC equals the Mann-Whitney probability `P(s+ > s-) + ½ P(s+ = s-)`.
/// The area is accumulated in integers and divided once.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: scores[index],
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the trapezoid area in units of (1/P)(1/N)
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    let auc = area2 as f64 / (2.0 * p * n);
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}
