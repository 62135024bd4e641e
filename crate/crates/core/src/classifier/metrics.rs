use crate::error::{contract, Error, Result};
use crate::stats::average_ranks;

/// Area under the ROC curve via the Mann–Whitney rank statistic; tied
/// scores receive their average rank. Labels are 0/1 with 1 positive.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(contract("auroc: scores and labels differ in length"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(contract("auroc labels must be 0 or 1"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Support-weighted mean of per-class F1; a class with zero precision and
/// recall contributes F1 = 0.
pub fn weighted_f1(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(contract("weighted_f1: length mismatch"));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("weighted F1 over zero instances".into()));
    }
    if predicted.iter().chain(truth).any(|&c| c >= n_classes) {
        return Err(contract(format!("label outside [0, {n_classes})")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        pred_count[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let n = truth.len() as f64;
    let mut total = 0.0;
    for c in 0..n_classes {
        if support[c] == 0 {
            continue;
        }
        // F1 = 2·tp / (predicted + support)
        let denom = (pred_count[c] + support[c]) as f64;
        let f1 = if tp[c] == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom };
        total += support[c] as f64 / n * f1;
    }
    Ok(total)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(contract("accuracy: length mismatch"));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over zero instances".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn weighted_f1_examples() {
        assert_eq!(weighted_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(weighted_f1(&[1, 2, 0], &[0, 1, 2], 3).unwrap(), 0.0);
        let v = weighted_f1(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap();
        assert!((v - (3.0 * 0.8 + 2.0 / 3.0) / 4.0).abs() < 1e-15);
        assert!(weighted_f1(&[], &[], 2).is_err());
        assert!(weighted_f1(&[3], &[0], 2).is_err());
    }

    fn brute_force_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auroc_properties(data in proptest::collection::vec((0u8..6, 0usize..2), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - brute_force_auc(&scores, &labels)).abs() < 1e-12);
            // strictly increasing transform
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            prop_assert!((auroc(&t, &labels).unwrap() - a).abs() < 1e-12);
            let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
            prop_assert!((auroc(&scores, &flipped).unwrap() + a - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weighted_f1_permutation_invariant(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..30), rot in 0usize..30) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let a = weighted_f1(&pred, &truth, 4).unwrap();
            let mut pr = pred.clone();
            let mut tr = truth.clone();
            let k = rot % pr.len();
            pr.rotate_left(k);
            tr.rotate_left(k);
            prop_assert!((weighted_f1(&pr, &tr, 4).unwrap() - a).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
