//! Ranking and classification metrics, always computed in f64.

use crate::error::{Error, Result};

fn check_classes(labels: &[bool]) -> Result<(u64, u64)> {
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::usage(format!(
            "ranking metrics need both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Average precision over a ranked list: the list is sorted by score
/// descending with the original index breaking ties, and each positive at
/// rank n contributes precision(n) / total positives. Errors when either
/// class is absent.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "score/label length mismatch");
    let (n_pos, _) = check_classes(labels)?;
    let order = ranked_order(scores);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Area under the ROC curve by the rank-sum identity. Tied scores share
/// their average rank, which credits half a win per tied positive-negative
/// pair. The numerator is accumulated in integer half-rank units, so the
/// result is bit-identical to counting every pair directly. Errors when
/// either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "score/label length mismatch");
    let (n_pos, n_neg) = check_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    // twice the rank sum of positives, walking tie groups of equal score
    let mut pos_rank2 = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // group occupies ranks start+1 ..= end; doubled average rank
        let rank2 = (start + 1 + end) as u64;
        for &i in &order[start..end] {
            if labels[i] {
                pos_rank2 += rank2;
            }
        }
        start = end;
    }
    let u2 = pos_rank2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Fraction of examples whose thresholded score matches the label. A score
/// of exactly 0.5 counts as a positive prediction.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "score/label length mismatch");
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= 0.5) == l)
        .count();
    correct as f64 / scores.len() as f64
}

fn ranked_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    order
}

/// Every positive-negative pair inspected directly: one point per win, half
/// per tie. Quadratic, kept as the reference implementation.
pub fn roc_auc_by_pair_counting(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_classes(labels)?;
    let mut credit2 = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                credit2 += 2;
            } else if scores[i] == scores[j] {
                credit2 += 1;
            }
        }
    }
    Ok(credit2 as f64 / (2 * n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn average_precision_hand_checked() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        // hits at ranks 1 and 3: (1/1 + 2/3) / 2
        assert!((average_precision(&scores, &labels).unwrap() - 5.0 / 6.0).abs() < 1e-15);

        let labels = [true, true, false, false];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);

        // worst ordering: positives at the bottom
        let labels = [false, false, true, true];
        let want = (1.0 / 3.0 + 2.0 / 4.0) / 2.0;
        assert!((average_precision(&scores, &labels).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn average_precision_breaks_ties_by_index() {
        // equal scores keep original order, so the positive at index 0 ranks first
        let scores = [0.5, 0.5];
        assert_eq!(average_precision(&scores, &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&scores, &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_labels_are_usage_errors() {
        assert!(average_precision(&[0.3, 0.7], &[false, false]).is_err());
        assert!(average_precision(&[0.3, 0.7], &[true, true]).is_err());
        assert!(roc_auc(&[0.3, 0.7], &[false, false]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_hand_checked() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.75);
        assert_eq!(roc_auc(&scores, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&scores, &[false, false, true, true]).unwrap(), 0.0);
        // a fully tied pair earns half credit
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn auc_equals_pair_counting_exactly() {
        let mut rng = StdRng::seed_from_u64(404);
        for round in 0..200 {
            let n = rng.gen_range(4..120);
            // coarse grid forces plenty of ties
            let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            // guarantee both classes
            labels[0] = true;
            labels[1] = false;
            scores[0] = rng.gen_range(0..8) as f64 / 8.0;
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = roc_auc_by_pair_counting(&scores, &labels).unwrap();
            assert_eq!(fast.to_bits(), slow.to_bits(), "round {round}: {fast} vs {slow}");
        }
    }

    #[test]
    fn accuracy_thresholds_at_half() {
        let scores = [0.6, 0.4, 0.5];
        let labels = [true, false, false];
        // 0.5 predicts positive, so the last example is wrong
        assert!((accuracy(&scores, &labels) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[], &[]), 0.0);
    }
}
