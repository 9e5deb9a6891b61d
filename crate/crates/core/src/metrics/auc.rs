//! ROC AUC as the normalized Mann-Whitney U statistic.

use crate::error::{Error, Result};
use crate::grid::{ForegroundProbMap, RaterStack};
use crate::ordinal::orc_encode;

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half. Sorts once: `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClassReference);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&idx| labels[idx]).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// AUC pooled over all voxels of all images against the per-voxel majority
/// vote (ties to foreground).
pub fn auc_majority(preds: &[&ForegroundProbMap], stacks: &[&RaterStack]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (p, s) in preds.iter().zip(stacks) {
        let reference = orc_encode(s).majority_mask();
        scores.extend_from_slice(p.as_slice());
        labels.extend(reference.as_slice().iter().map(|&y| y == 1));
    }
    auc(&scores, &labels)
}

/// Mean over raters of the pooled AUC against each rater's own masks.
/// Raters whose pooled masks are single-class are skipped.
pub fn auc_per_rater_mean(preds: &[&ForegroundProbMap], stacks: &[&RaterStack]) -> Option<f64> {
    let k = stacks.first()?.num_raters();
    let scores: Vec<f64> = preds.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
    let values: Vec<f64> = (0..k)
        .filter_map(|r| {
            let labels: Vec<bool> = stacks
                .iter()
                .flat_map(|s| s.rater(r).as_slice().iter().map(|&y| y == 1))
                .collect();
            auc(&scores, &labels).ok()
        })
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
