//! Ranking metrics with exact tie handling.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "metric" });
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into blocks of equal score.
fn tie_blocks(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
///
/// ```
/// use endoalign::metrics::auroc;
/// let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
/// assert_eq!(a, 0.75);
/// ```
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined("auroc needs both classes"));
    }
    // Twice the Mann–Whitney count, kept integral so the result is exact.
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = neg;
    for block in tie_blocks(scores) {
        let p = block.iter().filter(|&&i| labels[i]).count() as u64;
        let n = block.len() as u64 - p;
        neg_below -= n;
        doubled += p * (2 * neg_below + n);
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `Σ_k (TP_k − TP_{k−1}) · precision_k / P` over the
/// distinct thresholds in descending order.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::MetricUndefined("aupr needs a positive item"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for block in tie_blocks(scores) {
        let p = block.iter().filter(|&&i| labels[i]).count();
        tp += p;
        fp += block.len() - p;
        if p > 0 {
            area += p as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area / pos as f64)
}
