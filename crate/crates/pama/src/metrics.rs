//! Classification metrics: accuracy, macro-F1, one-vs-rest ROC AUC, and
//! rank correlation for the label-efficiency sweep.
//!
//! AUC uses the rank formulation (Mann–Whitney U with tie-averaged ranks),
//! which equals trapezoidal integration of the ROC curve; a brute-force
//! pair-counting oracle cross-checks it in the tests.

/// Index of the largest element; ties go to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax of an empty slice");
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of a logit vector.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label length mismatch");
    assert!(!pred.is_empty(), "metrics over an empty evaluation set");
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / pred.len() as f64
}

/// Unweighted mean of per-class F1 scores over all `n_classes` classes; a
/// class with zero precision+recall denominators contributes 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label length mismatch");
    assert!(!pred.is_empty(), "metrics over an empty evaluation set");
    assert!(n_classes > 0, "macro_f1 needs at least one class");
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        // F1 = 2tp / (2tp + fp + fn); empty class → 0
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    f1_sum / n_classes as f64
}

/// Ranks 1..=n with ties replaced by the mean rank of the tied group.
fn tie_averaged_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite score"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest ROC AUC from scores and a positive mask; `None` when either
/// side is empty (the metric is undefined, not zero).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = tie_averaged_ranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro average of per-class one-vs-rest AUCs. Classes without both a
/// positive and a negative example are skipped; `None` if no class
/// qualifies (e.g. a single-class evaluation set).
pub fn macro_auc(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Option<f64> {
    assert_eq!(probs.len(), truth.len(), "score/label length mismatch");
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if let Some(auc) = roc_auc(&scores, &positive) {
            sum += auc;
            counted += 1;
        }
    }
    (counted > 0).then(|| sum / counted as f64)
}

/// Spearman rank correlation; `None` below 2 points or when either side has
/// zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return None;
    }
    let rx = tie_averaged_ranks(xs);
    let ry = tie_averaged_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
