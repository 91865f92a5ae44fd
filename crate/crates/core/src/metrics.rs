//! Evaluation metrics over plain probabilities and token lists.

use std::collections::HashSet;
use std::hash::Hash;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no instances to evaluate")]
    Empty,
    #[error("instance {instance}: target {target} outside a catalog of {size}")]
    TargetOutOfRange {
        instance: usize,
        target: usize,
        size: usize,
    },
    #[error("{predictions} predictions for {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
}

/// Indices of the `k` largest scores, descending, ties by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Share of instances whose target is among the first `k` ranked items.
/// An empty evaluation set scores 0.
pub fn recall_at_k(ranked: &[Vec<usize>], targets: &[usize], k: usize) -> f64 {
    assert_eq!(ranked.len(), targets.len(), "one ranking per target");
    if targets.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .zip(targets)
        .filter(|(list, t)| list.iter().take(k).any(|x| x == *t))
        .count();
    hits as f64 / targets.len() as f64
}

/// Mean negative log-probability of each instance's target item.
pub fn rec_loss(predictions: &[Vec<f64>], targets: &[usize]) -> Result<f64, MetricError> {
    if predictions.len() != targets.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (i, (p, &t)) in predictions.iter().zip(targets).enumerate() {
        let pt = p.get(t).ok_or(MetricError::TargetOutOfRange {
            instance: i,
            target: t,
            size: p.len(),
        })?;
        total -= pt.ln();
    }
    Ok(total / targets.len() as f64)
}

/// Generation loss from the probability assigned to each target token:
/// mean NLL within a response, then mean over responses.
pub fn gen_loss(token_probs: &[Vec<f64>]) -> f64 {
    let responses: Vec<&Vec<f64>> = token_probs.iter().filter(|r| !r.is_empty()).collect();
    if responses.is_empty() {
        return 0.0;
    }
    let sum: f64 = responses
        .iter()
        .map(|r| -r.iter().map(|p| p.ln()).sum::<f64>() / r.len() as f64)
        .sum();
    sum / responses.len() as f64
}

/// `exp(total NLL / total tokens)`.
pub fn perplexity_from_nll(total_nll: f64, tokens: usize) -> Result<f64, MetricError> {
    if tokens == 0 {
        return Err(MetricError::Empty);
    }
    Ok((total_nll / tokens as f64).exp())
}

pub fn perplexity(token_probs: &[Vec<f64>]) -> Result<f64, MetricError> {
    let tokens: usize = token_probs.iter().map(Vec::len).sum();
    let nll: f64 = token_probs.iter().flatten().map(|p| -p.ln()).sum();
    perplexity_from_nll(nll, tokens)
}

/// Per-sentence ratio of distinct to total n-grams, averaged over
/// sentences. Sentences shorter than `n` count as 0.
pub fn distinct_n<S: AsRef<[T]>, T: Hash + Eq>(sentences: &[S], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    if sentences.is_empty() {
        return 0.0;
    }
    let mut short = 0usize;
    let total: f64 = sentences
        .iter()
        .map(|s| {
            let s = s.as_ref();
            if s.len() < n {
                short += 1;
                return 0.0;
            }
            let grams: Vec<&[T]> = s.windows(n).collect();
            let unique: HashSet<&[T]> = grams.iter().copied().collect();
            unique.len() as f64 / grams.len() as f64
        })
        .sum();
    if short > 0 {
        log::warn!("distinct-{n}: {short} sentence(s) shorter than {n} tokens scored 0");
    }
    total / sentences.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.2, 0.5, 0.2, 0.1], 3), vec![1, 0, 2]);
        assert_eq!(top_k(&[0.5, 0.5], 10), vec![0, 1]);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[vec![3, 1]], &[3], 1), 1.0);
        let eleventh: Vec<usize> = (0..20).collect();
        assert_eq!(recall_at_k(&[eleventh], &[10], 10), 0.0);
        let r = recall_at_k(&[vec![1, 2], vec![5, 6], vec![9, 7]], &[2, 0, 9], 10);
        assert!((r - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rec_loss_examples() {
        assert_eq!(rec_loss(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        assert!((rec_loss(&[vec![0.25; 4]], &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let l = rec_loss(&[vec![0.5, 0.5], vec![0.25, 0.75]], &[0, 0]).unwrap();
        assert!((l - 1.0397207708399179).abs() < 1e-9);
        assert!(rec_loss(&[vec![1.0]], &[1]).is_err());
    }

    #[test]
    fn generation_examples() {
        assert_eq!(gen_loss(&[vec![1.0, 1.0]]), 0.0);
        assert!((gen_loss(&[vec![0.1]]) - 10f64.ln()).abs() < 1e-12);
        assert!((gen_loss(&[vec![0.5, 0.1]]) - 1.4978661367769954).abs() < 1e-9);
        assert!((perplexity(&[vec![0.1; 7]]).unwrap() - 10.0).abs() < 1e-9);
        assert!((perplexity(&[vec![1.0; 3]]).unwrap() - 1.0).abs() < 1e-12);
        assert!((perplexity(&[vec![0.5, 0.5, 0.25]]).unwrap() - 2.5198420997897464).abs() < 1e-9);
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn distinct_examples() {
        let s = |t: &'static str| t.split(' ').collect::<Vec<_>>();
        assert_eq!(distinct_n(&[s("a b c d")], 2), 1.0);
        assert!((distinct_n(&[s("a a a a")], 2) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[s("a b c"), s("a a a")], 2), 0.75);
        assert_eq!(distinct_n(&[s("a")], 2), 0.0);
    }
}
