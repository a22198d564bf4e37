//! Corpus BLEU and visual-attention sparsity statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq::AttentionRecord;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 against a single reference per hypothesis, without
/// smoothing: any zero precision gives a score of 0.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Misaligned(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub mean_max: f64,
    /// Population standard deviation.
    pub std_max: f64,
    /// `max_s a_tv(s)` for every decoder step of every example.
    pub maxima: Vec<Vec<f64>>,
}

/// Mean and spread of the per-step maximum visual attention weight.
pub fn attention_sparsity_stats(records: &[AttentionRecord]) -> Result<SparsityStats> {
    let mut maxima = Vec::with_capacity(records.len());
    for record in records {
        let visual = record.visual.as_ref().ok_or(Error::NoVisualAttention)?;
        maxima.push(
            visual
                .iter()
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect::<Vec<_>>(),
        );
    }
    let all: Vec<f64> = maxima.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::NoVisualAttention);
    }
    let n = all.len() as f64;
    let mean_max = all.iter().sum::<f64>() / n;
    let std_max = (all.iter().map(|m| (m - mean_max).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SparsityStats {
        mean_max,
        std_max,
        maxima,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn identity_and_disjoint() {
        let h = vec![words("the cat sat on the mat today"), words("a dog runs in the park")];
        assert_eq!(corpus_bleu(&h, &h).unwrap().bleu, 100.0);
        let r = vec![words("x y z w v"), words("q r s t u v")];
        assert_eq!(corpus_bleu(&h, &r).unwrap().bleu, 0.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let h = vec![words("the the the the the the the")];
        let r = vec![words("the cat is on the mat")];
        let rep = corpus_bleu(&h, &r).unwrap();
        assert_eq!(rep.precisions[0], 2.0 / 7.0);
        assert_eq!(rep.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let h = vec![words("a b c d")];
        let r = vec![words("a b c d e f g h")];
        let rep = corpus_bleu(&h, &r).unwrap();
        assert!((rep.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((rep.bleu - 100.0 * (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn bleu_errors() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(corpus_bleu(&empty, &empty), Err(Error::EmptyCorpus)));
        assert!(corpus_bleu(&[words("a")], &[words("a"), words("b")]).is_err());
    }

    fn record(visual: Option<Vec<Vec<f64>>>) -> AttentionRecord {
        AttentionRecord {
            text: vec![],
            visual,
            combined: vec![],
        }
    }

    #[test]
    fn sparsity_examples() {
        let s = attention_sparsity_stats(&[record(Some(vec![vec![1.0, 0.0], vec![0.5, 0.5]]))]).unwrap();
        assert_eq!((s.mean_max, s.std_max), (0.75, 0.25));
        let s = attention_sparsity_stats(&[record(Some(vec![vec![0.0, 1.0, 0.0]; 3]))]).unwrap();
        assert_eq!((s.mean_max, s.std_max), (1.0, 0.0));
        let s = attention_sparsity_stats(&[record(Some(vec![vec![0.25; 4]; 2]))]).unwrap();
        assert_eq!((s.mean_max, s.std_max), (0.25, 0.0));
        assert!(matches!(attention_sparsity_stats(&[record(None)]), Err(Error::NoVisualAttention)));
    }

    proptest! {
        #[test]
        fn bleu_is_permutation_invariant(
            pairs in prop::collection::vec((prop::collection::vec(0u8..6, 1..9), prop::collection::vec(0u8..6, 1..9)), 1..8),
            rot in 0usize..8,
        ) {
            let to = |v: &Vec<u8>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            let h: Vec<_> = pairs.iter().map(|p| to(&p.0)).collect();
            let r: Vec<_> = pairs.iter().map(|p| to(&p.1)).collect();
            let a = corpus_bleu(&h, &r).unwrap();
            let k = rot % h.len();
            let (mut h2, mut r2) = (h.clone(), r.clone());
            h2.rotate_left(k);
            r2.rotate_left(k);
            let b = corpus_bleu(&h2, &r2).unwrap();
            prop_assert_eq!(a.precisions, b.precisions);
            prop_assert!((a.bleu - b.bleu).abs() < 1e-12);
            prop_assert!((0.0..=100.0).contains(&a.bleu));
        }

        #[test]
        fn bleu_of_itself_is_100(h in prop::collection::vec(prop::collection::vec(0u8..20, 4..12), 1..5)) {
            let h: Vec<Vec<String>> = h.iter().map(|v| v.iter().map(|x| x.to_string()).collect()).collect();
            prop_assert_eq!(corpus_bleu(&h, &h).unwrap().bleu, 100.0);
        }
    }
}
