//! Caption quality metrics.
//!
//! BLEU uses clipped n-gram precisions and the brevity penalty against the
//! reference length closest to the candidate's. Orders longer than the
//! candidate are left out of the geometric mean, and a zero precision is
//! replaced by `1e-9`.

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::tokens::TokenId;

pub const ZERO_PRECISION: f64 = 1e-9;

fn ngram_counts(s: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for g in s.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, candidate n-grams)` for each order `1..=max_n`.
fn clipped(candidate: &[TokenId], references: &[Vec<TokenId>], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n)
        .map(|n| {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[TokenId], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let matched = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            (matched, candidate.len().saturating_sub(n - 1))
        })
        .collect()
}

fn closest_ref_len(c: usize, references: &[Vec<TokenId>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn combine(stats: &[(usize, usize)], c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let used: Vec<f64> = stats
        .iter()
        .filter(|&&(_, total)| total > 0)
        .map(|&(m, total)| {
            let p = m as f64 / total as f64;
            if p > 0.0 {
                p
            } else {
                ZERO_PRECISION
            }
        })
        .collect();
    let log_mean = used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_mean.exp()
}

/// Sentence BLEU of `candidate` against `references`.
pub fn bleu(candidate: &[TokenId], references: &[Vec<TokenId>], max_n: usize) -> f64 {
    let stats = clipped(candidate, references, max_n);
    combine(&stats, candidate.len(), closest_ref_len(candidate.len(), references))
}

/// Corpus BLEU: counts and lengths pooled over all pairs before combining.
pub fn corpus_bleu(candidates: &[Vec<TokenId>], references: &[Vec<Vec<TokenId>>], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return contract("candidate and reference counts differ");
    }
    let mut stats = vec![(0, 0); max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        for (acc, s) in stats.iter_mut().zip(clipped(cand, refs, max_n)) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    Ok(combine(&stats, c, r))
}

/// Fraction of adjacent token pairs that repeat, pooled over `outputs`.
pub fn repetition_rate(outputs: &[Vec<TokenId>]) -> f64 {
    let (mut dup, mut pairs) = (0usize, 0usize);
    for s in outputs {
        for w in s.windows(2) {
            pairs += 1;
            dup += (w[0] == w[1]) as usize;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        dup as f64 / pairs as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub exact_match: f64,
    /// Corpus BLEU-4 in `[0, 1]`.
    pub bleu4: f64,
    pub repetition_rate: f64,
    pub mean_length: f64,
}

/// Scores `outputs` against single references.
pub fn evaluate(outputs: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<EvalReport> {
    if outputs.is_empty() {
        return contract("nothing to evaluate");
    }
    if outputs.len() != references.len() {
        return contract("output and reference counts differ");
    }
    let n = outputs.len() as f64;
    let exact = outputs.iter().zip(references).filter(|(o, r)| o == r).count();
    let refs: Vec<Vec<Vec<TokenId>>> = references.iter().map(|r| vec![r.clone()]).collect();
    Ok(EvalReport {
        exact_match: exact as f64 / n,
        bleu4: corpus_bleu(outputs, &refs, 4)?,
        repetition_rate: repetition_rate(outputs),
        mean_length: outputs.iter().map(Vec::len).sum::<usize>() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook BLEU written out for one reference, as an independent check.
    fn oracle(c: &[TokenId], r: &[TokenId]) -> f64 {
        let mut logs = Vec::new();
        for n in 1..=4 {
            if c.len() < n {
                continue;
            }
            let cg: Vec<&[TokenId]> = c.windows(n).collect();
            let mut rg: Vec<&[TokenId]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
            let mut m = 0;
            for g in &cg {
                if let Some(i) = rg.iter().position(|x| x == g) {
                    rg.remove(i);
                    m += 1;
                }
            }
            let p = m as f64 / cg.len() as f64;
            logs.push(if m == 0 { 1e-9f64.ln() } else { p.ln() });
        }
        let bp = if c.len() >= r.len() {
            1.0
        } else {
            (1.0 - r.len() as f64 / c.len() as f64).exp()
        };
        bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&[4, 5, 6, 7], &[vec![4, 5, 6, 7]], 4), 1.0);
        assert!(bleu(&[4, 5], &[vec![6, 7, 8]], 4) < 1e-8);
        assert_eq!(bleu(&[], &[vec![6, 7, 8]], 4), 0.0);
        let b = bleu(&[4, 5, 6, 7], &[vec![4, 5, 6, 7, 8]], 4);
        assert!((b - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!((b - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn repetition_example() {
        assert_eq!(repetition_rate(&[vec![4, 4, 5]]), 0.5);
        assert_eq!(repetition_rate(&[vec![4]]), 0.0);
    }

    #[test]
    fn evaluate_limits() {
        let refs = vec![vec![4, 5, 6], vec![7, 8, 9, 10]];
        let r = evaluate(&refs, &refs).unwrap();
        assert_eq!((r.exact_match, r.bleu4), (1.0, 1.0));
        assert_eq!(r.mean_length, 3.5);
        let r = evaluate(&[vec![], vec![]], &refs).unwrap();
        assert_eq!((r.exact_match, r.bleu4), (0.0, 0.0));
        assert!(evaluate(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn bleu_matches_textbook_oracle(
            c in proptest::collection::vec(4u32..9, 1..10),
            r in proptest::collection::vec(4u32..9, 1..10),
        ) {
            let got = bleu(&c, std::slice::from_ref(&r), 4);
            prop_assert!((got - oracle(&c, &r)).abs() < 1e-12);
        }

        #[test]
        fn bleu_ignores_reference_order(
            c in proptest::collection::vec(4u32..9, 1..10),
            r1 in proptest::collection::vec(4u32..9, 1..10),
            r2 in proptest::collection::vec(4u32..9, 1..10),
        ) {
            let a = bleu(&c, &[r1.clone(), r2.clone()], 4);
            let b = bleu(&c, &[r2, r1], 4);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn bleu_is_one_exactly_on_match(
            c in proptest::collection::vec(4u32..12, 1..12),
            r in proptest::collection::vec(4u32..12, 1..12),
        ) {
            prop_assert_eq!(bleu(&c, std::slice::from_ref(&c), 4), 1.0);
            if c != r {
                prop_assert!(bleu(&c, &[r], 4) < 1.0);
            }
        }
    }
}
