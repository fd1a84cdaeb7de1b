//! Exhaustive enumeration oracles for the beam decoders on tiny vocabularies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saic_core::decoding::{decode_aic, decode_saic};
use saic_core::masks::AttentionMask;
use saic_core::model::{InferenceModel, Memory};
use saic_core::tokens::{TokenId, BOG, EOS, FIRST_WORD, MASK};

use super::{random_instance, Check};

const TIE: f64 = 1e-9;

/// Natural-log softmax written out directly.
fn log_probs(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn words(vocab: usize) -> Vec<TokenId> {
    (FIRST_WORD..vocab as TokenId).collect()
}

/// Every word sequence of length exactly `len`.
fn word_sequences(vocab: usize, len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                words(vocab).into_iter().map(move |w| {
                    let mut t = s.clone();
                    t.push(w);
                    t
                })
            })
            .collect();
    }
    out
}

/// Teacher-forced log-probability of `seq` under the causal decoder.
fn causal_score(model: &InferenceModel<f64>, mem: &Memory<f64>, seq: &[TokenId]) -> f64 {
    let mut input = vec![BOG];
    input.extend_from_slice(&seq[..seq.len() - 1]);
    let logits = model
        .decoder_forward(&input, mem, &AttentionMask::causal(input.len()).unwrap())
        .unwrap();
    seq.iter()
        .enumerate()
        .map(|(i, &t)| log_probs(logits.row(i))[t as usize])
        .sum()
}

/// Highest-scoring `w… [eos]` with at most `max_len` tokens.
pub fn exhaustive_aic(
    model: &InferenceModel<f64>,
    mem: &Memory<f64>,
    vocab: usize,
    max_len: usize,
) -> (Vec<TokenId>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for len in 0..max_len {
        for mut s in word_sequences(vocab, len) {
            s.push(EOS);
            let score = causal_score(model, mem, &s);
            if score > best.1 {
                best = (s, score);
            }
        }
    }
    best
}

/// One two-stage candidate: outline, filled sequence, total, terminated.
#[derive(Clone, Debug)]
pub struct TwoStage {
    pub leaders: Vec<TokenId>,
    pub raw: Vec<TokenId>,
    pub total: f64,
    pub terminated: bool,
}

/// All outlines of at most `ceil(max_len / k)` tokens, each completed by the
/// per-position argmax fill.
pub fn two_stage_candidates(
    model: &InferenceModel<f64>,
    mem: &Memory<f64>,
    vocab: usize,
    max_len: usize,
    k: usize,
) -> Vec<TwoStage> {
    let steps = max_len.div_ceil(k);
    let mut outlines = Vec::new();
    for len in 0..steps {
        for mut s in word_sequences(vocab, len) {
            s.push(EOS);
            outlines.push(s);
        }
    }
    outlines.extend(word_sequences(vocab, steps));
    outlines
        .into_iter()
        .map(|leaders| {
            let outline = causal_score(model, mem, &leaders);
            let body: Vec<TokenId> = leaders.iter().copied().take_while(|&t| t != EOS).collect();
            let ended = leaders.last() == Some(&EOS);
            if body.is_empty() {
                return TwoStage {
                    leaders,
                    raw: Vec::new(),
                    total: outline,
                    terminated: ended,
                };
            }
            let mut raw = Vec::new();
            for &l in &body {
                raw.push(l);
                raw.extend(std::iter::repeat_n(MASK, k - 1));
            }
            let mut fill = 0.0;
            if k > 1 {
                let logits = model
                    .decoder_forward(&raw, mem, &AttentionMask::full(raw.len()).unwrap())
                    .unwrap();
                for i in (0..raw.len()).filter(|i| i % k != 0) {
                    let lp = log_probs(logits.row(i));
                    let mut pick = (EOS, lp[EOS as usize]);
                    for w in words(vocab) {
                        if lp[w as usize] > pick.1 {
                            pick = (w, lp[w as usize]);
                        }
                    }
                    raw[i] = pick.0;
                    fill += pick.1;
                }
            }
            let terminated = ended || raw.contains(&EOS);
            TwoStage {
                leaders,
                raw,
                total: outline + fill,
                terminated,
            }
        })
        .collect()
}

/// Terminated candidates first, then by total.
fn preferred(a: (bool, f64), b: (bool, f64)) -> bool {
    (a.0 && !b.0) || (a.0 == b.0 && a.1 > b.1)
}

/// Covering-width autoregressive beam search matches enumeration.
pub fn aic_matches_enumeration(cases: u64) -> Check {
    let mut checked = 0;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.random_range(5..=6);
        let max_len = rng.random_range(1..=8);
        let (model, mem) = random_instance(seed, vocab, rng.random_range(1..=2));
        let (want, score) = exhaustive_aic(&model, &mem, vocab, max_len);
        let cover = (vocab - FIRST_WORD as usize + 1).pow(max_len as u32);
        let got = decode_aic(&model, &mem, cover, max_len).map_err(|e| e.to_string())?;
        ensure!(
            (got.total - score).abs() < TIE,
            "seed {seed}: beam score {} vs enumerated {score}",
            got.total
        );
        ensure!(
            got.raw == want,
            "seed {seed}: beam {:?} vs enumerated {want:?}",
            got.raw
        );
        checked += 1;
    }
    // Five words, four steps, beam 25.
    for seed in 0..cases {
        let (model, mem) = random_instance(10_000 + seed, 9, 1);
        let (want, score) = exhaustive_aic(&model, &mem, 9, 4);
        let got = decode_aic(&model, &mem, 25, 4).map_err(|e| e.to_string())?;
        ensure!(
            got.raw == want && (got.total - score).abs() < TIE,
            "five-word seed {seed}: beam {:?} ({}) vs enumerated {want:?} ({score})",
            got.raw,
            got.total
        );
        checked += 1;
    }
    Ok(format!("{checked} instances"))
}

/// Two-stage beam search never beats enumeration and matches it once the
/// outliner beam covers every outline.
pub fn saic_matches_enumeration(cases: u64) -> Check {
    let mut exact = 0;
    let mut below = 0;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
        let vocab = rng.random_range(5..=6);
        let k = rng.random_range(2..=4);
        let max_len = rng.random_range(k..=8);
        let (model, mem) = random_instance(20_000 + seed, vocab, rng.random_range(1..=2));
        let cands = two_stage_candidates(&model, &mem, vocab, max_len, k);
        let best = cands
            .iter()
            .fold(None::<&TwoStage>, |b, c| match b {
                Some(b) if !preferred((c.terminated, c.total), (b.terminated, b.total)) => Some(b),
                _ => Some(c),
            })
            .unwrap();
        let unconstrained = cands.iter().map(|c| c.total).fold(f64::NEG_INFINITY, f64::max);

        let small = decode_saic(&model, &mem, k, 4, 4, max_len).map_err(|e| e.to_string())?;
        ensure!(
            small.total <= unconstrained + TIE
                && !preferred((small.terminated, small.total - TIE), (best.terminated, best.total)),
            "seed {seed}: beam 4 result ({}, {}) beats enumeration ({}, {})",
            small.terminated,
            small.total,
            best.terminated,
            best.total
        );
        if (small.total - best.total).abs() < TIE {
            exact += 1;
        } else {
            below += 1;
        }

        let cover = cands.len();
        let got = decode_saic(&model, &mem, k, cover, cover, max_len).map_err(|e| e.to_string())?;
        ensure!(
            (got.total - best.total).abs() < TIE && got.terminated == best.terminated,
            "seed {seed} (k={k}, max_len={max_len}): covering beam {} vs enumerated {}",
            got.total,
            best.total
        );
        ensure!(
            got.raw == best.raw,
            "seed {seed}: covering beam {:?} vs enumerated {:?}",
            got.raw,
            best.raw
        );
        let recomputed = cands.iter().find(|c| c.leaders == got.leaders).map(|c| c.total);
        ensure!(
            recomputed.is_some_and(|t| (t - got.total).abs() < TIE),
            "seed {seed}: outline {:?} rescored to {recomputed:?}, beam reported {}",
            got.leaders,
            got.total
        );
    }
    Ok(format!(
        "{cases} instances; beam 4 optimal on {exact}, below optimum on {below}"
    ))
}

/// Unit groups reduce the two-stage decoder to greedy decoding.
pub fn unit_groups_equal_greedy(cases: u64) -> Check {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
        let vocab = rng.random_range(5..=12);
        let max_len = rng.random_range(1..=12);
        let (model, mem) = random_instance(30_000 + seed, vocab, rng.random_range(1..=2));
        let aic = decode_aic(&model, &mem, 1, max_len).map_err(|e| e.to_string())?;
        let saic = decode_saic(&model, &mem, 1, 1, 1, max_len).map_err(|e| e.to_string())?;
        ensure!(
            aic.tokens == saic.tokens,
            "seed {seed}: greedy {:?} vs unit groups {:?}",
            aic.tokens,
            saic.tokens
        );
        // Independent argmax chain.
        let mut chain = Vec::new();
        while chain.len() < max_len && chain.last() != Some(&EOS) {
            let mut input = vec![BOG];
            input.extend_from_slice(&chain);
            let logits = model
                .decoder_forward(&input, &mem, &AttentionMask::causal(input.len()).unwrap())
                .unwrap();
            let lp = log_probs(logits.row(input.len() - 1));
            let mut pick = EOS;
            for w in words(vocab) {
                if lp[w as usize] > lp[pick as usize] {
                    pick = w;
                }
            }
            chain.push(pick);
        }
        ensure!(
            chain == aic.raw,
            "seed {seed}: argmax chain {chain:?} vs greedy {:?}",
            aic.raw
        );
    }
    Ok(format!("{cases} random models and scenes"))
}

/// How often a wider beam ends with a less preferred result (terminated
/// first, then total score) than a narrower one.
pub fn beam_monotonicity(cases: u64, max_beam: usize) -> (usize, usize, Vec<String>) {
    let (mut checked, mut violations, mut examples) = (0, 0, Vec::new());
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + seed);
        let vocab = rng.random_range(5..=9);
        let max_len = rng.random_range(2..=8);
        let k = rng.random_range(1..=3);
        let (model, mem) = random_instance(40_000 + seed, vocab, 1);
        let mut prev: Option<[(bool, f64); 2]> = None;
        for m in 1..=max_beam {
            let aic = decode_aic(&model, &mem, m, max_len).unwrap();
            let saic = decode_saic(&model, &mem, k, m, m, max_len).unwrap();
            let now = [(aic.terminated, aic.total), (saic.terminated, saic.total)];
            if let Some(before) = prev {
                for (stage, b, a) in [("aic", before[0], now[0]), ("saic", before[1], now[1])] {
                    checked += 1;
                    if preferred(b, (a.0, a.1 + TIE)) {
                        violations += 1;
                        if examples.len() < 3 {
                            examples.push(format!("seed {seed} {stage} beam {}→{m}: {b:?}→{a:?}", m - 1));
                        }
                    }
                }
            }
            prev = Some(now);
        }
    }
    (checked, violations, examples)
}
