//! Randomized sweeps over the structural invariants of masking, grouping,
//! the curriculum, batch construction and decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saic_core::decoding::{decode_saic, DecodeConfig};
use saic_core::masks::{
    expand_with_masks, extract_leaders, group_mask_rate, mask_hypothesis, AttentionMask, MaskStrategy,
};
use saic_core::model::SceneFeatures;
use saic_core::nn::Tensor;
use saic_core::tokens::{TokenId, EOS, FIRST_WORD, MASK};
use saic_core::training::{build_training_batch, CurriculumSchedule, ExampleKind, TrainPair};

use super::{random_instance, Check};

fn random_words(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.random_range(FIRST_WORD..FIRST_WORD + 20))
        .collect()
}

pub fn mask_counts(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..cases {
        let n = rng.random_range(1..=30);
        let s = random_words(&mut rng, n);
        let p: f64 = rng.random_range(0.01..=1.0);
        let k = rng.random_range(1..=8);
        for strategy in [
            MaskStrategy::Head,
            MaskStrategy::Tail,
            MaskStrategy::Random,
            MaskStrategy::Group { k },
        ] {
            let m = mask_hypothesis(&s, strategy, p, &mut rng).map_err(|e| e.to_string())?;
            let want: Vec<usize> = match strategy {
                MaskStrategy::Group { k } => (0..n).filter(|i| i % k != 0).collect(),
                _ => {
                    let count = ((n as f64 * p).floor() as usize).max(1).min(n);
                    match strategy {
                        MaskStrategy::Head => (0..count).collect(),
                        MaskStrategy::Tail => (n - count..n).collect(),
                        _ => {
                            ensure!(
                                m.masked_positions.len() == count,
                                "random masked {} of {n} at p={p}",
                                m.masked_positions.len()
                            );
                            m.masked_positions.clone()
                        }
                    }
                }
            };
            ensure!(
                m.masked_positions == want,
                "{strategy} on n={n}, p={p}: {:?}",
                m.masked_positions
            );
            ensure!(
                m.masked_positions.windows(2).all(|w| w[0] < w[1]) && m.masked_positions.iter().all(|&i| i < n),
                "{strategy}: positions not sorted and in range"
            );
            ensure!(m.tokens.len() == n, "{strategy}: length changed");
            for (i, (&a, &b)) in s.iter().zip(&m.tokens).enumerate() {
                let masked = m.masked_positions.contains(&i);
                ensure!(
                    if masked { b == MASK } else { a == b },
                    "{strategy}: position {i} wrong"
                );
            }
        }
    }
    Ok(format!("{cases} sequences × 4 strategies"))
}

pub fn group_round_trip(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..cases {
        let k = rng.random_range(1..=8);
        let len = rng.random_range(1..=10);
        let leaders = random_words(&mut rng, len);
        let expanded = expand_with_masks(&leaders, k).map_err(|e| e.to_string())?;
        ensure!(expanded.len() == k * leaders.len(), "expanded length");
        ensure!(
            extract_leaders(&expanded, k).map_err(|e| e.to_string())? == leaders,
            "round trip k={k}"
        );
        ensure!(
            expanded.iter().enumerate().all(|(i, &t)| (i % k == 0) == (t != MASK)),
            "masks not at non-leader positions"
        );
    }
    for k in 1..=64 {
        let p = group_mask_rate(k).map_err(|e| e.to_string())?;
        ensure!((p - (1.0 - 1.0 / k as f64)).abs() < 1e-15, "p_mask({k}) = {p}");
        let n = 4 * k;
        let m = mask_hypothesis(&vec![FIRST_WORD; n], MaskStrategy::Group { k }, 0.5, &mut rng).unwrap();
        ensure!(
            (m.masked_positions.len() as f64 / n as f64 - p).abs() < 1e-12,
            "group k={k} masks {} of {n}",
            m.masked_positions.len()
        );
    }
    Ok(format!("{cases} round trips, p_mask(k) for k=1..64"))
}

pub fn curriculum_shape() -> Check {
    for total in [1u64, 2, 7, 100, 2999] {
        for lambda in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let s = CurriculumSchedule::new(total, lambda).map_err(|e| e.to_string())?;
            ensure!(
                s.rate(0) == 0.0 && s.rate(total) == 1.0,
                "endpoints at T={total}, λ={lambda}"
            );
            let mut prev = 0.0;
            for t in 0..=total + 3 {
                let r = s.rate(t);
                ensure!(
                    (0.0..=1.0).contains(&r) && r >= prev,
                    "not monotone at t={t}, T={total}, λ={lambda}"
                );
                prev = r;
            }
        }
    }
    ensure!(CurriculumSchedule::new(0, 1.0).is_err(), "T=0 accepted");
    ensure!(CurriculumSchedule::new(5, 0.0).is_err(), "λ=0 accepted");
    Ok("25 schedules".into())
}

pub fn batch_split_counts(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let feat = SceneFeatures::new(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
    for _ in 0..cases {
        let b = rng.random_range(1..=40);
        let p_g: f64 = rng.random_range(0.0..=1.0);
        let pairs: Vec<TrainPair> = (0..b)
            .map(|id| TrainPair {
                id,
                features: feat.clone(),
                raw: random_words(&mut rng, 5),
                distilled: Some(random_words(&mut rng, 4)),
            })
            .collect();
        let refs: Vec<&TrainPair> = pairs.iter().collect();
        let batch = build_training_batch(&refs, p_g, 0.5, &mut rng).map_err(|e| e.to_string())?;
        let group_pairs = (b as f64 * p_g).round() as usize;
        let count = |k: ExampleKind| batch.iter().filter(|e| e.kind == k).count();
        ensure!(batch.len() == 2 * b, "B={b}: {} examples", batch.len());
        ensure!(
            count(ExampleKind::Outliner) == group_pairs
                && count(ExampleKind::Filler) == group_pairs
                && count(ExampleKind::Aic) == b - group_pairs
                && count(ExampleKind::Naic) == b - group_pairs,
            "B={b}, p_g={p_g}: wrong kind counts"
        );
        for pair in 0..b {
            let ex: Vec<_> = batch.iter().filter(|e| e.pair == pair).collect();
            ensure!(
                ex.len() == 2 && ex[0].chosen == ex[1].chosen,
                "pair {pair} examples disagree"
            );
        }
    }
    Ok(format!("{cases} batches"))
}

pub fn beam_constraint() -> Check {
    let (model, mem) = random_instance(5, 8, 1);
    for m_out in 0..6 {
        for m_fill in 0..6 {
            let cfg = DecodeConfig {
                m_out,
                m_fill,
                ..DecodeConfig::default()
            };
            let ok = m_fill >= 1 && m_out >= m_fill;
            ensure!(cfg.validate().is_ok() == ok, "config m_out={m_out}, m_fill={m_fill}");
            ensure!(
                decode_saic(&model, &mem, 2, m_out, m_fill, 6).is_ok() == ok,
                "decoder m_out={m_out}, m_fill={m_fill}"
            );
        }
    }
    Ok("36 beam pairs".into())
}

/// The filled sequence has `k` slots per outline word before truncation.
pub fn fill_length(cases: u64) -> Check {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, mem) = random_instance(50_000 + seed, rng.random_range(6..=12), 1);
        let k = rng.random_range(1..=5);
        let m_out = rng.random_range(1..=3);
        let h = decode_saic(
            &model,
            &mem,
            k,
            m_out,
            rng.random_range(1..=m_out),
            rng.random_range(1..=16),
        )
        .map_err(|e| e.to_string())?;
        let n_out = h.leaders.iter().take_while(|&&t| t != EOS).count();
        ensure!(
            h.raw.len() == k * n_out,
            "seed {seed}: {} filled for {n_out} leaders, k={k}",
            h.raw.len()
        );
        ensure!(
            h.tokens.len() <= h.raw.len() && !h.tokens.contains(&EOS),
            "seed {seed}: bad truncation"
        );
    }
    Ok(format!("{cases} decodes"))
}

/// Changing later inputs leaves earlier causal outputs untouched.
pub fn causality(cases: u64) -> Check {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(60_000 + seed);
        let vocab = 10;
        let (model, mem) = random_instance(60_000 + seed, vocab, 2);
        let n = rng.random_range(2..=12);
        let input: Vec<TokenId> = (0..n).map(|_| rng.random_range(1..vocab as TokenId)).collect();
        let cut = rng.random_range(0..n - 1);
        let mut changed = input.clone();
        for t in &mut changed[cut + 1..] {
            *t = rng.random_range(1..vocab as TokenId);
        }
        let mask = AttentionMask::causal(n).unwrap();
        let a = model.decoder_forward(&input, &mem, &mask).unwrap();
        let b = model.decoder_forward(&changed, &mem, &mask).unwrap();
        for i in 0..=cut {
            ensure!(
                a.row(i) == b.row(i),
                "seed {seed}: row {i} changed by edits after {cut}"
            );
        }
    }
    Ok(format!("{cases} perturbations"))
}

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("mask counts", mask_counts(500)),
        ("group round trip", group_round_trip(500)),
        ("curriculum", curriculum_shape()),
        ("batch split", batch_split_counts(300)),
        ("beam constraint", beam_constraint()),
        ("fill length", fill_length(200)),
        ("causality", causality(100)),
    ]
}
