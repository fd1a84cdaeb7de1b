//! Turning caption pairs into the four kinds of training examples.

use std::fmt;

use rand::Rng;

use crate::error::{contract, Result};
use crate::masks::{expand_with_masks, extract_leaders, AttentionMask};
use crate::model::{decoder_logits_graph, encode_graph, ModelParams, SceneFeatures};
use crate::nn::{Graph, Var};
use crate::tokens::{TokenId, BOG, EOS, MASK, PAD};

use super::curriculum::hybrid_sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExampleKind {
    Aic,
    Naic,
    Outliner,
    Filler,
}

impl ExampleKind {
    pub const ALL: [ExampleKind; 4] = [
        ExampleKind::Aic,
        ExampleKind::Naic,
        ExampleKind::Outliner,
        ExampleKind::Filler,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExampleKind::Aic => "aic",
            ExampleKind::Naic => "naic",
            ExampleKind::Outliner => "outliner",
            ExampleKind::Filler => "filler",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ExampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A scene with its reference caption and, once distilled, the teacher's.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub id: usize,
    pub features: SceneFeatures,
    pub raw: Vec<TokenId>,
    pub distilled: Option<Vec<TokenId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// Index of the source pair within its batch.
    pub pair: usize,
    pub features: SceneFeatures,
    pub raw: Vec<TokenId>,
    pub distilled: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub kind: ExampleKind,
}

/// Decoder input, per-position targets (`[pad]` = unsupervised) and mask
/// shape for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub input: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub causal: bool,
}

/// `s + [eos]`, then `[pad]` up to a multiple of `k`.
pub fn pad_to_groups(s: &[TokenId], k: usize) -> Vec<TokenId> {
    let mut t = s.to_vec();
    t.push(EOS);
    let n = t.len().div_ceil(k) * k;
    t.resize(n, PAD);
    t
}

/// Outliner target: the leaders through the first `[eos]` leader, or all
/// leaders followed by `[eos]` when the caption ended inside a group.
pub fn outliner_target(s: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
    let leaders = extract_leaders(&pad_to_groups(s, k), k)?;
    Ok(match leaders.iter().position(|&t| t == EOS) {
        Some(p) => leaders[..=p].to_vec(),
        None => {
            let mut l = leaders;
            l.push(EOS);
            l
        }
    })
}

pub fn layout(kind: ExampleKind, s: &[TokenId], k: usize) -> Result<Layout> {
    if s.is_empty() {
        return contract("empty target caption");
    }
    if k == 0 {
        return contract("group size must be at least 1");
    }
    let mut with_eos = s.to_vec();
    with_eos.push(EOS);
    Ok(match kind {
        ExampleKind::Aic => {
            let mut input = vec![BOG];
            input.extend_from_slice(s);
            Layout {
                input,
                targets: with_eos,
                causal: true,
            }
        }
        ExampleKind::Naic => Layout {
            input: vec![MASK; with_eos.len()],
            targets: with_eos,
            causal: false,
        },
        ExampleKind::Outliner => {
            let targets = outliner_target(s, k)?;
            let mut input = vec![BOG];
            input.extend_from_slice(&targets[..targets.len() - 1]);
            Layout {
                input,
                targets,
                causal: true,
            }
        }
        ExampleKind::Filler => {
            let padded = pad_to_groups(s, k);
            let target = outliner_target(s, k)?;
            let body = &target[..target.len() - 1];
            let input = expand_with_masks(body, k)?;
            let mut targets = padded[..input.len()].to_vec();
            for t in targets.iter_mut().step_by(k) {
                *t = PAD;
            }
            if targets.iter().all(|&t| t == PAD) {
                return contract("filler example has no masked position to predict");
            }
            Layout {
                input,
                targets,
                causal: false,
            }
        }
    })
}

/// Builds `2B` examples from `B` pairs: the first `round(B · p_g)` pairs
/// yield an outliner and a filler example, the rest an autoregressive and a
/// parallel one. Each pair's target is drawn once by [`hybrid_sample`];
/// pairs without a usable distilled caption always use the raw one.
pub fn build_training_batch<R: Rng + ?Sized>(
    pairs: &[&TrainPair],
    p_g: f64,
    p_hybr: f64,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    if pairs.is_empty() {
        return contract("empty batch");
    }
    if !(0.0..=1.0).contains(&p_g) || !(0.0..=1.0).contains(&p_hybr) {
        return contract("p_g and p_hybr must lie in [0, 1]");
    }
    let group_aware = (pairs.len() as f64 * p_g).round() as usize;
    let mut out = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let distilled = match &p.distilled {
            Some(d) if !d.is_empty() => d.clone(),
            _ => p.raw.clone(),
        };
        let chosen = hybrid_sample(&p.raw, &distilled, p_hybr, rng).to_vec();
        let kinds = if i < group_aware {
            [ExampleKind::Outliner, ExampleKind::Filler]
        } else {
            [ExampleKind::Aic, ExampleKind::Naic]
        };
        for kind in kinds {
            out.push(TrainingExample {
                pair: i,
                features: p.features.clone(),
                raw: p.raw.clone(),
                distilled: distilled.clone(),
                chosen: chosen.clone(),
                kind,
            });
        }
    }
    Ok(out)
}

/// Records the mean cross-entropy of one example on `g`, given the encoded
/// scene `memory`.
pub fn loss_for(
    g: &mut Graph,
    params: &ModelParams,
    memory: Var,
    kind: ExampleKind,
    target: &[TokenId],
    k: usize,
) -> Result<Var> {
    let l = layout(kind, target, k)?;
    let n = l.input.len();
    let mask = if l.causal {
        AttentionMask::causal(n)?
    } else {
        AttentionMask::full(n)?
    };
    let logits = decoder_logits_graph(g, params, &l.input, memory, &mask)?;
    let targets: Vec<usize> = l.targets.iter().map(|&t| t as usize).collect();
    g.cross_entropy(logits, &targets, &[PAD as usize])
}

/// Loss value of one example, without gradients.
pub fn example_loss(params: &ModelParams, ex: &TrainingExample, k: usize) -> Result<f64> {
    let mut g = Graph::new();
    let mem = encode_graph(&mut g, params, &ex.features)?;
    let l = loss_for(&mut g, params, mem, ex.kind, &ex.chosen, k)?;
    Ok(g.value(l).data()[0])
}
