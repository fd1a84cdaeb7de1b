//! Masking-strategy experiment: how well a filler repairs teacher hypotheses
//! when different parts of them are hidden.
//!
//! Each test hypothesis (teacher beam search) has some words replaced by
//! `[mask]`; the filler predicts them in one parallel pass and the repaired
//! captions are scored against the references. The hypothesis is followed by
//! the same tail the filler sees in training: an `[eos]` slot and `[mask]`
//! padding up to a multiple of the filler's group size, with `[eos]` visible
//! only when it falls on a group leader. Only masked word positions are
//! predicted.

use rand_chacha::ChaCha8Rng;

use crate::decoding::{decode_aic, refine, top_joint_fills};
use crate::error::{contract, Result};
use crate::masks::{mask_hypothesis, MaskStrategy};
use crate::metrics::evaluate;
use crate::model::{InferenceModel, Memory, SceneFeatures};
use crate::nn::Scalar;
use crate::seed::rng_for;
use crate::tokens::{truncate_at_eos, TokenId, EOS, MASK};

/// Teacher beam used to produce the hypotheses that get masked.
pub const HYPOTHESIS_BEAM: usize = 5;

/// Strategy families compared by the experiment, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFamily {
    Head,
    Tail,
    Random,
    Group,
}

impl MaskFamily {
    pub const ALL: [MaskFamily; 4] = [
        MaskFamily::Head,
        MaskFamily::Tail,
        MaskFamily::Random,
        MaskFamily::Group,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskFamily::Head => "head",
            MaskFamily::Tail => "tail",
            MaskFamily::Random => "random",
            MaskFamily::Group => "group",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .map_or_else(|| contract(format!("unknown masking strategy {s:?}")), Ok)
    }
}

/// Group size whose mask rate `1 − 1/k` is the smallest one at or above `p`.
pub fn group_size_for(p_mask: f64) -> Result<usize> {
    if !(p_mask > 0.0 && p_mask < 1.0) {
        return contract(format!("group masking rate {p_mask} outside (0, 1)"));
    }
    Ok(((1.0 / (1.0 - p_mask)) - 1e-9).ceil().max(1.0) as usize)
}

/// `0.1, 0.2, ..., 0.9`.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskExpConfig {
    pub families: Vec<MaskFamily>,
    pub grid: Vec<f64>,
    /// Number of random-masking repetitions averaged per grid point.
    pub random_runs: usize,
    /// Group size the filler was trained with; sets the tail layout.
    pub filler_k: usize,
    pub seed: u64,
}

impl Default for MaskExpConfig {
    fn default() -> Self {
        MaskExpConfig {
            families: MaskFamily::ALL.to_vec(),
            grid: default_grid(),
            random_runs: 4,
            filler_k: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskExpRow {
    pub family: MaskFamily,
    pub p_mask: f64,
    /// The rate actually applied; differs from `p_mask` for group masking.
    pub effective_p: f64,
    pub bleu4: f64,
    pub exact_match: f64,
}

impl MaskExpRow {
    pub const HEADER: &'static str = "strategy\tp_mask\teffective_p\tbleu4\texact_match";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.2}\t{:.4}\t{:.4}\t{:.4}",
            self.family.name(),
            self.p_mask,
            self.effective_p,
            self.bleu4,
            self.exact_match
        )
    }
}

/// Tab-separated result table with header.
pub fn mask_table(rows: &[MaskExpRow]) -> String {
    let mut out = format!("{}\n", MaskExpRow::HEADER);
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// One block per strategy (`# <name>` then `p_mask bleu4` lines), blocks
/// separated by a blank line.
pub fn plot_data(rows: &[MaskExpRow]) -> String {
    let mut out = String::new();
    for fam in MaskFamily::ALL {
        let series: Vec<&MaskExpRow> = rows.iter().filter(|r| r.family == fam).collect();
        if series.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("# {}\n", fam.name()));
        for r in series {
            out.push_str(&format!("{:.2}\t{:.6}\n", r.p_mask, r.bleu4));
        }
    }
    out
}

/// Beam-5 teacher hypotheses, one per scene.
pub fn teacher_hypotheses<T: Scalar>(
    teacher: &InferenceModel<T>,
    scenes: &[&SceneFeatures],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>> {
    scenes
        .iter()
        .map(|f| Ok(decode_aic(teacher, &teacher.encode(f)?, beam, max_len)?.tokens))
        .collect()
}

/// Filler input for `hyp` with `masked` word positions hidden.
pub fn filler_input(hyp: &[TokenId], masked: &[usize], k: usize) -> Vec<TokenId> {
    let n = hyp.len();
    let total = (n + 1).div_ceil(k) * k;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(hyp);
    for &p in masked {
        out[p] = MASK;
    }
    out.push(if n.is_multiple_of(k) { EOS } else { MASK });
    out.resize(total, MASK);
    out
}

/// Fills the masked words of `hyp`: the `beam` best joint fills of one
/// pass, each refined for `iterations − 1` more mask-predict passes, best
/// total kept. Returns the caption up to the first `[eos]`.
pub fn repair<T: Scalar>(
    filler: &InferenceModel<T>,
    mem: &Memory<T>,
    hyp: &[TokenId],
    masked: &[usize],
    k: usize,
    beam: usize,
    iterations: usize,
) -> Result<Vec<TokenId>> {
    if masked.is_empty() {
        return Ok(hyp.to_vec());
    }
    let input = filler_input(hyp, masked, k);
    let mut best: Option<(f64, Vec<TokenId>)> = None;
    for f in top_joint_fills(filler, mem, &input, masked, beam)? {
        let f = refine(filler, mem, f, iterations)?;
        let s = f.score();
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, f.tokens));
        }
    }
    let tokens = best.map(|(_, t)| t).unwrap_or_default();
    Ok(truncate_at_eos(&tokens[..hyp.len()]).to_vec())
}

/// Scenes encoded by the filler, their teacher hypotheses and references.
pub struct ExperimentInputs<T: Scalar = f32> {
    pub memories: Vec<Memory<T>>,
    pub hypotheses: Vec<Vec<TokenId>>,
    pub references: Vec<Vec<TokenId>>,
}

impl<T: Scalar> ExperimentInputs<T> {
    pub fn new(
        filler: &InferenceModel<T>,
        scenes: &[&SceneFeatures],
        hypotheses: Vec<Vec<TokenId>>,
        references: Vec<Vec<TokenId>>,
    ) -> Result<Self> {
        if scenes.is_empty() || scenes.len() != hypotheses.len() || scenes.len() != references.len() {
            return contract("scenes, hypotheses and references must be non-empty and aligned");
        }
        let memories = scenes.iter().map(|f| filler.encode(f)).collect::<Result<_>>()?;
        Ok(ExperimentInputs {
            memories,
            hypotheses,
            references,
        })
    }
}

/// Repairs every hypothesis under one masking setting and scores the result.
fn score_setting<T: Scalar>(
    filler: &InferenceModel<T>,
    inputs: &ExperimentInputs<T>,
    strategy: MaskStrategy,
    p_mask: f64,
    k: usize,
    (beam, iterations): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut outputs = Vec::with_capacity(inputs.hypotheses.len());
    for (hyp, mem) in inputs.hypotheses.iter().zip(&inputs.memories) {
        if hyp.is_empty() {
            outputs.push(Vec::new());
            continue;
        }
        let m = mask_hypothesis(hyp, strategy, p_mask, rng)?;
        outputs.push(repair(filler, mem, hyp, &m.masked_positions, k, beam, iterations)?);
    }
    let report = evaluate(&outputs, &inputs.references)?;
    Ok((report.bleu4, report.exact_match))
}

/// The strategy × rate table. Head, tail and random mask
/// `max(1, floor(n · p))` words; group masking at rate `p` uses
/// [`group_size_for`] and reports the resulting rate. Random rows average
/// `random_runs` independently seeded repetitions.
pub fn run_masking_experiment<T: Scalar>(
    filler: &InferenceModel<T>,
    inputs: &ExperimentInputs<T>,
    cfg: &MaskExpConfig,
) -> Result<Vec<MaskExpRow>> {
    if cfg.filler_k == 0 || cfg.random_runs == 0 {
        return contract("filler group size and random runs must be at least 1");
    }
    let mut rows = Vec::with_capacity(cfg.families.len() * cfg.grid.len());
    for &family in &cfg.families {
        for (gi, &p) in cfg.grid.iter().enumerate() {
            let (strategy, effective_p, runs) = match family {
                MaskFamily::Head => (MaskStrategy::Head, p, 1),
                MaskFamily::Tail => (MaskStrategy::Tail, p, 1),
                MaskFamily::Random => (MaskStrategy::Random, p, cfg.random_runs),
                MaskFamily::Group => {
                    let k = group_size_for(p)?;
                    (MaskStrategy::Group { k }, 1.0 - 1.0 / k as f64, 1)
                }
            };
            let (mut bleu4, mut exact) = (0.0, 0.0);
            for run in 0..runs {
                let label = format!("mask-exp/{}/{gi}/{run}", family.name());
                let mut rng = rng_for(cfg.seed, &label);
                let (b, e) = score_setting(filler, inputs, strategy, p, cfg.filler_k, (1, 1), &mut rng)?;
                bleu4 += b;
                exact += e;
            }
            rows.push(MaskExpRow {
                family,
                p_mask: p,
                effective_p,
                bleu4: bleu4 / runs as f64,
                exact_match: exact / runs as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineRow {
    pub beam: usize,
    pub iterations: usize,
    pub bleu4: f64,
    pub exact_match: f64,
}

impl RefineRow {
    pub const HEADER: &'static str = "beam\titerations\tbleu4\texact_match";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.4}\t{:.4}",
            self.beam, self.iterations, self.bleu4, self.exact_match
        )
    }
}

/// Group masking with group size `k` repaired under each (beam, iterations)
/// setting.
pub fn run_refinement_check<T: Scalar>(
    filler: &InferenceModel<T>,
    inputs: &ExperimentInputs<T>,
    k: usize,
    settings: &[(usize, usize)],
) -> Result<Vec<RefineRow>> {
    settings
        .iter()
        .map(|&(beam, iterations)| {
            let (bleu4, exact_match) = score_setting(
                filler,
                inputs,
                MaskStrategy::Group { k },
                0.0,
                k,
                (beam, iterations),
                &mut rng_for(0, "refine-check"),
            )?;
            Ok(RefineRow {
                beam,
                iterations,
                bleu4,
                exact_match,
            })
        })
        .collect()
}
