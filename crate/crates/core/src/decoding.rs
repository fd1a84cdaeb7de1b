//! Caption generation: autoregressive beam search, one-shot parallel
//! decoding, mask-predict refinement and the two-stage outline-then-fill
//! decoder.
//!
//! All scores are sums of natural-log probabilities taken from a softmax over
//! the whole vocabulary; candidate tokens are restricted to words and
//! `[eos]`. Ties are broken towards the lowest token id, then the lowest
//! position, then the earlier beam.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{contract, Error, Result};
use crate::masks::{expand_with_masks, AttentionMask};
use crate::model::{InferenceModel, Memory, SceneFeatures};
use crate::nn::{log_softmax, Scalar};
use crate::tokens::{is_emittable, truncate_at_eos, TokenId, BOG, EOS, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Aic,
    Naic,
    IrNaic,
    Saic,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Aic, Strategy::Naic, Strategy::IrNaic, Strategy::Saic];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Aic => "aic",
            Strategy::Naic => "naic",
            Strategy::IrNaic => "ir-naic",
            Strategy::Saic => "saic",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Strategy::Aic),
            "naic" => Ok(Strategy::Naic),
            "ir-naic" | "irnaic" => Ok(Strategy::IrNaic),
            "saic" => Ok(Strategy::Saic),
            _ => Err(Error::Format(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Where the parallel decoders get their target length from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthSource {
    /// Reference length plus one slot for `[eos]`.
    Oracle,
    /// A fixed length, typically the mean training length plus one.
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub k: usize,
    /// Beam of the outliner, or of plain autoregressive decoding.
    pub m_out: usize,
    /// Number of outliner hypotheses handed to the filler.
    pub m_fill: usize,
    pub iterations: usize,
    pub max_len: usize,
    pub length: LengthSource,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Saic,
            k: 4,
            m_out: 1,
            m_fill: 1,
            iterations: 1,
            max_len: 32,
            length: LengthSource::Oracle,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_fill == 0 || self.m_out < self.m_fill {
            return contract(format!(
                "beam sizes must satisfy m_out >= m_fill >= 1 (got m_out={}, m_fill={})",
                self.m_out, self.m_fill
            ));
        }
        if self.k == 0 || self.iterations == 0 || self.max_len == 0 {
            return contract("k, iterations and max_len must be at least 1");
        }
        if self.length == LengthSource::Fixed(0) {
            return contract("fixed target length must be at least 1");
        }
        Ok(())
    }
}

/// A decoded caption with its score decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// The caption: no `[eos]`, `[mask]` or `[bog]`.
    pub tokens: Vec<TokenId>,
    /// Sequence before truncation. For the two-stage decoder this is the
    /// filled `k · N_out` sequence.
    pub raw: Vec<TokenId>,
    /// Outliner output including its terminating `[eos]`; empty for the
    /// parallel decoders.
    pub leaders: Vec<TokenId>,
    pub outliner_logprob: f64,
    pub filler_logprob: f64,
    pub total: f64,
    /// False when the length limit was hit before any `[eos]`.
    pub terminated: bool,
    /// The outliner ended the caption before emitting a word.
    pub degenerate: bool,
}

/// Total score from the two stage scores.
pub fn score_hypothesis(outliner_logprob: f64, filler_logprob: f64) -> f64 {
    outliner_logprob + filler_logprob
}

fn truncate_caption(s: &[TokenId]) -> Vec<TokenId> {
    truncate_at_eos(s).to_vec()
}

fn argmax_candidate(lp: &[f64]) -> (TokenId, f64) {
    let mut best = (EOS, f64::NEG_INFINITY);
    for (t, &v) in lp.iter().enumerate() {
        let t = t as TokenId;
        if is_emittable(t) && v > best.1 {
            best = (t, v);
        }
    }
    best
}

/// An outliner or autoregressive beam entry.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamEntry {
    /// Emitted tokens, ending in `[eos]` when terminated.
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub terminated: bool,
}

fn by_score(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Length-bounded beam search over the causal decoder.
///
/// Each step expands every live entry by every candidate token and keeps the
/// best `beam` expansions; expansions ending in `[eos]` retire. The search
/// ends once `keep` retired entries outscore every live one, when nothing is
/// live, or after `max_steps` tokens. Returns retired entries best first,
/// followed by the surviving unterminated ones.
pub fn beam_search<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    beam: usize,
    keep: usize,
    max_steps: usize,
) -> Result<Vec<BeamEntry>> {
    if beam == 0 || keep == 0 || max_steps == 0 {
        return contract("beam, keep and max_steps must be at least 1");
    }
    let mut live = vec![BeamEntry {
        tokens: Vec::new(),
        score: 0.0,
        terminated: false,
    }];
    let mut finished: Vec<BeamEntry> = Vec::new();
    for _ in 0..max_steps {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (rank, h) in live.iter().enumerate() {
            let mut input = Vec::with_capacity(h.tokens.len() + 1);
            input.push(BOG);
            input.extend_from_slice(&h.tokens);
            let logits = model.decoder_forward(&input, mem, &AttentionMask::causal(input.len())?)?;
            let lp = log_softmax(logits.row(input.len() - 1));
            for (t, &v) in lp.iter().enumerate() {
                if is_emittable(t as TokenId) {
                    cands.push((h.score + v, rank, t as TokenId));
                }
            }
        }
        cands.sort_by(|a, b| by_score(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for &(score, rank, t) in cands.iter().take(beam) {
            let mut tokens = live[rank].tokens.clone();
            tokens.push(t);
            let entry = BeamEntry {
                tokens,
                score,
                terminated: t == EOS,
            };
            if entry.terminated {
                finished.push(entry);
            } else {
                next.push(entry);
            }
        }
        live = next;
        finished.sort_by(|a, b| by_score(a.score, b.score));
        let best_live = live.first().map_or(f64::NEG_INFINITY, |h| h.score);
        if live.is_empty() || (finished.len() >= keep && finished[keep - 1].score >= best_live) {
            break;
        }
    }
    finished.extend(live);
    Ok(finished)
}

fn causal_max_steps(max_len: usize, k: usize) -> usize {
    max_len.div_ceil(k)
}

/// Autoregressive beam search; `beam = 1` is the greedy argmax chain.
pub fn decode_aic<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let ranked = beam_search(model, mem, beam, 1, max_len)?;
    let best = &ranked[0];
    Ok(Hypothesis {
        tokens: truncate_caption(&best.tokens),
        raw: best.tokens.clone(),
        leaders: Vec::new(),
        outliner_logprob: best.score,
        filler_logprob: 0.0,
        total: best.score,
        terminated: best.terminated,
        degenerate: false,
    })
}

/// Result of parallel filling: the sequence plus the log-probability of the
/// token chosen at every filled position.
#[derive(Clone, Debug, PartialEq)]
pub struct Filled {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub logprobs: Vec<f64>,
}

impl Filled {
    pub fn score(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Number of positions re-predicted by each of `iterations` passes over `n`
/// maskable positions: `n` first, then `ceil(n · (I − i) / I)`.
pub fn remask_schedule(n: usize, iterations: usize) -> Vec<usize> {
    (0..iterations)
        .map(|i| (n * (iterations - i)).div_ceil(iterations))
        .collect()
}

/// Mask-predict over `positions` of `tokens`: every listed position is
/// predicted in the first pass, then each further pass re-masks and
/// re-predicts the lowest-confidence ones per [`remask_schedule`].
/// Positions not listed are never changed.
pub fn mask_predict<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    tokens: &[TokenId],
    positions: &[usize],
    iterations: usize,
) -> Result<Filled> {
    if iterations == 0 {
        return contract("at least one refinement iteration is required");
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
        return contract(format!("position {p} outside sequence of {}", tokens.len()));
    }
    let start = Filled {
        tokens: tokens.to_vec(),
        positions: positions.to_vec(),
        logprobs: vec![0.0; positions.len()],
    };
    let all: Vec<usize> = (0..positions.len()).collect();
    let first = repredict(model, mem, start, &all)?;
    refine(model, mem, first, iterations)
}

/// Continues mask-predict from a completed first pass: passes
/// `1..iterations` of [`remask_schedule`] re-predict the lowest-confidence
/// entries of `filled.positions`.
pub fn refine<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    mut filled: Filled,
    iterations: usize,
) -> Result<Filled> {
    let schedule = remask_schedule(filled.positions.len(), iterations.max(1));
    for &count in schedule.iter().skip(1) {
        if count == 0 {
            break;
        }
        let mut order: Vec<usize> = (0..filled.positions.len()).collect();
        order.sort_by(|&a, &b| {
            filled.logprobs[a]
                .total_cmp(&filled.logprobs[b])
                .then(filled.positions[a].cmp(&filled.positions[b]))
        });
        order.truncate(count);
        filled = repredict(model, mem, filled, &order)?;
    }
    Ok(filled)
}

/// Masks the listed entries of `f.positions` and predicts them in one pass.
fn repredict<T: Scalar>(model: &InferenceModel<T>, mem: &Memory<T>, mut f: Filled, chosen: &[usize]) -> Result<Filled> {
    for &c in chosen {
        f.tokens[f.positions[c]] = MASK;
    }
    let logits = model.decoder_forward(&f.tokens, mem, &AttentionMask::full(f.tokens.len())?)?;
    for &c in chosen {
        let (t, v) = argmax_candidate(&log_softmax(logits.row(f.positions[c])));
        f.tokens[f.positions[c]] = t;
        f.logprobs[c] = v;
    }
    Ok(f)
}

/// The `beam` best joint assignments of `positions` after one parallel pass
/// over `tokens`, best first. Positions are independent given the input, so
/// the enumeration is exact.
pub fn top_joint_fills<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    tokens: &[TokenId],
    positions: &[usize],
    beam: usize,
) -> Result<Vec<Filled>> {
    if beam == 0 {
        return contract("filler beam must be at least 1");
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
        return contract(format!("position {p} outside sequence of {}", tokens.len()));
    }
    let logits = model.decoder_forward(tokens, mem, &AttentionMask::full(tokens.len())?)?;
    // (score, chosen token per position so far)
    let mut partial: Vec<(f64, Vec<(TokenId, f64)>)> = vec![(0.0, Vec::new())];
    for &p in positions {
        let lp = log_softmax(logits.row(p));
        let mut opts: Vec<(TokenId, f64)> = lp
            .iter()
            .enumerate()
            .map(|(t, &v)| (t as TokenId, v))
            .filter(|&(t, _)| is_emittable(t))
            .collect();
        opts.sort_by(|a, b| by_score(a.1, b.1).then(a.0.cmp(&b.0)));
        opts.truncate(beam);
        let mut next = Vec::with_capacity(partial.len() * opts.len());
        for (score, picks) in &partial {
            for &(t, v) in &opts {
                let mut p2 = picks.clone();
                p2.push((t, v));
                next.push((score + v, p2));
            }
        }
        // Stable sort keeps lexicographically smaller choices first on ties.
        next.sort_by(|a, b| by_score(a.0, b.0));
        next.truncate(beam);
        partial = next;
    }
    Ok(partial
        .into_iter()
        .map(|(_, picks)| {
            let mut seq = tokens.to_vec();
            for (&p, &(t, _)) in positions.iter().zip(&picks) {
                seq[p] = t;
            }
            Filled {
                tokens: seq,
                positions: positions.to_vec(),
                logprobs: picks.iter().map(|&(_, v)| v).collect(),
            }
        })
        .collect())
}

fn parallel_hypothesis(f: Filled) -> Hypothesis {
    let score = f.score();
    let terminated = f.tokens.contains(&EOS);
    Hypothesis {
        tokens: truncate_caption(&f.tokens),
        raw: f.tokens,
        leaders: Vec::new(),
        outliner_logprob: 0.0,
        filler_logprob: score,
        total: score,
        terminated,
        degenerate: false,
    }
}

/// One parallel pass over `n` `[mask]` tokens with per-position argmax.
pub fn decode_naic<T: Scalar>(model: &InferenceModel<T>, mem: &Memory<T>, n: usize) -> Result<Hypothesis> {
    decode_ir_naic(model, mem, n, 1)
}

/// Mask-predict refinement from an all-`[mask]` start of length `n`.
pub fn decode_ir_naic<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    n: usize,
    iterations: usize,
) -> Result<Hypothesis> {
    if n == 0 {
        return contract("target length must be at least 1");
    }
    let start = vec![MASK; n];
    let positions: Vec<usize> = (0..n).collect();
    Ok(parallel_hypothesis(mask_predict(
        model, mem, &start, &positions, iterations,
    )?))
}

/// Leaders before the outliner's terminating `[eos]`.
fn content_leaders(leaders: &[TokenId]) -> &[TokenId] {
    match leaders.iter().position(|&t| t == EOS) {
        Some(p) => &leaders[..p],
        None => leaders,
    }
}

fn fill_leaders<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    entry: &BeamEntry,
    k: usize,
) -> Result<Hypothesis> {
    let body = content_leaders(&entry.tokens);
    if body.is_empty() {
        return Ok(Hypothesis {
            tokens: Vec::new(),
            raw: Vec::new(),
            leaders: entry.tokens.clone(),
            outliner_logprob: entry.score,
            filler_logprob: 0.0,
            total: entry.score,
            terminated: entry.terminated,
            degenerate: true,
        });
    }
    let expanded = expand_with_masks(body, k)?;
    let (raw, filler) = if k == 1 {
        (expanded, 0.0)
    } else {
        let holes: Vec<usize> = (0..expanded.len()).filter(|i| i % k != 0).collect();
        let f = top_joint_fills(model, mem, &expanded, &holes, 1)?.remove(0);
        let s = f.score();
        (f.tokens, s)
    };
    let terminated = entry.terminated || raw.contains(&EOS);
    Ok(Hypothesis {
        tokens: truncate_caption(&raw),
        raw,
        leaders: entry.tokens.clone(),
        outliner_logprob: entry.score,
        filler_logprob: filler,
        total: score_hypothesis(entry.score, filler),
        terminated,
        degenerate: false,
    })
}

/// Outline then fill.
///
/// The outliner runs beam `m_out` over the leader subsequence for at most
/// `ceil(max_len / k)` steps. Each of its `m_fill` best entries has its
/// leaders before `[eos]` expanded to groups of `k` and filled in one
/// parallel pass. The filled candidate with the best total wins, preferring
/// terminated ones. With `k = 1` no filling happens and the result is plain
/// beam search.
pub fn decode_saic<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    k: usize,
    m_out: usize,
    m_fill: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if k == 0 {
        return contract("group size must be at least 1");
    }
    if m_fill == 0 || m_out < m_fill {
        return contract(format!("m_out ({m_out}) must be >= m_fill ({m_fill}) >= 1"));
    }
    let ranked = beam_search(model, mem, m_out, m_fill, causal_max_steps(max_len, k))?;
    let mut best: Option<Hypothesis> = None;
    for entry in ranked.iter().take(m_fill) {
        let h = fill_leaders(model, mem, entry, k)?;
        let better = match &best {
            None => true,
            Some(b) => (h.terminated && !b.terminated) || (h.terminated == b.terminated && h.total > b.total),
        };
        if better {
            best = Some(h);
        }
    }
    Ok(best.expect("beam search returns at least one entry"))
}

/// Re-scores a two-stage hypothesis by teacher forcing both stages:
/// returns `(outliner, filler)` log-probabilities of `leaders` (ending in
/// `[eos]` unless cut by the length limit) and of the non-leader tokens of
/// `raw`.
pub fn rescore_saic<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    leaders: &[TokenId],
    raw: &[TokenId],
    k: usize,
) -> Result<(f64, f64)> {
    if leaders.is_empty() {
        return contract("nothing to score");
    }
    let mut input = vec![BOG];
    input.extend_from_slice(&leaders[..leaders.len() - 1]);
    let logits = model.decoder_forward(&input, mem, &AttentionMask::causal(input.len())?)?;
    let mut out = 0.0;
    for (i, &t) in leaders.iter().enumerate() {
        out += log_softmax(logits.row(i))[t as usize];
    }
    let body = content_leaders(leaders);
    if body.is_empty() || k == 1 {
        return Ok((out, 0.0));
    }
    let expanded = expand_with_masks(body, k)?;
    if expanded.len() != raw.len() {
        return contract("filled sequence does not match the leaders");
    }
    let logits = model.decoder_forward(&expanded, mem, &AttentionMask::full(expanded.len())?)?;
    let mut fill = 0.0;
    for i in (0..raw.len()).filter(|i| i % k != 0) {
        fill += log_softmax(logits.row(i))[raw[i] as usize];
    }
    Ok((out, fill))
}

/// Decodes one scene under `cfg`. `reference` supplies the oracle length
/// for the parallel strategies.
pub fn decode<T: Scalar>(
    model: &InferenceModel<T>,
    feat: &SceneFeatures,
    cfg: &DecodeConfig,
    reference: Option<&[TokenId]>,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let mem = model.encode(feat)?;
    decode_memory(model, &mem, cfg, reference)
}

/// [`decode`] on an already encoded scene.
pub fn decode_memory<T: Scalar>(
    model: &InferenceModel<T>,
    mem: &Memory<T>,
    cfg: &DecodeConfig,
    reference: Option<&[TokenId]>,
) -> Result<Hypothesis> {
    let target_len = || match (cfg.length, reference) {
        (LengthSource::Fixed(n), _) => Ok(n),
        (LengthSource::Oracle, Some(r)) => Ok(r.len() + 1),
        (LengthSource::Oracle, None) => contract("oracle length requested without a reference"),
    };
    match cfg.strategy {
        Strategy::Aic => decode_aic(model, mem, cfg.m_out, cfg.max_len),
        Strategy::Naic => decode_naic(model, mem, target_len()?),
        Strategy::IrNaic => decode_ir_naic(model, mem, target_len()?, cfg.iterations),
        Strategy::Saic => decode_saic(model, mem, cfg.k, cfg.m_out, cfg.m_fill, cfg.max_len),
    }
}

/// One line of decode output.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRecord {
    pub id: String,
    pub strategy: Strategy,
    pub tokens: Vec<TokenId>,
    pub outliner_logprob: f64,
    pub filler_logprob: f64,
    pub total: f64,
    pub latency_us: f64,
}

impl DecodeRecord {
    pub const HEADER: &'static str = "id\tstrategy\ttokens\toutliner_logprob\tfiller_logprob\ttotal\tlatency_us";

    /// Decodes and times one scene; the timed region covers encoding and
    /// decoding only.
    pub fn timed<T: Scalar>(
        id: impl Into<String>,
        model: &InferenceModel<T>,
        feat: &SceneFeatures,
        cfg: &DecodeConfig,
        reference: Option<&[TokenId]>,
    ) -> Result<(Self, Hypothesis)> {
        let start = Instant::now();
        let h = decode(model, feat, cfg, reference)?;
        let latency_us = start.elapsed().as_secs_f64() * 1e6;
        Ok((
            Self {
                id: id.into(),
                strategy: cfg.strategy,
                tokens: h.tokens.clone(),
                outliner_logprob: h.outliner_logprob,
                filler_logprob: h.filler_logprob,
                total: h.total,
                latency_us,
            },
            h,
        ))
    }

    pub fn to_line(&self) -> String {
        let toks: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.1}",
            self.id,
            self.strategy,
            if toks.is_empty() {
                "-".to_string()
            } else {
                toks.join(" ")
            },
            self.outliner_logprob,
            self.filler_logprob,
            self.total,
            self.latency_us
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("decode record needs 7 fields: {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        let tokens = if f[2] == "-" {
            Vec::new()
        } else {
            f[2].split(' ')
                .map(|t| {
                    t.parse::<TokenId>()
                        .map_err(|_| Error::Format(format!("bad token {t:?}")))
                })
                .collect::<Result<_>>()?
        };
        Ok(Self {
            id: f[0].to_string(),
            strategy: f[1].parse()?,
            tokens,
            outliner_logprob: num(f[3])?,
            filler_logprob: num(f[4])?,
            total: num(f[5])?,
            latency_us: num(f[6])?,
        })
    }
}
