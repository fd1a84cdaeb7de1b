//! Attention masks and hypothesis-masking schemes.
//!
//! The outliner runs under a plain causal mask over the compressed leader
//! subsequence, the filler under a full (bidirectional) mask over the
//! expanded sequence. The masking experiment hides words of a finished
//! hypothesis with one of four strategies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{contract, dim_err, Error, Result};
use crate::tokens::{TokenId, MASK};

/// Boolean `rows × cols` matrix; `allows(i, j)` means query `i` may attend to
/// key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Lower-triangular mask including the diagonal.
    pub fn causal(n: usize) -> Result<Self> {
        if n == 0 {
            return dim_err("causal mask of size 0");
        }
        let allow = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Ok(Self {
            rows: n,
            cols: n,
            allow,
        })
    }

    /// Every position sees every position.
    pub fn full(n: usize) -> Result<Self> {
        if n == 0 {
            return dim_err("full mask of size 0");
        }
        Ok(Self {
            rows: n,
            cols: n,
            allow: vec![true; n * n],
        })
    }

    /// Builds a mask from explicit rows, rejecting rows with nothing allowed.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return dim_err("mask rows must be non-empty and equal length");
        }
        if rows.iter().any(|r| !r.iter().any(|&a| a)) {
            return contract("every mask row needs at least one allowed entry");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            allow: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.allow[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|&&a| a)
            .count()
    }
}

/// Group leaders `s[0], s[k], s[2k], …`.
pub fn extract_leaders(s: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
    if k == 0 {
        return contract("group size must be at least 1");
    }
    if !s.len().is_multiple_of(k) {
        return contract(format!("length {} is not a multiple of k={k}", s.len()));
    }
    Ok(s.iter().step_by(k).copied().collect())
}

/// Places each leader at the head of a group of `k` and fills the rest of the
/// group with `[mask]`.
pub fn expand_with_masks(leaders: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
    if k == 0 {
        return contract("group size must be at least 1");
    }
    if leaders.is_empty() {
        return contract("cannot expand an empty leader sequence");
    }
    let mut out = Vec::with_capacity(leaders.len() * k);
    for &l in leaders {
        out.push(l);
        out.extend(std::iter::repeat_n(MASK, k - 1));
    }
    Ok(out)
}

/// Fraction of positions hidden by group masking: `1 − 1/k`.
pub fn group_mask_rate(k: usize) -> Result<f64> {
    if k == 0 {
        return contract("group size must be at least 1");
    }
    Ok(1.0 - 1.0 / k as f64)
}

/// How a hypothesis is masked for the refinement experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    Head,
    Tail,
    Random,
    /// Keep the first word of every group of `k`.
    Group {
        k: usize,
    },
}

impl MaskStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::Head => "head",
            MaskStrategy::Tail => "tail",
            MaskStrategy::Random => "random",
            MaskStrategy::Group { .. } => "group",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskStrategy::Group { k } => write!(f, "group(k={k})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    /// Accepts `head`, `tail`, `random`, `group` (k=4) or `group:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(MaskStrategy::Head),
            "tail" => Ok(MaskStrategy::Tail),
            "random" => Ok(MaskStrategy::Random),
            "group" => Ok(MaskStrategy::Group { k: 4 }),
            other => match other.strip_prefix("group:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(MaskStrategy::Group { k }),
                _ => Err(Error::Format(format!("unknown masking strategy {s:?}"))),
            },
        }
    }
}

/// A hypothesis with some words replaced by `[mask]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedHypothesis {
    pub tokens: Vec<TokenId>,
    /// Sorted, distinct.
    pub masked_positions: Vec<usize>,
    pub strategy: MaskStrategy,
    /// Nominal rate for head/tail/random, `1 − 1/k` for group.
    pub p_mask: f64,
}

/// `max(1, floor(n · p))`, capped at `n`.
pub fn masked_count(n: usize, p_mask: f64) -> usize {
    ((n as f64 * p_mask).floor() as usize).clamp(1, n)
}

/// Masks `s` according to `strategy`. Group masking ignores `p_mask`.
pub fn mask_hypothesis<R: Rng + ?Sized>(
    s: &[TokenId],
    strategy: MaskStrategy,
    p_mask: f64,
    rng: &mut R,
) -> Result<MaskedHypothesis> {
    let n = s.len();
    if n == 0 {
        return contract("cannot mask an empty hypothesis");
    }
    let (positions, rate) = match strategy {
        MaskStrategy::Group { k } => {
            let rate = group_mask_rate(k)?;
            ((0..n).filter(|i| i % k != 0).collect::<Vec<_>>(), rate)
        }
        _ => {
            if !(p_mask > 0.0 && p_mask <= 1.0) {
                return contract(format!("masking rate {p_mask} outside (0, 1]"));
            }
            let count = masked_count(n, p_mask);
            let positions = match strategy {
                MaskStrategy::Head => (0..count).collect(),
                MaskStrategy::Tail => (n - count..n).collect(),
                _ => {
                    let mut v = rand::seq::index::sample(rng, n, count).into_vec();
                    v.sort_unstable();
                    v
                }
            };
            (positions, p_mask)
        }
    };
    let mut tokens = s.to_vec();
    for &p in &positions {
        tokens[p] = MASK;
    }
    Ok(MaskedHypothesis {
        tokens,
        masked_positions: positions,
        strategy,
        p_mask: rate,
    })
}
