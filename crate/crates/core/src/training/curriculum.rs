use rand::Rng;

use crate::error::{contract, Result};
use crate::tokens::TokenId;

/// `p_g = (t / T)^λ`, the share of a batch trained in group-aware form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumSchedule {
    pub total: u64,
    pub lambda: f64,
}

impl CurriculumSchedule {
    pub fn new(total: u64, lambda: f64) -> Result<Self> {
        if total == 0 || !lambda.is_finite() || lambda <= 0.0 {
            return contract("curriculum needs T >= 1 and a positive finite exponent");
        }
        Ok(Self { total, lambda })
    }

    /// Clamped to 1 past `T`.
    pub fn rate(&self, t: u64) -> f64 {
        if t >= self.total {
            return 1.0;
        }
        (t as f64 / self.total as f64).powf(self.lambda).clamp(0.0, 1.0)
    }
}

pub fn curriculum_rate(t: u64, sched: &CurriculumSchedule) -> f64 {
    sched.rate(t)
}

/// Picks `raw` with probability `p_hybr`, otherwise `distilled`.
pub fn hybrid_sample<'a, R: Rng + ?Sized>(
    raw: &'a [TokenId],
    distilled: &'a [TokenId],
    p_hybr: f64,
    rng: &mut R,
) -> &'a [TokenId] {
    if rng.random::<f64>() < p_hybr {
        raw
    } else {
        distilled
    }
}
