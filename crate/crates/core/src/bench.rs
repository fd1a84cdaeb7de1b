//! Decoding cost: the analytical step/cost model and wall-clock latency.
//!
//! `Q(i)` is the abstract cost of the `i`-th autoregressive step. Constant
//! `Q(i) = 1` counts passes; linear `Q(i) = i` charges for the history each
//! step attends to. A parallel pass over the whole sequence costs `Q(1)`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::decoding::{decode, DecodeConfig, Strategy};
use crate::error::{contract, Error, Result};
use crate::model::{InferenceModel, SceneFeatures};
use crate::nn::Scalar;
use crate::tokens::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostModel {
    Constant,
    Linear,
}

impl CostModel {
    pub fn q(self, i: u64) -> u64 {
        match self {
            CostModel::Constant => 1,
            CostModel::Linear => i,
        }
    }

    /// `Σ_{i=1..n} Q(i)`.
    pub fn prefix_sum(self, n: u64) -> u64 {
        match self {
            CostModel::Constant => n,
            CostModel::Linear => n * (n + 1) / 2,
        }
    }
}

impl FromStr for CostModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(CostModel::Constant),
            "linear" => Ok(CostModel::Linear),
            _ => Err(Error::Format(format!("unknown cost model {s:?}"))),
        }
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostModel::Constant => "constant",
            CostModel::Linear => "linear",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    pub steps: u64,
    pub cost: u64,
}

/// Sequential steps and abstract cost of producing `n` words. The
/// outline-then-fill decoder takes `ceil(n / k)` outliner steps plus one
/// filler pass.
pub fn cost_of(strategy: Strategy, n: u64, k: u64, iterations: u64, q: CostModel) -> Result<Cost> {
    if n == 0 || k == 0 || iterations == 0 {
        return contract("n, k and iterations must be at least 1");
    }
    Ok(match strategy {
        Strategy::Aic => Cost {
            steps: n,
            cost: q.prefix_sum(n),
        },
        Strategy::Naic => Cost { steps: 1, cost: q.q(1) },
        Strategy::IrNaic => Cost {
            steps: iterations,
            cost: iterations * q.q(1),
        },
        Strategy::Saic => {
            let m = n.div_ceil(k);
            Cost {
                steps: m + 1,
                cost: q.prefix_sum(m) + q.q(1),
            }
        }
    })
}

/// `(N / I) · cost(B, 1) / cost(B, N)` with `cost(B, n) = B · n`.
pub fn speedup_ratio(n: u64, iterations: u64, batch: u64) -> Result<f64> {
    if n == 0 || iterations == 0 || batch == 0 {
        return contract("n, iterations and batch must be at least 1");
    }
    let num = n * batch;
    let den = iterations * batch * n;
    Ok(num as f64 / den as f64)
}

/// One row of the latency table.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub config: DecodeConfig,
    pub steps: u64,
    pub abstract_cost: u64,
    /// Mean per-sentence latency over all runs.
    pub latency_us: f64,
    /// Mean per-sentence latency of each run.
    pub runs_us: Vec<f64>,
    pub speedup_vs_aic: f64,
}

impl CostReport {
    pub const HEADER: &'static str = "strategy\tconfig\tsteps\tabstract_cost\tlatency_us\truns_us\tspread\tspeedup";

    /// `(max − min) / mean` over the per-run means.
    pub fn spread(&self) -> f64 {
        let max = self.runs_us.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.runs_us.iter().cloned().fold(f64::MAX, f64::min);
        (max - min) / self.latency_us
    }

    pub fn to_line(&self) -> String {
        let runs: Vec<String> = self.runs_us.iter().map(|r| format!("{r:.1}")).collect();
        format!(
            "{}\t{}\t{}\t{}\t{:.1}\t{}\t{:.3}\t{:.2}x",
            self.config.strategy,
            describe_config(&self.config),
            self.steps,
            self.abstract_cost,
            self.latency_us,
            runs.join(","),
            self.spread(),
            self.speedup_vs_aic
        )
    }
}

pub fn describe_config(c: &DecodeConfig) -> String {
    match c.strategy {
        Strategy::Aic => format!("beam={}", c.m_out),
        Strategy::Naic => "I=1".to_string(),
        Strategy::IrNaic => format!("I={}", c.iterations),
        Strategy::Saic => format!("k={} m_out={} m_fill={}", c.k, c.m_out, c.m_fill),
    }
}

/// Times single-sentence decoding of every scene under every configuration.
///
/// After one untimed warm-up pass, each of `runs` rounds decodes the full
/// scene list once per configuration, alternating configurations scene by
/// scene so slow drift affects them alike. Only encoding plus decoding is timed. Autoregressive rows decode
/// with `baseline`, all others with `model`. An autoregressive greedy row is
/// prepended when `configs` has no autoregressive entry, and speedups are
/// relative to the first autoregressive row.
pub fn measure_latency<T: Scalar>(
    baseline: &InferenceModel<T>,
    model: &InferenceModel<T>,
    configs: &[DecodeConfig],
    scenes: &[(&SceneFeatures, &[TokenId])],
    runs: usize,
    q: CostModel,
) -> Result<Vec<CostReport>> {
    if scenes.is_empty() || runs == 0 {
        return contract("latency measurement needs scenes and at least one run");
    }
    let mut configs = configs.to_vec();
    if !configs.iter().any(|c| c.strategy == Strategy::Aic) {
        let base = configs.first().copied().unwrap_or_default();
        configs.insert(
            0,
            DecodeConfig {
                strategy: Strategy::Aic,
                m_out: 1,
                m_fill: 1,
                ..base
            },
        );
    }
    for c in &configs {
        c.validate()?;
    }
    let pick = |c: &DecodeConfig| if c.strategy == Strategy::Aic { baseline } else { model };
    // Untimed warm-up pass.
    for (feat, r) in scenes {
        for c in &configs {
            std::hint::black_box(decode(pick(c), feat, c, Some(r))?);
        }
    }
    let mut per_run = vec![Vec::with_capacity(runs); configs.len()];
    for _ in 0..runs {
        let mut totals = vec![0.0; configs.len()];
        for (feat, r) in scenes {
            for (ci, c) in configs.iter().enumerate() {
                let start = Instant::now();
                let h = decode(pick(c), feat, c, Some(r))?;
                totals[ci] += start.elapsed().as_secs_f64() * 1e6;
                std::hint::black_box(h);
            }
        }
        for (ci, t) in totals.into_iter().enumerate() {
            per_run[ci].push(t / scenes.len() as f64);
        }
    }
    let mean_len = scenes.iter().map(|(_, r)| r.len()).sum::<usize>() as f64 / scenes.len() as f64;
    let n = (mean_len.round() as u64).max(1);
    let aic_idx = configs
        .iter()
        .position(|c| c.strategy == Strategy::Aic)
        .expect("inserted above");
    let aic_latency = per_run[aic_idx].iter().sum::<f64>() / runs as f64;
    configs
        .iter()
        .zip(per_run)
        .map(|(c, runs_us)| {
            let latency_us = runs_us.iter().sum::<f64>() / runs as f64;
            let cost = cost_of(c.strategy, n, c.k as u64, c.iterations as u64, q)?;
            Ok(CostReport {
                config: *c,
                steps: cost.steps,
                abstract_cost: cost.cost,
                latency_us,
                runs_us,
                speedup_vs_aic: aic_latency / latency_us,
            })
        })
        .collect()
}
