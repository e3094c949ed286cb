//! Advantage and weight estimators.
//!
//! Everything here turns sampled outcomes into the coefficients that multiply
//! `∇ log π(y_t | y_<t, x)`:
//!
//! * Dr.GRPO: reward minus the group mean, the same for every token.
//! * VinePPO: per-chunk first differences of Monte-Carlo state values under
//!   the current policy.
//! * Progress Rewards: the group advantage plus `α` times per-chunk value
//!   differences under a Best-of-n prover.
//! * Best-of-N aware: class-conditional `g⁺`/`g⁻` weights from the group's
//!   failure rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphtask::{score, TaskInstance};
use crate::policy::{Coefficients, RolloutBackend, TokenId, Trajectory};
use crate::seed;

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Drgrpo,
    Vineppo,
    Progress,
    Bon,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Drgrpo => "drgrpo",
            Self::Vineppo => "vineppo",
            Self::Progress => "progress",
            Self::Bon => "bon",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drgrpo" => Ok(Self::Drgrpo),
            "vineppo" => Ok(Self::Vineppo),
            "progress" => Ok(Self::Progress),
            "bon" => Ok(Self::Bon),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected drgrpo, vineppo, progress or bon)"
            ))),
        }
    }
}

/// Reward minus group mean. Computed as the mean of pairwise differences so
/// that shifting every reward by a constant leaves the result unchanged
/// whenever the shifted differences are exact.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "group advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let g = rewards.len() as f64;
    Ok(rewards
        .iter()
        .map(|&ri| rewards.iter().map(|&rj| ri - rj).sum::<f64>() / g)
        .collect())
}

/// Contiguous response span `[start, end)` with its coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepChunk {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub coefficient: f64,
}

/// Fixed-size chunks covering `len` positions; the last may be shorter.
pub fn chunk(len: usize, chunk_size: usize) -> Result<Vec<StepChunk>> {
    if chunk_size == 0 {
        return Err(Error::Contract("chunk size must be >= 1".into()));
    }
    Ok((0..len)
        .step_by(chunk_size)
        .enumerate()
        .map(|(index, start)| StepChunk {
            index,
            start,
            end: (start + chunk_size).min(len),
            coefficient: 0.0,
        })
        .collect())
}

pub fn chunk_trajectory(traj: &Trajectory, chunk_size: usize) -> Result<Vec<StepChunk>> {
    chunk(traj.response.len(), chunk_size)
}

/// Spread chunk coefficients onto the positions they cover.
pub fn chunks_to_positions(chunks: &[StepChunk], len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    let mut next = 0;
    for c in chunks {
        if c.start != next || c.end > len || c.end <= c.start {
            return Err(Error::Contract("chunks must tile the response".into()));
        }
        out[c.start..c.end].fill(c.coefficient);
        next = c.end;
    }
    if next != len {
        return Err(Error::Contract("chunks must tile the response".into()));
    }
    Ok(out)
}

/// Monte-Carlo estimate of a state value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub rollouts: usize,
    pub successes: usize,
}

impl ValueEstimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            rollouts: 0,
            successes: 0,
        }
    }

    /// Binomial standard error of the underlying success rate.
    pub fn std_error(&self) -> f64 {
        if self.rollouts == 0 {
            return 0.0;
        }
        let p = self.successes as f64 / self.rollouts as f64;
        (p * (1.0 - p) / self.rollouts as f64).sqrt()
    }
}

/// Mean reward of `k` completions of `prompt ++ prefix`.
pub fn mc_value(
    instance: &TaskInstance,
    prompt: &[TokenId],
    prefix: &[TokenId],
    backend: &RolloutBackend,
    k: usize,
    seed_value: u64,
) -> Result<ValueEstimate> {
    if k == 0 {
        return Err(Error::Contract("K must be >= 1".into()));
    }
    let completions = backend.complete(prompt, prefix, k, seed_value)?;
    let successes = completions
        .iter()
        .filter(|c| score(instance, c.answer.as_deref()) > 0.5)
        .count();
    Ok(ValueEstimate {
        value: successes as f64 / k as f64,
        rollouts: k,
        successes,
    })
}

/// How the Best-of-n value of a prefix is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestOfNMode {
    /// `1 − (1 − v̂)^n` from `K` single completions.
    #[default]
    Transform,
    /// Fraction of `K` batches of `n` completions with at least one success.
    BatchMax,
}

pub fn bestofn_transform(single: f64, n: usize) -> f64 {
    1.0 - (1.0 - single).powi(n as i32)
}

/// Probability that the best of `n` completions of the prefix succeeds.
#[allow(clippy::too_many_arguments)]
pub fn bestofn_value(
    instance: &TaskInstance,
    prompt: &[TokenId],
    prefix: &[TokenId],
    prover: &RolloutBackend,
    k: usize,
    n: usize,
    seed_value: u64,
    mode: BestOfNMode,
) -> Result<ValueEstimate> {
    if n == 0 {
        return Err(Error::Contract("best-of-n needs n >= 1".into()));
    }
    match mode {
        BestOfNMode::Transform => {
            let single = mc_value(instance, prompt, prefix, prover, k, seed_value)?;
            Ok(ValueEstimate {
                value: bestofn_transform(single.value, n),
                ..single
            })
        }
        BestOfNMode::BatchMax => {
            if k == 0 {
                return Err(Error::Contract("K must be >= 1".into()));
            }
            let all = prover.complete(prompt, prefix, k * n, seed_value)?;
            let successes = all
                .chunks(n)
                .filter(|batch| {
                    batch
                        .iter()
                        .any(|c| score(instance, c.answer.as_deref()) > 0.5)
                })
                .count();
            Ok(ValueEstimate {
                value: successes as f64 / k as f64,
                rollouts: k,
                successes,
            })
        }
    }
}

/// Coefficients for one trajectory plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageReport {
    pub algorithm: Algorithm,
    /// Trajectory-level advantage (or weight, for Best-of-N).
    pub advantage: f64,
    /// Per-chunk coefficients; `None` means `advantage` applies everywhere.
    pub chunks: Option<Vec<StepChunk>>,
    /// Fraction of chunks whose step advantage is non-zero.
    pub nonzero_step_fraction: Option<f64>,
}

impl AdvantageReport {
    pub fn trajectory(algorithm: Algorithm, advantage: f64) -> Self {
        Self {
            algorithm,
            advantage,
            chunks: None,
            nonzero_step_fraction: None,
        }
    }

    pub fn coefficients(&self, len: usize) -> Result<Coefficients> {
        match &self.chunks {
            None => Ok(Coefficients::Trajectory(self.advantage)),
            Some(chunks) => Ok(Coefficients::PerPosition(chunks_to_positions(chunks, len)?)),
        }
    }

    pub fn coefficient_norm(&self, len: usize) -> Result<f64> {
        let v = self.coefficients(len)?.expand(len)?;
        Ok(v.iter().map(|c| c * c).sum::<f64>().sqrt())
    }
}

/// First differences `V_i − V_{i−1}` assigned to chunks; `values` has one
/// more entry than `chunks` (the empty prefix first).
pub fn step_advantages(chunks: &[StepChunk], values: &[f64]) -> Result<Vec<StepChunk>> {
    if values.len() != chunks.len() + 1 {
        return Err(Error::Contract(format!(
            "{} values for {} chunks",
            values.len(),
            chunks.len()
        )));
    }
    Ok(chunks
        .iter()
        .zip(values.windows(2))
        .map(|(c, w)| StepChunk {
            coefficient: w[1] - w[0],
            ..*c
        })
        .collect())
}

fn observed_reward(traj: &Trajectory) -> Result<f64> {
    traj.reward()
        .ok_or_else(|| Error::Contract("trajectory has not been scored".into()))
}

/// Values at every chunk boundary: estimated for strict prefixes, the
/// observed reward for the full response.
fn boundary_values<F>(traj: &Trajectory, chunks: &[StepChunk], mut estimate: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[TokenId]) -> Result<f64>,
{
    let mut values = Vec::with_capacity(chunks.len() + 1);
    values.push(estimate(0, &[])?);
    for (i, c) in chunks.iter().enumerate() {
        if i + 1 == chunks.len() {
            values.push(observed_reward(traj)?);
        } else {
            values.push(estimate(i + 1, &traj.response[..c.end])?);
        }
    }
    Ok(values)
}

fn nonzero_fraction(chunks: &[StepChunk]) -> Option<f64> {
    (!chunks.is_empty()).then(|| {
        chunks.iter().filter(|c| c.coefficient != 0.0).count() as f64 / chunks.len() as f64
    })
}

/// VinePPO step advantages under the sampling policy.
pub fn vineppo_advantages(
    instance: &TaskInstance,
    traj: &Trajectory,
    policy: &RolloutBackend,
    k: usize,
    chunk_size: usize,
    seed_value: u64,
) -> Result<AdvantageReport> {
    let chunks = chunk_trajectory(traj, chunk_size)?;
    if chunks.is_empty() {
        return Ok(AdvantageReport {
            algorithm: Algorithm::Vineppo,
            advantage: 0.0,
            chunks: Some(chunks),
            nonzero_step_fraction: None,
        });
    }
    let values = boundary_values(traj, &chunks, |i, prefix| {
        let s = seed::derive(seed_value, &[i as u64]);
        Ok(mc_value(instance, &traj.prompt, prefix, policy, k, s)?.value)
    })?;
    let chunks = step_advantages(&chunks, &values)?;
    let advantage = values[values.len() - 1] - values[0];
    Ok(AdvantageReport {
        algorithm: Algorithm::Vineppo,
        advantage,
        nonzero_step_fraction: nonzero_fraction(&chunks),
        chunks: Some(chunks),
    })
}

/// Settings for the Progress-Rewards prover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProverSettings {
    pub rollouts: usize,
    pub best_of: usize,
    pub alpha: f64,
    pub chunk_size: usize,
    pub mode: BestOfNMode,
}

/// `Â(y) + α · Â^μ` per chunk, with `μ` the Best-of-n prover.
pub fn progress_coefficients(
    instance: &TaskInstance,
    traj: &Trajectory,
    group_advantage: f64,
    prover: &RolloutBackend,
    settings: &ProverSettings,
    seed_value: u64,
) -> Result<AdvantageReport> {
    let chunks = chunk_trajectory(traj, settings.chunk_size)?;
    if chunks.is_empty() {
        return Ok(AdvantageReport {
            algorithm: Algorithm::Progress,
            advantage: group_advantage,
            chunks: Some(chunks),
            nonzero_step_fraction: None,
        });
    }
    let values = boundary_values(traj, &chunks, |i, prefix| {
        let s = seed::derive(seed_value, &[i as u64]);
        Ok(bestofn_value(
            instance,
            &traj.prompt,
            prefix,
            prover,
            settings.rollouts,
            settings.best_of,
            s,
            settings.mode,
        )?
        .value)
    })?;
    progress_from_values(&chunks, &values, group_advantage, settings.alpha)
}

/// Combine prover values with the group advantage.
pub fn progress_from_values(
    chunks: &[StepChunk],
    prover_values: &[f64],
    group_advantage: f64,
    alpha: f64,
) -> Result<AdvantageReport> {
    let steps = step_advantages(chunks, prover_values)?;
    let nonzero = nonzero_fraction(&steps);
    let chunks = steps
        .into_iter()
        .map(|c| StepChunk {
            coefficient: group_advantage + alpha * c.coefficient,
            ..c
        })
        .collect();
    Ok(AdvantageReport {
        algorithm: Algorithm::Progress,
        advantage: group_advantage,
        chunks: Some(chunks),
        nonzero_step_fraction: nonzero,
    })
}

/// Best-of-N aware sample weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonWeights {
    /// Failure probability after clipping into `[eps, 1 − eps]`.
    pub p_fail: f64,
    pub n: usize,
    pub g_plus_raw: f64,
    pub g_minus_raw: f64,
    pub g_plus: f64,
    pub g_minus: f64,
}

pub const DEFAULT_P_FAIL_EPS: f64 = 1e-4;

/// Closed-form `g⁺_N(p) = N p^{N−1} / (1 − p^N)` and
/// `g⁻_N(p) = N (1 − p^{N−1}) / (1 − p^N)`, then clipped into `[−clip, clip]`.
pub fn bon_weights(p_fail: f64, n: usize, clip: f64, p_eps: f64) -> BonWeights {
    let p = p_fail.clamp(p_eps, 1.0 - p_eps);
    let nf = n as f64;
    let pn1 = p.powi(n as i32 - 1);
    let denom = 1.0 - p.powi(n as i32);
    let g_plus_raw = nf * pn1 / denom;
    let g_minus_raw = nf * (1.0 - pn1) / denom;
    BonWeights {
        p_fail: p,
        n,
        g_plus_raw,
        g_minus_raw,
        g_plus: g_plus_raw.clamp(-clip, clip),
        g_minus: g_minus_raw.clamp(-clip, clip),
    }
}

/// Per-trajectory Best-of-N coefficients for one group.
pub fn bon_coefficients(rewards: &[f64], n: usize, clip: f64, p_eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract("BoN coefficients need a group of >= 2".into()));
    }
    let successes = rewards.iter().filter(|&&r| r > 0.5).count();
    let failures = rewards.len() - successes;
    let p_hat = failures as f64 / rewards.len() as f64;
    let w = bon_weights(p_hat, n, clip, p_eps);
    Ok(rewards
        .iter()
        .map(|&r| {
            if r > 0.5 {
                w.g_plus / successes as f64
            } else {
                -w.g_minus / failures as f64
            }
        })
        .collect())
}
