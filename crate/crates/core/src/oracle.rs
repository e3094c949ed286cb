//! Brute-force references for tiny policies.
//!
//! Nothing here reuses the sampler: tempering and nucleus truncation are
//! re-derived from the raw forward pass so that agreement with the Monte-Carlo
//! estimators is a real cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphtask::{score, TaskInstance};
use crate::policy::{PolicyParams, SamplingSettings, TokenId, Vocab, EOS};

/// Limits on how much an oracle may enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget {
    pub max_vocab: usize,
    pub max_horizon: usize,
    pub max_sequences: u64,
}

impl EnumerationBudget {
    pub fn new(max_vocab: usize, max_horizon: usize, max_sequences: u64) -> Result<Self> {
        let b = Self {
            max_vocab,
            max_horizon,
            max_sequences,
        };
        if b.worst_case().is_none_or(|w| w > max_sequences) {
            return Err(Error::Budget(format!(
                "{max_vocab}^{max_horizon} sequences exceed the limit of {max_sequences}"
            )));
        }
        Ok(b)
    }

    fn worst_case(&self) -> Option<u64> {
        (self.max_vocab as u64).checked_pow(self.max_horizon as u32)
    }
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_vocab: 4,
            max_horizon: 4,
            max_sequences: 256,
        }
    }
}

/// Result of a full enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Enumeration {
    pub value: f64,
    /// Total probability of all enumerated completions; 1 up to rounding.
    pub total_probability: f64,
    pub sequences: u64,
}

/// Sampling distribution over the support at one step, as `(index, prob)`.
fn step_distribution(logp: &[f64], settings: &SamplingSettings) -> Vec<(usize, f64)> {
    if settings.temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logp.iter().enumerate() {
            if l > logp[best] {
                best = i;
            }
        }
        return vec![(best, 1.0)];
    }
    let scaled: Vec<f64> = logp.iter().map(|l| l / settings.temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / z).collect();

    let mut ranked: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for (i, p) in ranked {
        kept.push((i, p));
        cum += p;
        if settings.top_p < 1.0 && cum >= settings.top_p {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|(_, p)| p).sum();
    kept.into_iter().map(|(i, p)| (i, p / mass)).collect()
}

/// Expected score of completing `prompt ++ prefix` under `params` sampled
/// with `settings`. The scorer sees the whole response (prefix included).
/// Reaching the horizon without `EOS` is a terminal, scored outcome.
pub fn enumerate<S>(
    prompt: &[TokenId],
    prefix: &[TokenId],
    params: &PolicyParams,
    settings: &SamplingSettings,
    budget: &EnumerationBudget,
    scorer: S,
) -> Result<Enumeration>
where
    S: Fn(&[TokenId]) -> f64,
{
    let horizon = settings.max_response_len.min(params.arch().max_response_len);
    if horizon > budget.max_horizon {
        return Err(Error::Budget(format!(
            "horizon {horizon} exceeds the enumeration limit {}",
            budget.max_horizon
        )));
    }
    let mut out = Enumeration {
        value: 0.0,
        total_probability: 0.0,
        sequences: 0,
    };
    let mut seq = prefix.to_vec();
    walk(prompt, &mut seq, 1.0, params, settings, budget, horizon, &scorer, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk<S>(
    prompt: &[TokenId],
    seq: &mut Vec<TokenId>,
    prob: f64,
    params: &PolicyParams,
    settings: &SamplingSettings,
    budget: &EnumerationBudget,
    horizon: usize,
    scorer: &S,
    out: &mut Enumeration,
) -> Result<()>
where
    S: Fn(&[TokenId]) -> f64,
{
    if seq.last() == Some(&EOS) || seq.len() >= horizon {
        out.sequences += 1;
        if out.sequences > budget.max_sequences {
            return Err(Error::Budget(format!(
                "more than {} sequences enumerated",
                budget.max_sequences
            )));
        }
        out.value += prob * scorer(seq);
        out.total_probability += prob;
        return Ok(());
    }
    let mut toks = prompt.to_vec();
    toks.extend(seq.iter());
    let fwd = params.forward(&toks, prompt.len())?;
    let support = &fwd.index.support;
    if support.len() > budget.max_vocab {
        return Err(Error::Budget(format!(
            "support of {} tokens exceeds the enumeration limit {}",
            support.len(),
            budget.max_vocab
        )));
    }
    let logp = fwd.logp(seq.len());
    for (i, p) in step_distribution(logp, settings) {
        seq.push(support[i]);
        walk(prompt, seq, prob * p, params, settings, budget, horizon, scorer, out)?;
        seq.pop();
    }
    Ok(())
}

/// Exact expected score; see [`enumerate`].
pub fn exact_value<S>(
    prompt: &[TokenId],
    prefix: &[TokenId],
    params: &PolicyParams,
    settings: &SamplingSettings,
    budget: &EnumerationBudget,
    scorer: S,
) -> Result<f64>
where
    S: Fn(&[TokenId]) -> f64,
{
    Ok(enumerate(prompt, prefix, params, settings, budget, scorer)?.value)
}

/// Success probability of the best of `n` independent completions.
#[allow(clippy::too_many_arguments)]
pub fn exact_bon_value<S>(
    prompt: &[TokenId],
    prefix: &[TokenId],
    params: &PolicyParams,
    settings: &SamplingSettings,
    n: usize,
    budget: &EnumerationBudget,
    scorer: S,
) -> Result<f64>
where
    S: Fn(&[TokenId]) -> f64,
{
    let v = exact_value(prompt, prefix, params, settings, budget, scorer)?;
    Ok(bon_from_value(v, n))
}

pub fn bon_from_value(v: f64, n: usize) -> f64 {
    1.0 - (1.0 - v).powi(n as i32)
}

/// Binary verifier on token responses for one instance.
pub fn instance_scorer<'a>(instance: &'a TaskInstance, vocab: Vocab) -> impl Fn(&[TokenId]) -> f64 + 'a {
    move |resp| score(instance, vocab.answer_from_tokens(resp).as_deref())
}

/// Central differences `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(x: &[f64], mut f: F, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value not finite when perturbing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Finite differences of a policy functional over its parameter vector.
pub fn finite_diff_params<F>(params: &PolicyParams, mut f: F, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&PolicyParams) -> Result<f64>,
{
    let arch = params.arch().clone();
    finite_diff_grad(
        &params.values,
        |v| f(&PolicyParams::from_values(arch.clone(), v.to_vec())?),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_invariant() {
        assert!(EnumerationBudget::new(4, 4, 256).is_ok());
        assert!(matches!(EnumerationBudget::new(4, 5, 256), Err(Error::Budget(_))));
    }

    #[test]
    fn bon_arithmetic() {
        assert_eq!(bon_from_value(0.0, 4), 0.0);
        assert_eq!(bon_from_value(1.0, 9), 1.0);
        assert_eq!(bon_from_value(0.5, 4), 0.9375);
    }

    #[test]
    fn step_distribution_sums_to_one() {
        let logp = [-0.1f64, -2.5, -4.0, -3.2];
        for (t, p) in [(1.0, 1.0), (0.6, 0.999), (0.6, 0.5), (2.0, 0.9)] {
            let s = SamplingSettings {
                temperature: t,
                top_p: p,
                max_response_len: 4,
            };
            let d = step_distribution(&logp, &s);
            let total: f64 = d.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let g = step_distribution(&logp, &SamplingSettings::greedy(4));
        assert_eq!(g, vec![(0, 1.0)]);
    }

    #[test]
    fn finite_differences() {
        let lin = finite_diff_grad(&[1.0, -2.0], |x| Ok(3.0 * x[0] - 0.5 * x[1] + 7.0), 0.25).unwrap();
        assert!((lin[0] - 3.0).abs() < 1e-12 && (lin[1] + 0.5).abs() < 1e-12);
        let q = finite_diff_grad(&[1.5, 2.0], |x| Ok(x[0] * x[0] + 3.0 * x[0] * x[1]), 1e-4).unwrap();
        assert!((q[0] - 9.0).abs() < 1e-6 && (q[1] - 4.5).abs() < 1e-6);
        let err = finite_diff_grad(&[0.0, 0.0], |x| Ok(if x[1] > 0.0 { f64::NAN } else { 0.0 }), 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }
}
