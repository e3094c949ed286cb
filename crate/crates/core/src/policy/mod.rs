//! The trainable token policy, its frozen reference, and rollout backends.

mod backend;
mod network;
mod vocab;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backend::{Completion, ExternalBackend, ExternalConfig, RolloutBackend};
pub use network::{ArchDescriptor, Decoder, Forward, PolicyParams, PromptIndex};
pub use vocab::{TokenId, Vocab, ANS, DST, EOS, GENERATED_SPECIALS, NUM_SPECIAL, SEP, SRC};

use crate::error::{Error, Result};
use crate::graphtask::{extract_answer, score, TaskInstance};

/// Decoding settings shared by every backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSettings {
    /// Zero means greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub max_response_len: usize,
}

impl SamplingSettings {
    pub fn greedy(max_response_len: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_response_len,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= 0.0
    }

    /// Temperature the recorded log-probabilities refer to.
    pub fn scoring_temperature(&self) -> f64 {
        if self.is_greedy() {
            1.0
        } else {
            self.temperature
        }
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    /// Log-probability of each response token under the untruncated,
    /// temperature-scaled sampling distribution.
    pub logprobs: Vec<f64>,
    /// Temperature `logprobs` refer to; `logprob_grad` and `token_kl` score
    /// the trajectory under the same temperature.
    pub temperature: f64,
    /// Set when decoding stopped at the length limit rather than at `EOS`.
    pub truncated: bool,
    /// Raw completion for text backends.
    pub text: Option<String>,
    reward: Option<f64>,
}

impl Trajectory {
    pub fn new(prompt: Vec<TokenId>, temperature: f64) -> Self {
        Self {
            prompt,
            response: Vec::new(),
            logprobs: Vec::new(),
            temperature,
            truncated: false,
            text: None,
            reward: None,
        }
    }

    pub fn reward(&self) -> Option<f64> {
        self.reward
    }

    /// Rewards are write-once.
    pub fn set_reward(&mut self, r: f64) -> Result<()> {
        if self.reward.is_some() {
            return Err(Error::Contract("trajectory reward already set".into()));
        }
        self.reward = Some(r);
        Ok(())
    }

    /// Answer string the verifier sees.
    pub fn answer(&self, vocab: &Vocab) -> Option<String> {
        match &self.text {
            Some(t) => extract_answer(t),
            None => vocab.answer_from_tokens(&self.response),
        }
    }

    /// Score against `instance` and record the reward.
    pub fn score_against(&mut self, instance: &TaskInstance, vocab: &Vocab) -> Result<f64> {
        let r = score(instance, self.answer(vocab).as_deref());
        self.set_reward(r)?;
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// Temperature-scaled log-distribution.
pub fn temper(logp: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return logp.to_vec();
    }
    let z: Vec<f64> = logp.iter().map(|l| l / temperature).collect();
    let lse = network::log_sum_exp(&z);
    z.iter().map(|v| v - lse).collect()
}

/// Indices kept by nucleus truncation, most probable first.
pub fn nucleus(logq: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logq.len()).collect();
    order.sort_by(|&a, &b| logq[b].partial_cmp(&logq[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    if top_p >= 1.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        cum += logq[i].exp();
        if cum >= top_p {
            break;
        }
    }
    keep
}

/// Draw a support index; returns it with its untruncated log-probability.
pub fn draw<R: Rng>(logp: &[f64], settings: &SamplingSettings, rng: &mut R) -> (usize, f64) {
    if settings.is_greedy() {
        let best = (0..logp.len())
            .max_by(|&a, &b| logp[a].partial_cmp(&logp[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
            .expect("non-empty support");
        return (best, logp[best]);
    }
    let logq = temper(logp, settings.temperature);
    let keep = nucleus(&logq, settings.top_p);
    let mass: f64 = keep.iter().map(|&i| logq[i].exp()).sum();
    let mut u = rng.gen::<f64>() * mass;
    for &i in &keep {
        u -= logq[i].exp();
        if u <= 0.0 {
            return (i, logq[i]);
        }
    }
    let last = *keep.last().expect("nucleus keeps at least one token");
    (last, logq[last])
}

/// Continue `decoder` until `EOS` or the response limit.
pub fn rollout<R: Rng>(
    params: &PolicyParams,
    mut decoder: Decoder,
    settings: &SamplingSettings,
    rng: &mut R,
) -> Result<(Vec<TokenId>, Vec<f64>, bool)> {
    let limit = settings.max_response_len.min(params.arch().max_response_len);
    let mut logprobs = Vec::new();
    let start = decoder.response().len();
    let mut truncated = false;
    while decoder.response().len() < limit {
        let (i, lp) = draw(decoder.logp(), settings, rng);
        let tok = decoder.index.support[i];
        logprobs.push(lp);
        if tok == EOS || decoder.response().len() + 1 >= limit {
            truncated = tok != EOS;
            decoder.push_final(tok);
            break;
        }
        decoder.push(params, tok)?;
    }
    Ok((decoder.response()[start..].to_vec(), logprobs, truncated))
}

/// Autoregressive sample from an internal policy.
pub fn sample_internal<R: Rng>(
    params: &PolicyParams,
    prompt: &[TokenId],
    settings: &SamplingSettings,
    rng: &mut R,
) -> Result<Trajectory> {
    let decoder = params.prefill(prompt)?;
    let (response, logprobs, truncated) = rollout(params, decoder, settings, rng)?;
    let mut traj = Trajectory::new(prompt.to_vec(), settings.scoring_temperature());
    traj.response = response;
    traj.logprobs = logprobs;
    traj.truncated = truncated;
    Ok(traj)
}

/// Sample one trajectory from any backend.
pub fn sample(backend: &RolloutBackend, prompt: &[TokenId], seed: u64) -> Result<Trajectory> {
    backend.sample(prompt, seed)
}

/// Per-position weights for [`logprob_grad`].
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    /// One weight broadcast to every response position.
    Trajectory(f64),
    PerPosition(Vec<f64>),
}

impl Coefficients {
    pub fn expand(&self, len: usize) -> Result<Vec<f64>> {
        match self {
            Self::Trajectory(c) => Ok(vec![*c; len]),
            Self::PerPosition(v) if v.len() == len => Ok(v.clone()),
            Self::PerPosition(v) => Err(Error::Contract(format!(
                "{} coefficients for {len} response positions",
                v.len()
            ))),
        }
    }
}

fn response_index(fwd: &Forward, token: TokenId) -> Result<usize> {
    fwd.index.support_index(token).ok_or_else(|| {
        Error::Contract(format!("response token {token} has zero probability under the policy"))
    })
}

fn full_tokens(traj: &Trajectory) -> Vec<TokenId> {
    let mut toks = traj.prompt.clone();
    toks.extend(&traj.response);
    toks
}

/// Response tokens that are fed back into the network: everything before a
/// terminating `EOS`.
fn fed_tokens(traj: &Trajectory) -> Vec<TokenId> {
    let mut toks = full_tokens(traj);
    if traj.response.last() == Some(&EOS) {
        toks.pop();
    }
    toks
}

/// Gradient of a loss with respect to support log-probabilities that comes
/// from `coeff * log q_T(y)` with `q_T` the tempered distribution.
fn logprob_head_grad(logp: &[f64], y: usize, coeff: f64, temperature: f64) -> (f64, Vec<f64>) {
    let logq = temper(logp, temperature);
    let g = logq
        .iter()
        .enumerate()
        .map(|(i, lq)| coeff / temperature * (f64::from(u8::from(i == y)) - lq.exp()))
        .collect();
    (coeff * logq[y], g)
}

/// Exact KL of tempered distributions and its gradient with respect to the
/// (untempered) policy log-probabilities.
fn kl_head_grad(logp: &[f64], ref_logp: &[f64], temperature: f64, weight: f64) -> (f64, Vec<f64>) {
    let lq = temper(logp, temperature);
    let lr = temper(ref_logp, temperature);
    let kl: f64 = lq.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
    let g = lq
        .iter()
        .zip(&lr)
        .map(|(a, b)| weight / temperature * a.exp() * ((a - b) - kl))
        .collect();
    (kl, g)
}

/// `Σ_t coeff(t) · log π_θ(y_t | y_<t, x)` and its exact gradient.
pub fn logprob_grad(
    params: &PolicyParams,
    traj: &Trajectory,
    coeffs: &Coefficients,
) -> Result<(f64, Vec<f64>)> {
    let c = coeffs.expand(traj.response.len())?;
    if traj.response.is_empty() {
        return Ok((0.0, vec![0.0; params.num_params()]));
    }
    let fwd = params.forward(&fed_tokens(traj), traj.prompt.len())?;
    let mut objective = 0.0;
    let mut dlogp = Vec::with_capacity(c.len());
    for (k, (&tok, &ck)) in traj.response.iter().zip(&c).enumerate() {
        let y = response_index(&fwd, tok)?;
        let (obj, g) = logprob_head_grad(fwd.logp(k), y, ck, traj.temperature);
        objective += obj;
        dlogp.push(g);
    }
    Ok((objective, params.backward(&fwd, &dlogp)))
}

/// Frozen copy of the policy parameters.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    params: Arc<PolicyParams>,
    iteration: u64,
}

impl ReferenceSnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn shared(&self) -> Arc<PolicyParams> {
        Arc::clone(&self.params)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }
}

pub fn snapshot_reference(params: &PolicyParams, iteration: u64) -> ReferenceSnapshot {
    ReferenceSnapshot {
        params: Arc::new(params.clone()),
        iteration,
    }
}

/// Mean over response positions of the exact per-position KL(π_θ ‖ π_ref).
pub fn token_kl(
    params: &PolicyParams,
    reference: &ReferenceSnapshot,
    traj: &Trajectory,
) -> Result<(f64, Vec<f64>)> {
    if traj.response.is_empty() {
        return Ok((0.0, vec![0.0; params.num_params()]));
    }
    if params.arch() != reference.params().arch() {
        return Err(Error::Contract("policy and reference architectures differ".into()));
    }
    let toks = fed_tokens(traj);
    let fwd = params.forward(&toks, traj.prompt.len())?;
    let rfwd = reference.params().forward(&toks, traj.prompt.len())?;
    let n = traj.response.len();
    let w = 1.0 / n as f64;
    let mut total = 0.0;
    let mut dlogp = Vec::with_capacity(n);
    for k in 0..n {
        let (kl, g) = kl_head_grad(fwd.logp(k), rfwd.logp(k), traj.temperature, w);
        total += kl;
        dlogp.push(g);
    }
    Ok((total * w, params.backward(&fwd, &dlogp)))
}

/// Per-trajectory training signal: `Σ_t c_t log π(y_t) − β · KL`, with one
/// forward/backward pass. Returns (log-prob objective, KL, gradient).
pub fn regularized_grad(
    params: &PolicyParams,
    reference: Option<&ReferenceSnapshot>,
    traj: &Trajectory,
    coeffs: &Coefficients,
    beta: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let c = coeffs.expand(traj.response.len())?;
    if traj.response.is_empty() {
        return Ok((0.0, 0.0, vec![0.0; params.num_params()]));
    }
    let toks = fed_tokens(traj);
    let fwd = params.forward(&toks, traj.prompt.len())?;
    let rfwd = match reference {
        Some(r) if beta != 0.0 => Some(r.params().forward(&toks, traj.prompt.len())?),
        _ => None,
    };
    let n = traj.response.len();
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut dlogp = Vec::with_capacity(n);
    for (k, (&tok, &ck)) in traj.response.iter().zip(&c).enumerate() {
        let y = response_index(&fwd, tok)?;
        let (obj, mut g) = logprob_head_grad(fwd.logp(k), y, ck, traj.temperature);
        objective += obj;
        if let Some(r) = &rfwd {
            let (kl, gk) = kl_head_grad(fwd.logp(k), r.logp(k), traj.temperature, 1.0 / n as f64);
            kl_total += kl;
            for (a, b) in g.iter_mut().zip(gk) {
                *a -= beta * b;
            }
        }
        dlogp.push(g);
    }
    Ok((objective, kl_total / n as f64, params.backward(&fwd, &dlogp)))
}

/// Log-probability vector over the whole vocabulary at response position
/// `k` (−∞ outside the prompt support), for a temperature-1 policy.
pub fn full_vocab_logp(params: &PolicyParams, fwd: &Forward, k: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; params.vocab().size()];
    for (&tok, &lp) in fwd.index.support.iter().zip(fwd.logp(k)) {
        out[tok as usize] = lp;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor {
            label_min: 2,
            label_max: 9,
            width: 8,
            layers: 1,
            heads: 2,
            ff_width: 8,
            max_prompt_len: 16,
            max_response_len: 5,
        }
    }

    fn prompt(v: &Vocab) -> Vec<TokenId> {
        let n = |l| v.node(l).unwrap();
        vec![n(4), n(2), SEP, n(4), n(7), SEP, SRC, n(4), DST, n(7)]
    }

    fn some_traj(p: &PolicyParams, seed_v: u64) -> Trajectory {
        let settings = SamplingSettings {
            temperature: 0.8,
            top_p: 1.0,
            max_response_len: 5,
        };
        sample_internal(p, &prompt(&p.vocab()), &settings, &mut seed::rng(seed_v)).unwrap()
    }

    #[test]
    fn zero_coefficients_give_zero() {
        let p = PolicyParams::init(tiny(), 1, 0.5).unwrap();
        let t = some_traj(&p, 2);
        let (obj, g) = logprob_grad(&p, &t, &Coefficients::Trajectory(0.0)).unwrap();
        assert_eq!(obj, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_coefficients() {
        let p = PolicyParams::init(tiny(), 1, 0.5).unwrap();
        let t = some_traj(&p, 3);
        let w: Vec<f64> = (0..t.len()).map(|i| 0.3 - 0.2 * i as f64).collect();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let (o1, g1) = logprob_grad(&p, &t, &Coefficients::PerPosition(w)).unwrap();
        let (o2, g2) = logprob_grad(&p, &t, &Coefficients::PerPosition(w2)).unwrap();
        assert!((o2 - 2.0 * o1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn coefficient_mismatch_is_contract_error() {
        let p = PolicyParams::init(tiny(), 1, 0.5).unwrap();
        let t = some_traj(&p, 3);
        let bad = Coefficients::PerPosition(vec![1.0; t.len() + 1]);
        assert!(matches!(logprob_grad(&p, &t, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn recorded_logprobs_match_forward() {
        let p = PolicyParams::init(tiny(), 4, 0.6).unwrap();
        let t = some_traj(&p, 9);
        let (obj, _) = logprob_grad(&p, &t, &Coefficients::Trajectory(1.0)).unwrap();
        let recorded: f64 = t.logprobs.iter().sum();
        assert!((obj - recorded).abs() < 1e-9);
        assert!(t.logprobs.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn kl_zero_against_own_snapshot() {
        let p = PolicyParams::init(tiny(), 4, 0.6).unwrap();
        let r = snapshot_reference(&p, 0);
        let t = some_traj(&p, 1);
        let (kl, g) = token_kl(&p, &r, &t).unwrap();
        assert_eq!(kl, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn snapshot_is_independent_copy() {
        let mut p = PolicyParams::init(tiny(), 4, 0.6).unwrap();
        let r1 = snapshot_reference(&p, 0);
        let r2 = snapshot_reference(&p, 0);
        assert_eq!(r1.params(), r2.params());
        p.values[0] += 1.0;
        assert_ne!(r1.params(), &p);
        assert_eq!(r1.params(), r2.params());
    }

    #[test]
    fn reward_is_write_once() {
        let mut t = Trajectory::new(vec![SRC], 1.0);
        t.set_reward(1.0).unwrap();
        assert!(t.set_reward(0.0).is_err());
        assert_eq!(t.reward(), Some(1.0));
    }

    #[test]
    fn nucleus_keeps_smallest_prefix() {
        let logq: Vec<f64> = [0.5, 0.3, 0.15, 0.05].iter().map(|p: &f64| p.ln()).collect();
        assert_eq!(nucleus(&logq, 0.8), vec![0, 1]);
        assert_eq!(nucleus(&logq, 0.81), vec![0, 1, 2]);
        assert_eq!(nucleus(&logq, 1.0).len(), 4);
    }
}
