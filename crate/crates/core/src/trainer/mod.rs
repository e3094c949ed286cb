//! On-policy training loop.

mod config;
mod eval;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{kl_schedule, KlSchedule, ModelConfig, TrainConfig};
pub use eval::{eval_subset, evaluate, tally, EvalReport, InstanceResult, SuccessRates};

use crate::error::{Error, Result};
use crate::estimators::{
    bon_coefficients, group_advantages, progress_coefficients, vineppo_advantages, Algorithm,
    ProverSettings,
};
use crate::graphtask::{Dataset, DatasetItem, TaskInstance};
use crate::policy::{
    regularized_grad, sample_internal, snapshot_reference, Coefficients, PolicyParams,
    ReferenceSnapshot, RolloutBackend, TokenId, Trajectory, Vocab,
};
use crate::seed::{self, stream};

/// Adam moments for gradient ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One ascent step. Coordinates whose step is exactly zero are left
    /// untouched, so a zero gradient from a fresh optimizer is a no-op.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            if step != 0.0 {
                *p += step;
            }
        }
    }
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: PolicyParams,
    pub reference: ReferenceSnapshot,
    pub optimizer: Adam,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub learning_rate: f64,
    pub lr_halved: bool,
}

impl TrainerState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = PolicyParams::init(config.arch(), config.seed, config.model.init_std)?;
        Ok(Self::from_params(params, config))
    }

    pub fn from_params(params: PolicyParams, config: &TrainConfig) -> Self {
        let reference = snapshot_reference(&params, 0);
        let optimizer = Adam::new(
            params.num_params(),
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        Self {
            params,
            reference,
            optimizer,
            iteration: 0,
            learning_rate: config.learning_rate,
            lr_halved: false,
        }
    }
}

/// Reward for a sampled trajectory.
pub type RewardFn<'a> = dyn Fn(&TaskInstance, &Trajectory, &Vocab) -> f64 + Sync + 'a;
/// Trajectory-level coefficients for one group of rewards.
pub type GroupCoefficientFn<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// Optional substitutions used by experiments and tests.
#[derive(Default, Clone, Copy)]
pub struct StepHooks<'a> {
    /// Replaces the verifier.
    pub reward: Option<&'a RewardFn<'a>>,
    /// Replaces the trajectory-level coefficients of `drgrpo` and `bon`, and
    /// the group advantage inside `progress`.
    pub group_coefficients: Option<&'a GroupCoefficientFn<'a>>,
    /// Replaces the reference-policy prover used by `progress`.
    pub prover: Option<&'a RolloutBackend>,
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub mean_train_reward: f64,
    pub train_reward: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub kl: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub nonzero_step_fraction: Option<f64>,
    pub retries: u32,
}

struct Direction {
    grad: Vec<f64>,
    mean_reward: f64,
    train_reward: BTreeMap<String, f64>,
    kl: f64,
    nonzero: Option<f64>,
}

struct Sampled {
    traj: Trajectory,
    group: usize,
}

fn default_reward(instance: &TaskInstance, traj: &Trajectory, vocab: &Vocab) -> f64 {
    crate::graphtask::score(instance, traj.answer(vocab).as_deref())
}

#[allow(clippy::too_many_arguments)]
fn coefficients_for_group(
    algorithm: Algorithm,
    items: &DatasetItem,
    group: &[Trajectory],
    config: &TrainConfig,
    hooks: &StepHooks<'_>,
    policy: &RolloutBackend,
    prover: &RolloutBackend,
    seeds: &[u64],
) -> Result<Vec<(Coefficients, Option<f64>)>> {
    let rewards: Vec<f64> = group
        .iter()
        .map(|t| t.reward().expect("scored before estimation"))
        .collect();
    let trajectory_level = |default: &dyn Fn(&[f64]) -> Result<Vec<f64>>| -> Result<Vec<f64>> {
        match hooks.group_coefficients {
            Some(f) => f(&rewards),
            None => default(&rewards),
        }
    };
    match algorithm {
        Algorithm::Drgrpo => Ok(trajectory_level(&group_advantages)?
            .into_iter()
            .map(|a| (Coefficients::Trajectory(a), None))
            .collect()),
        Algorithm::Bon => {
            let f = |r: &[f64]| bon_coefficients(r, config.bon_n, config.weight_clip, config.p_fail_eps);
            Ok(trajectory_level(&f)?
                .into_iter()
                .map(|a| (Coefficients::Trajectory(a), None))
                .collect())
        }
        Algorithm::Vineppo => group
            .par_iter()
            .zip(seeds)
            .map(|(t, &s)| {
                let r = vineppo_advantages(
                    &items.instance,
                    t,
                    policy,
                    config.mc_rollouts,
                    config.chunk_size,
                    s,
                )?;
                Ok((r.coefficients(t.len())?, r.nonzero_step_fraction))
            })
            .collect(),
        Algorithm::Progress => {
            let adv = trajectory_level(&group_advantages)?;
            let settings = ProverSettings {
                rollouts: config.mc_rollouts,
                best_of: config.prover_best_of,
                alpha: config.progress_alpha,
                chunk_size: config.chunk_size,
                mode: config.bestofn_mode,
            };
            group
                .par_iter()
                .zip(adv)
                .zip(seeds)
                .map(|((t, a), &s)| {
                    let r = progress_coefficients(&items.instance, t, a, prover, &settings, s)?;
                    Ok((r.coefficients(t.len())?, r.nonzero_step_fraction))
                })
                .collect()
        }
    }
}

fn ascent_direction(
    state: &TrainerState,
    batch: &[&DatasetItem],
    config: &TrainConfig,
    hooks: &StepHooks<'_>,
    beta: f64,
    stream_tag: u64,
) -> Result<Direction> {
    let t = state.iteration;
    let vocab = state.params.vocab();
    let settings = config.sampling();
    let g = config.group_size;
    let prompts: Vec<Vec<TokenId>> = batch
        .iter()
        .map(|it| vocab.encode_instance(&it.instance))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..batch.len()).flat_map(|j| (0..g).map(move |k| (j, k))).collect();
    let sampled: Vec<Sampled> = jobs
        .par_iter()
        .map(|&(j, k)| {
            let mut rng = seed::rng_for(config.seed, &[stream_tag, t, j as u64, k as u64]);
            let mut traj = sample_internal(&state.params, &prompts[j], &settings, &mut rng)?;
            let r = match hooks.reward {
                Some(f) => f(&batch[j].instance, &traj, &vocab),
                None => default_reward(&batch[j].instance, &traj, &vocab),
            };
            traj.set_reward(r)?;
            Ok(Sampled { traj, group: j })
        })
        .collect::<Result<_>>()?;

    let mut groups: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(g); batch.len()];
    for s in sampled {
        groups[s.group].push(s.traj);
    }

    let policy = RolloutBackend::internal(Arc::new(state.params.clone()), settings);
    let reference_prover;
    let prover = match hooks.prover {
        Some(p) => p,
        None => {
            reference_prover = RolloutBackend::internal(state.reference.shared(), settings);
            &reference_prover
        }
    };
    let coeffs: Vec<Vec<(Coefficients, Option<f64>)>> = groups
        .iter()
        .enumerate()
        .map(|(j, grp)| {
            let seeds: Vec<u64> = (0..grp.len())
                .map(|k| seed::derive(config.seed, &[stream::ESTIMATE, stream_tag, t, j as u64, k as u64]))
                .collect();
            coefficients_for_group(config.algorithm, batch[j], grp, config, hooks, &policy, prover, &seeds)
        })
        .collect::<Result<_>>()?;

    let flat: Vec<(&Trajectory, &Coefficients)> = groups
        .iter()
        .zip(&coeffs)
        .flat_map(|(grp, cs)| grp.iter().zip(cs.iter().map(|(c, _)| c)))
        .collect();
    let n = flat.len() as f64;
    let reference = (beta != 0.0).then_some(&state.reference);

    // Gradients are computed micro-batch by micro-batch but always summed in
    // trajectory order, so the micro-batch size cannot change the result.
    let mut grad = vec![0.0; state.params.num_params()];
    let mut kl_sum = 0.0;
    for mb in flat.chunks(config.micro_batch) {
        let parts: Vec<Option<(f64, Vec<f64>)>> = mb
            .par_iter()
            .map(|&(traj, c)| {
                let silent = match c {
                    Coefficients::Trajectory(a) => *a == 0.0,
                    Coefficients::PerPosition(v) => v.iter().all(|&a| a == 0.0),
                };
                if silent && reference.is_none() {
                    return Ok(None);
                }
                let (_, kl, g) = regularized_grad(&state.params, reference, traj, c, beta)?;
                Ok(Some((kl, g)))
            })
            .collect::<Result<_>>()?;
        for (kl, g) in parts.into_iter().flatten() {
            kl_sum += kl;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    for a in grad.iter_mut() {
        *a /= n;
    }

    let mut by_diff: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (item, grp) in batch.iter().zip(&groups) {
        let e = by_diff.entry(item.difficulty.to_string()).or_default();
        for tr in grp {
            let r = tr.reward().expect("scored");
            total += r;
            e.0 += r;
            e.1 += 1;
        }
    }
    let fractions: Vec<f64> = coeffs.iter().flatten().filter_map(|(_, f)| *f).collect();
    Ok(Direction {
        grad,
        mean_reward: total / n,
        train_reward: by_diff.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        kl: kl_sum / n,
        nonzero: (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
    })
}

/// Sample groups for `batch` from the current policy, compute coefficients,
/// and apply one optimizer update.
///
/// A non-finite direction aborts the step, halves the learning rate (once
/// per run) and retries with fresh samples; a second failure is fatal.
pub fn train_step(
    state: &mut TrainerState,
    batch: &[&DatasetItem],
    config: &TrainConfig,
    hooks: &StepHooks<'_>,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let beta = kl_schedule(state.iteration, &config.kl);
    let mut retries = 0;
    let dir = loop {
        let tag = if retries == 0 { stream::ROLLOUT } else { stream::RETRY };
        let dir = ascent_direction(state, batch, config, hooks, beta, tag)?;
        if dir.grad.iter().all(|g| g.is_finite()) && dir.kl.is_finite() {
            break dir;
        }
        if retries > 0 {
            return Err(Error::NonFinite(format!(
                "gradient at iteration {} after retrying with halved learning rate",
                state.iteration + 1
            )));
        }
        retries += 1;
        if !state.lr_halved {
            state.learning_rate *= 0.5;
            state.lr_halved = true;
        }
    };
    let lr = state.learning_rate;
    state.optimizer.ascend(&mut state.params.values, &dir.grad, lr);
    state.iteration += 1;
    if let Some(k) = config.reference_refresh {
        if state.iteration.is_multiple_of(k) {
            state.reference = snapshot_reference(&state.params, state.iteration);
        }
    }
    Ok(StepReport {
        iteration: state.iteration,
        mean_train_reward: dir.mean_reward,
        train_reward: dir.train_reward,
        grad_norm: dir.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        kl: dir.kl,
        beta,
        learning_rate: lr,
        nonzero_step_fraction: dir.nonzero,
        retries,
    })
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_train_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub train_reward: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub beta: f64,
    pub learning_rate: f64,
    /// Held-out success per difficulty; present on evaluation iterations.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub success: BTreeMap<String, SuccessRates>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonzero_step_fraction: Option<f64>,
    #[serde(default)]
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl MetricsRecord {
    fn initial(config: &TrainConfig, state: &TrainerState) -> Self {
        Self {
            iteration: state.iteration,
            mean_train_reward: None,
            train_reward: BTreeMap::new(),
            grad_norm: None,
            kl: None,
            beta: kl_schedule(state.iteration, &config.kl),
            learning_rate: state.learning_rate,
            success: BTreeMap::new(),
            nonzero_step_fraction: None,
            retries: 0,
            wall_clock_secs: None,
        }
    }

    fn from_step(r: StepReport) -> Self {
        Self {
            iteration: r.iteration,
            mean_train_reward: Some(r.mean_train_reward),
            train_reward: r.train_reward,
            grad_norm: Some(r.grad_norm),
            kl: Some(r.kl),
            beta: r.beta,
            learning_rate: r.learning_rate,
            success: BTreeMap::new(),
            nonzero_step_fraction: r.nonzero_step_fraction,
            retries: r.retries,
            wall_clock_secs: None,
        }
    }
}

/// Options for [`run`] that do not affect the trajectory of training.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stamp each record with elapsed seconds (makes files run-dependent).
    pub record_wall_clock: bool,
}

/// Uniform with-replacement batch for step `iteration`.
pub fn draw_batch<'d>(train: &'d Dataset, config: &TrainConfig, iteration: u64) -> Vec<&'d DatasetItem> {
    let mut rng = seed::rng_for(config.seed, &[stream::BATCH, iteration]);
    (0..config.batch_prompts)
        .map(|_| &train.items[rng.gen_range(0..train.items.len())])
        .collect()
}

/// Train from `state` until the iteration or wall-clock budget runs out,
/// handing each record to `sink` as soon as it exists. The first record is
/// the evaluation of the starting parameters.
pub fn run<F>(
    config: &TrainConfig,
    mut state: TrainerState,
    train: &Dataset,
    test: &Dataset,
    hooks: &StepHooks<'_>,
    options: RunOptions,
    mut sink: F,
) -> Result<TrainerState>
where
    F: FnMut(&MetricsRecord, &TrainerState) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let started = Instant::now();
    let eval_items = eval_subset(test, config.eval_size);
    let sampling = config.sampling();
    let stamp = |r: &mut MetricsRecord| {
        if options.record_wall_clock {
            r.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        }
    };

    let mut first = MetricsRecord::initial(config, &state);
    if !eval_items.is_empty() {
        first.success = evaluate(&state.params, &eval_items, &sampling, config.seed, state.iteration)?.rates;
    }
    stamp(&mut first);
    sink(&first, &state)?;

    let end = state.iteration + config.max_iterations;
    while state.iteration < end {
        if let Some(limit) = config.wall_clock_secs {
            if started.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        let batch = draw_batch(train, config, state.iteration);
        let report = train_step(&mut state, &batch, config, hooks)?;
        let mut rec = MetricsRecord::from_step(report);
        if !eval_items.is_empty() && (state.iteration.is_multiple_of(config.eval_interval) || state.iteration == end) {
            rec.success = evaluate(&state.params, &eval_items, &sampling, config.seed, state.iteration)?.rates;
        }
        stamp(&mut rec);
        sink(&rec, &state)?;
    }
    Ok(state)
}
