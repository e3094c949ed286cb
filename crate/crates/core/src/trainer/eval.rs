use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graphtask::{score, Dataset, DatasetItem};
use crate::policy::{sample_internal, PolicyParams, SamplingSettings};
use crate::seed::{self, stream};

/// Greedy and sampled success for one difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    pub greedy: f64,
    pub sampled: f64,
    pub count: usize,
}

/// Outcome of decoding one held-out instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub index: usize,
    pub difficulty: String,
    pub greedy_answer: Option<String>,
    pub greedy_score: f64,
    pub sampled_answer: Option<String>,
    pub sampled_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rates: BTreeMap<String, SuccessRates>,
    pub instances: Vec<InstanceResult>,
}

/// At most `per_difficulty` items of each difficulty, in dataset order.
pub fn eval_subset(testset: &Dataset, per_difficulty: Option<usize>) -> Vec<&DatasetItem> {
    let Some(cap) = per_difficulty else {
        return testset.items.iter().collect();
    };
    let mut seen: BTreeMap<_, usize> = BTreeMap::new();
    testset
        .items
        .iter()
        .filter(|it| {
            let n = seen.entry(it.difficulty.clone()).or_default();
            *n += 1;
            *n <= cap
        })
        .collect()
}

/// Decode every item once greedily and once with `sampling`; success is the
/// mean score per difficulty.
pub fn evaluate(
    params: &PolicyParams,
    items: &[&DatasetItem],
    sampling: &SamplingSettings,
    seed_value: u64,
    iteration: u64,
) -> Result<EvalReport> {
    let vocab = params.vocab();
    let greedy = SamplingSettings::greedy(sampling.max_response_len);
    let instances = items
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let prompt = vocab.encode_instance(&item.instance)?;
            let mut rng = seed::rng_for(seed_value, &[stream::EVAL, iteration, index as u64]);
            let g = sample_internal(params, &prompt, &greedy, &mut rng)?;
            let s = sample_internal(params, &prompt, sampling, &mut rng)?;
            let greedy_answer = g.answer(&vocab);
            let sampled_answer = s.answer(&vocab);
            Ok(InstanceResult {
                index,
                difficulty: item.difficulty.to_string(),
                greedy_score: score(&item.instance, greedy_answer.as_deref()),
                sampled_score: score(&item.instance, sampled_answer.as_deref()),
                greedy_answer,
                sampled_answer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rates: tally(&instances),
        instances,
    })
}

/// Per-difficulty mean scores of an instance log.
pub fn tally(instances: &[InstanceResult]) -> BTreeMap<String, SuccessRates> {
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for r in instances {
        let e = sums.entry(r.difficulty.clone()).or_default();
        e.0 += r.greedy_score;
        e.1 += r.sampled_score;
        e.2 += 1;
    }
    sums.into_iter()
        .map(|(k, (g, s, n))| {
            (
                k,
                SuccessRates {
                    greedy: g / n as f64,
                    sampled: s / n as f64,
                    count: n,
                },
            )
        })
        .collect()
}
