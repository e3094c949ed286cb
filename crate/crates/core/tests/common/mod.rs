#![allow(dead_code)]

use zrl_core::estimators::Algorithm;
use zrl_core::graphtask::{build_mixture, generate_star, render_instance, Dataset, DifficultySpec, TaskInstance};
use zrl_core::policy::{ArchDescriptor, PolicyParams, SamplingSettings, TokenId};
use zrl_core::trainer::TrainConfig;

pub const LABEL_MIN: u32 = 2;
pub const LABEL_MAX: u32 = 9;

/// Well under a thousand parameters.
pub fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor {
        label_min: LABEL_MIN,
        label_max: LABEL_MAX,
        width: 6,
        layers: 1,
        heads: 2,
        ff_width: 6,
        max_prompt_len: 12,
        max_response_len: 5,
    }
}

pub fn tiny_params(seed: u64, std: f64) -> PolicyParams {
    PolicyParams::init(tiny_arch(), seed, std).unwrap()
}

pub fn instance(degree: usize, path_len: usize, seed: u64) -> TaskInstance {
    let spec = DifficultySpec::new(degree, path_len).with_labels(LABEL_MIN, LABEL_MAX);
    render_instance(&generate_star(&spec, seed).unwrap(), seed)
}

pub fn prompt(params: &PolicyParams, inst: &TaskInstance) -> Vec<TokenId> {
    params.vocab().encode_instance(inst).unwrap()
}

pub fn sampling(max_response_len: usize) -> SamplingSettings {
    SamplingSettings {
        temperature: 1.0,
        top_p: 1.0,
        max_response_len,
    }
}

pub fn tiny_config(algorithm: Algorithm) -> TrainConfig {
    let mut c = TrainConfig::new(algorithm);
    let a = tiny_arch();
    c.model.label_min = a.label_min;
    c.model.label_max = a.label_max;
    c.model.width = a.width;
    c.model.layers = a.layers;
    c.model.heads = a.heads;
    c.model.ff_width = a.ff_width;
    c.model.max_prompt_len = a.max_prompt_len;
    c.model.init_std = 0.5;
    c.max_response_len = a.max_response_len;
    c.batch_prompts = 3;
    c.group_size = 4;
    c.mc_rollouts = 2;
    c.chunk_size = 2;
    c.eval_interval = 2;
    c.max_iterations = 4;
    c.learning_rate = 1e-2;
    c.seed = 11;
    c
}

pub fn tiny_dataset(mix: &str, n: usize, seed: u64) -> Dataset {
    let comps = zrl_core::graphtask::parse_mixture(mix, LABEL_MIN, LABEL_MAX).unwrap();
    build_mixture(&comps, n, seed).unwrap()
}
