use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Algorithm, BestOfNMode, DEFAULT_P_FAIL_EPS};
use crate::graphtask::{Label, DEFAULT_LABEL_MAX, DEFAULT_LABEL_MIN};
use crate::policy::{ArchDescriptor, SamplingSettings};

/// KL coefficient schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum KlSchedule {
    Constant { value: f64 },
    /// Geometric interpolation from `start` to `end` over `horizon`
    /// iterations, then constant at `end`.
    Geometric { start: f64, end: f64, horizon: u64 },
}

impl Default for KlSchedule {
    fn default() -> Self {
        Self::Constant { value: 1e-3 }
    }
}

impl KlSchedule {
    /// The decaying schedule used for Best-of-N training.
    pub fn bon_decay(horizon: u64) -> Self {
        Self::Geometric {
            start: 0.1,
            end: 0.001,
            horizon,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Constant { value } if value >= 0.0 && value.is_finite() => Ok(()),
            Self::Constant { .. } => Err(Error::Config("kl.value must be finite and >= 0".into())),
            Self::Geometric { start, end, horizon } => {
                if !(start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()) {
                    return Err(Error::Config("kl.start and kl.end must be positive".into()));
                }
                if horizon == 0 {
                    return Err(Error::Config("kl.horizon must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// `β` in effect at `iteration`.
pub fn kl_schedule(iteration: u64, schedule: &KlSchedule) -> f64 {
    match *schedule {
        KlSchedule::Constant { value } => value,
        KlSchedule::Geometric { start, end, horizon } => {
            if iteration >= horizon {
                end
            } else if iteration == 0 {
                start
            } else {
                let frac = iteration as f64 / horizon as f64;
                start * (end / start).powf(frac)
            }
        }
    }
}

/// Policy network shape and initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub label_min: Label,
    pub label_max: Label,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_prompt_len: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            label_min: DEFAULT_LABEL_MIN,
            label_max: DEFAULT_LABEL_MAX,
            width: 64,
            layers: 2,
            heads: 4,
            ff_width: 128,
            max_prompt_len: 128,
            init_std: 0.1,
        }
    }
}

/// Everything the training loop needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    #[serde(default = "d::group_size")]
    pub group_size: usize,
    #[serde(default = "d::batch_prompts")]
    pub batch_prompts: usize,
    #[serde(default = "d::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d::adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub kl: KlSchedule,
    /// Refresh the reference snapshot every this many iterations.
    #[serde(default)]
    pub reference_refresh: Option<u64>,
    #[serde(default = "d::mc_rollouts")]
    pub mc_rollouts: usize,
    #[serde(default = "d::chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "d::progress_alpha")]
    pub progress_alpha: f64,
    #[serde(default = "d::prover_best_of")]
    pub prover_best_of: usize,
    #[serde(default)]
    pub bestofn_mode: BestOfNMode,
    #[serde(default = "d::bon_n")]
    pub bon_n: usize,
    #[serde(default = "d::weight_clip")]
    pub weight_clip: f64,
    #[serde(default = "d::p_fail_eps")]
    pub p_fail_eps: f64,
    #[serde(default = "d::temperature")]
    pub temperature: f64,
    #[serde(default = "d::top_p")]
    pub top_p: f64,
    #[serde(default = "d::max_response_len")]
    pub max_response_len: usize,
    #[serde(default = "d::discount")]
    pub discount: f64,
    /// Held-out instances evaluated per difficulty; all when absent.
    #[serde(default)]
    pub eval_size: Option<usize>,
    #[serde(default = "d::eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "d::max_iterations")]
    pub max_iterations: u64,
    #[serde(default)]
    pub wall_clock_secs: Option<f64>,
    /// Trajectories whose gradients are in flight at once.
    #[serde(default = "d::micro_batch")]
    pub micro_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
}

mod d {
    pub fn group_size() -> usize {
        5
    }
    pub fn batch_prompts() -> usize {
        8
    }
    pub fn learning_rate() -> f64 {
        3e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn mc_rollouts() -> usize {
        3
    }
    pub fn chunk_size() -> usize {
        16
    }
    pub fn progress_alpha() -> f64 {
        5.0
    }
    pub fn prover_best_of() -> usize {
        4
    }
    pub fn bon_n() -> usize {
        8
    }
    pub fn weight_clip() -> f64 {
        3.0
    }
    pub fn p_fail_eps() -> f64 {
        super::DEFAULT_P_FAIL_EPS
    }
    pub fn temperature() -> f64 {
        0.6
    }
    pub fn top_p() -> f64 {
        0.999
    }
    pub fn max_response_len() -> usize {
        16
    }
    pub fn discount() -> f64 {
        1.0
    }
    pub fn eval_interval() -> u64 {
        10
    }
    pub fn max_iterations() -> u64 {
        100
    }
    pub fn micro_batch() -> usize {
        4
    }
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        let mut c: Self = toml::from_str(&format!("algorithm = \"{algorithm}\""))
            .expect("defaults deserialize");
        if algorithm == Algorithm::Bon {
            c.kl = KlSchedule::bon_decay(c.max_iterations.max(1));
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.discount != 1.0 {
            return bad(format!("discount is fixed at 1, got {}", self.discount));
        }
        let positive_counts = [
            ("batch_prompts", self.batch_prompts),
            ("mc_rollouts", self.mc_rollouts),
            ("chunk_size", self.chunk_size),
            ("prover_best_of", self.prover_best_of),
            ("bon_n", self.bon_n),
            ("max_response_len", self.max_response_len),
            ("micro_batch", self.micro_batch),
        ];
        for (name, v) in positive_counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if !(self.weight_clip > 0.0) {
            return bad("weight_clip must be positive".into());
        }
        if !(self.p_fail_eps > 0.0 && self.p_fail_eps < 0.5) {
            return bad("p_fail_eps must lie in (0, 0.5)".into());
        }
        if !self.progress_alpha.is_finite() || self.progress_alpha < 0.0 {
            return bad("progress_alpha must be finite and >= 0".into());
        }
        if let Some(w) = self.wall_clock_secs {
            if !(w > 0.0) {
                return bad("wall_clock_secs must be positive".into());
            }
        }
        if self.reference_refresh == Some(0) {
            return bad("reference_refresh must be positive when set".into());
        }
        if !(self.model.init_std > 0.0) {
            return bad("model.init_std must be positive".into());
        }
        self.kl.validate()?;
        self.arch().validate()
    }

    pub fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            label_min: self.model.label_min,
            label_max: self.model.label_max,
            width: self.model.width,
            layers: self.model.layers,
            heads: self.model.heads,
            ff_width: self.model.ff_width,
            max_prompt_len: self.model.max_prompt_len,
            max_response_len: self.max_response_len,
        }
    }

    pub fn sampling(&self) -> SamplingSettings {
        SamplingSettings {
            temperature: self.temperature,
            top_p: self.top_p,
            max_response_len: self.max_response_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = KlSchedule::bon_decay(100);
        assert_eq!(kl_schedule(0, &s), 0.1);
        assert_eq!(kl_schedule(100, &s), 0.001);
        assert_eq!(kl_schedule(1000, &s), 0.001);
        assert!((kl_schedule(50, &s) - 0.01).abs() < 1e-12);
        let c = KlSchedule::default();
        assert!((0..50).all(|i| kl_schedule(i, &c) == 1e-3));
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::new(Algorithm::Drgrpo);
        assert_eq!(c.group_size, 5);
        assert_eq!(c.temperature, 0.6);
        assert_eq!(c.top_p, 0.999);
        assert_eq!(c.kl, KlSchedule::Constant { value: 1e-3 });
        c.validate().unwrap();
        assert!(matches!(TrainConfig::new(Algorithm::Bon).kl, KlSchedule::Geometric { .. }));

        let mut g1 = c.clone();
        g1.group_size = 1;
        assert!(matches!(g1.validate(), Err(Error::Config(_))));
        let mut gamma = c.clone();
        gamma.discount = 0.9;
        assert!(gamma.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<TrainConfig>("algorithm = \"drgrpo\"\ngroup_sise = 4").unwrap_err();
        assert!(err.to_string().contains("group_sise"));
        let kl: TrainConfig =
            toml::from_str("algorithm = \"bon\"\nkl = { kind = \"geometric\", start = 0.1, end = 0.001, horizon = 10 }")
                .unwrap();
        assert_eq!(kl_schedule(10, &kl.kl), 0.001);
    }
}
