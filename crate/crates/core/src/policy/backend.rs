//! Sources of rollouts: the in-process policy, or a frozen text model behind HTTP.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::network::PolicyParams;
use super::vocab::{TokenId, Vocab, EOS};
use super::{rollout, sample_internal, SamplingSettings, Trajectory};
use crate::error::{Error, Result};
use crate::graphtask::{extract_answer, TaskInstance};
use crate::seed;

/// Connection settings for an external generation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    /// Base URL; requests go to `{endpoint}/generate`.
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    2
}
fn default_max_tokens() -> usize {
    1024
}

#[derive(Debug, Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    n: usize,
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    completions: Vec<String>,
}

/// Sample-only client for a text model.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub config: ExternalConfig,
    pub settings: SamplingSettings,
    pub vocab: Vocab,
    agent: ureq::Agent,
}

impl ExternalBackend {
    pub fn new(config: ExternalConfig, settings: SamplingSettings, vocab: Vocab) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        Self {
            config,
            settings,
            vocab,
            agent,
        }
    }

    fn url(&self) -> String {
        format!("{}/generate", self.config.endpoint.trim_end_matches('/'))
    }

    /// POST one generation request, retrying up to the configured budget.
    pub fn generate(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let body = GenerateRequest {
            prompt,
            n,
            temperature: self.settings.temperature,
            top_p: self.settings.top_p,
            max_tokens: self.config.max_tokens,
        };
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match self.agent.post(&self.url()).send_json(&body) {
                Ok(resp) => match resp.into_json::<GenerateResponse>() {
                    Ok(parsed) if parsed.completions.len() == n => return Ok(parsed.completions),
                    Ok(parsed) => {
                        last = format!(
                            "expected {n} completions, received {}",
                            parsed.completions.len()
                        )
                    }
                    Err(e) => last = format!("malformed response body: {e}"),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    fn prompt_text(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<(String, String)> {
        let (edges, source, destination) = self.vocab.decode_prompt(prompt)?;
        let inst = TaskInstance {
            edges,
            source,
            destination,
            gold_path: Vec::new(),
        };
        let prefix_text = self.vocab.response_text(prefix);
        let mut text = inst.prompt_text();
        if !prefix_text.is_empty() {
            text.push_str("\n\n");
            text.push_str(&prefix_text);
        }
        Ok((text, prefix_text))
    }
}

/// Result of completing a prefix once.
#[derive(Debug, Clone)]
pub struct Completion {
    /// What the verifier extracts from prefix + continuation.
    pub answer: Option<String>,
}

/// Where rollouts come from. Only the internal variant exposes parameters,
/// so no gradient operation can be handed an external model.
#[derive(Debug, Clone)]
pub enum RolloutBackend {
    Internal {
        params: Arc<PolicyParams>,
        settings: SamplingSettings,
    },
    External(ExternalBackend),
}

impl RolloutBackend {
    pub fn internal(params: Arc<PolicyParams>, settings: SamplingSettings) -> Self {
        Self::Internal { params, settings }
    }

    pub fn settings(&self) -> &SamplingSettings {
        match self {
            Self::Internal { settings, .. } => settings,
            Self::External(b) => &b.settings,
        }
    }

    pub fn vocab(&self) -> Vocab {
        match self {
            Self::Internal { params, .. } => params.vocab(),
            Self::External(b) => b.vocab,
        }
    }

    pub fn sample(&self, prompt: &[TokenId], seed_value: u64) -> Result<Trajectory> {
        match self {
            Self::Internal { params, settings } => {
                sample_internal(params, prompt, settings, &mut seed::rng(seed_value))
            }
            Self::External(b) => {
                let (text, _) = b.prompt_text(prompt, &[])?;
                let completion = b
                    .generate(&text, 1)?
                    .pop()
                    .expect("generate returns exactly n completions");
                let mut traj = Trajectory::new(prompt.to_vec(), b.settings.scoring_temperature());
                traj.text = Some(completion);
                Ok(traj)
            }
        }
    }

    /// Complete `prompt ++ prefix` independently `n` times.
    pub fn complete(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
        n: usize,
        seed_value: u64,
    ) -> Result<Vec<Completion>> {
        match self {
            Self::Internal { params, settings } => {
                let vocab = params.vocab();
                let limit = settings.max_response_len.min(params.arch().max_response_len);
                if prefix.last() == Some(&EOS) || prefix.len() >= limit {
                    let answer = vocab.answer_from_tokens(prefix);
                    return Ok(vec![Completion { answer }; n]);
                }
                let mut base = params.prefill(prompt)?;
                for &t in prefix {
                    base.push(params, t)?;
                }
                (0..n)
                    .map(|i| {
                        let mut rng = seed::rng_for(seed_value, &[i as u64]);
                        let (cont, _, _) = rollout(params, base.clone(), settings, &mut rng)?;
                        let mut full = prefix.to_vec();
                        full.extend(cont);
                        Ok(Completion {
                            answer: vocab.answer_from_tokens(&full),
                        })
                    })
                    .collect()
            }
            Self::External(b) => {
                let (text, prefix_text) = b.prompt_text(prompt, prefix)?;
                let outs = b.generate(&text, n)?;
                Ok(outs
                    .into_iter()
                    .map(|c| Completion {
                        answer: extract_answer(&format!("{prefix_text}{c}")),
                    })
                    .collect())
            }
        }
    }
}
