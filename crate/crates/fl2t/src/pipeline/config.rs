//! Experiment configuration: JSON-loadable, fully defaulted, validated
//! with field-named errors before anything runs.

use crate::aggregation::LambdaMode;
use crate::error::{Fl2tError, Result};
use crate::numerics::SeededRng;
use serde::{Deserialize, Serialize};

/// The order concepts are visited in during consolidation.
///
/// Serializes either as an explicit permutation (`[2, 0, 1]`) or as a
/// string: `"canonical"` for ascending ids, `"shuffled:<seed>"` for a
/// seeded shuffle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskOrder {
    Explicit(Vec<usize>),
    Named(String),
}

impl Default for TaskOrder {
    fn default() -> Self {
        TaskOrder::Named("canonical".to_owned())
    }
}

impl TaskOrder {
    /// The concrete visiting order for `concepts` tasks.
    pub fn resolve(&self, concepts: usize) -> Result<Vec<usize>> {
        match self {
            TaskOrder::Explicit(order) => {
                if order.len() != concepts {
                    return Err(Fl2tError::Config {
                        field: "order".into(),
                        message: format!(
                            "expected a permutation of {concepts} concepts, got {} entries",
                            order.len()
                        ),
                    });
                }
                let mut seen = vec![false; concepts];
                for &i in order {
                    if i >= concepts || seen[i] {
                        return Err(Fl2tError::Config {
                            field: "order".into(),
                            message: format!("not a permutation of 0..{concepts}"),
                        });
                    }
                    seen[i] = true;
                }
                Ok(order.clone())
            }
            TaskOrder::Named(name) => {
                if name == "canonical" {
                    return Ok((0..concepts).collect());
                }
                if let Some(seed_str) = name.strip_prefix("shuffled:") {
                    let seed: u64 = seed_str.parse().map_err(|_| Fl2tError::Config {
                        field: "order".into(),
                        message: format!("bad shuffle seed in {name:?}"),
                    })?;
                    let mut order: Vec<usize> = (0..concepts).collect();
                    let mut rng = SeededRng::new(seed);
                    for i in (1..concepts).rev() {
                        let j = rng.next_index(i + 1);
                        order.swap(i, j);
                    }
                    return Ok(order);
                }
                Err(Fl2tError::Config {
                    field: "order".into(),
                    message: format!(
                        "unknown order {name:?}; use \"canonical\", \"shuffled:<seed>\", or a permutation"
                    ),
                })
            }
        }
    }
}

/// Every knob of an experiment. `{}` deserializes to the defaults; unknown
/// fields are rejected so typos cannot silently fall back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Number of concepts, each with its own data and adapter.
    pub concepts: usize,
    pub samples_per_concept: usize,
    pub batch_size: usize,
    /// Token and decoder embedding width.
    pub embed_dim: usize,
    /// Denoiser hidden width (what the adapters attach to).
    pub hidden_dim: usize,
    pub denoiser_layers: usize,
    /// Adapter rank.
    pub rank: usize,
    /// Shared-subspace dimension; defaults to the adapter rank.
    pub subspace_dim: Option<usize>,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub lr_tokens: f64,
    pub lr_network: f64,
    pub r1_coeff: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau: f64,
    pub decoder_layers: usize,
    pub layer_norm: bool,
    pub lambda_mode: LambdaMode,
    pub merge_scale: f64,
    pub order: TaskOrder,
    pub eval_draws: usize,
    pub eval_samples: usize,
    /// Shared vocabulary size in front of the concept tokens.
    pub context_tokens: usize,
    /// How many context tokens open each prompt.
    pub prompt_context: usize,
    pub time_width: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 7,
            concepts: 3,
            samples_per_concept: 64,
            batch_size: 4,
            embed_dim: 16,
            hidden_dim: 64,
            denoiser_layers: 4,
            rank: 4,
            subspace_dim: None,
            t_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            epochs_step1: 50,
            epochs_step2: 50,
            lr_tokens: 1e-3,
            lr_network: 1e-4,
            r1_coeff: 1.0,
            gamma1: 0.1,
            gamma2: 0.1,
            tau: 0.1,
            decoder_layers: 2,
            layer_norm: false,
            lambda_mode: LambdaMode::Cosine,
            merge_scale: 32.0,
            order: TaskOrder::default(),
            eval_draws: 256,
            eval_samples: 512,
            context_tokens: 8,
            prompt_context: 2,
            time_width: 8,
        }
    }
}

fn check(ok: bool, field: &str, message: String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Fl2tError::Config {
            field: field.to_owned(),
            message,
        })
    }
}

impl ExperimentConfig {
    /// Parse from JSON text, apply defaults, and validate.
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Fl2tError::Config {
                field: "<root>".into(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Load from a JSON file.
    pub fn from_path(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_json(&text)
    }

    /// Canonical JSON form; what run manifests hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(
            (1..=32).contains(&self.concepts),
            "concepts",
            format!("{} concepts outside the supported range 1..=32", self.concepts),
        )?;
        check(
            self.samples_per_concept >= 1,
            "samples_per_concept",
            "need at least 1 sample".into(),
        )?;
        check(
            1 <= self.batch_size && self.batch_size <= self.samples_per_concept,
            "batch_size",
            format!(
                "batch size {} must lie in 1..={}",
                self.batch_size, self.samples_per_concept
            ),
        )?;
        check(self.embed_dim >= 2, "embed_dim", "embedding width below 2".into())?;
        check(self.hidden_dim >= 2, "hidden_dim", "hidden width below 2".into())?;
        check(
            self.denoiser_layers >= 1,
            "denoiser_layers",
            "need at least one adapter-carrying layer".into(),
        )?;
        check(
            (3..=6).contains(&self.rank),
            "rank",
            format!("rank {} outside the supported range 3..=6", self.rank),
        )?;
        if let Some(s) = self.subspace_dim {
            check(
                s >= 1 && s <= self.hidden_dim,
                "subspace_dim",
                format!("subspace dimension {s} outside 1..={}", self.hidden_dim),
            )?;
        }
        check(self.t_steps >= 2, "t_steps", "need at least 2 diffusion steps".into())?;
        check(
            0.0 < self.beta_min && self.beta_min <= self.beta_max && self.beta_max < 1.0,
            "beta_min",
            format!("betas ({}, {}) must satisfy 0 < min <= max < 1", self.beta_min, self.beta_max),
        )?;
        check(self.epochs_step1 >= 1, "epochs_step1", "need at least 1 epoch".into())?;
        check(self.epochs_step2 >= 1, "epochs_step2", "need at least 1 epoch".into())?;
        check(
            self.lr_tokens > 0.0 && self.lr_tokens.is_finite(),
            "lr_tokens",
            format!("learning rate {} must be positive", self.lr_tokens),
        )?;
        check(
            self.lr_network > 0.0 && self.lr_network.is_finite(),
            "lr_network",
            format!("learning rate {} must be positive", self.lr_network),
        )?;
        for (field, v) in [
            ("r1_coeff", self.r1_coeff),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ] {
            check(
                v >= 0.0 && v.is_finite(),
                field,
                format!("coefficient {v} must be finite and nonnegative"),
            )?;
        }
        check(
            self.tau > 0.0 && self.tau.is_finite(),
            "tau",
            format!("temperature {} must be positive", self.tau),
        )?;
        check(
            (1..=4).contains(&self.decoder_layers),
            "decoder_layers",
            format!("decoder depth {} outside 1..=4", self.decoder_layers),
        )?;
        check(
            self.merge_scale.is_finite() && self.merge_scale > 0.0,
            "merge_scale",
            format!("merge scale {} must be positive", self.merge_scale),
        )?;
        self.order.resolve(self.concepts)?;
        check(self.eval_draws >= 1, "eval_draws", "need at least 1 draw".into())?;
        check(self.eval_samples >= 1, "eval_samples", "need at least 1 sample".into())?;
        check(
            self.context_tokens >= 1,
            "context_tokens",
            "need at least 1 context token".into(),
        )?;
        check(
            1 <= self.prompt_context && self.prompt_context <= self.context_tokens,
            "prompt_context",
            format!(
                "prompt uses {} context tokens but only {} exist",
                self.prompt_context, self.context_tokens
            ),
        )?;
        check(
            self.time_width >= 2 && self.time_width % 2 == 0,
            "time_width",
            format!("time embedding width {} must be even and at least 2", self.time_width),
        )?;
        Ok(())
    }

    /// Effective shared-subspace dimension.
    pub fn subspace(&self) -> usize {
        self.subspace_dim.unwrap_or(self.rank)
    }

    /// Gradient steps per epoch per concept.
    pub fn steps_per_epoch(&self) -> usize {
        (self.samples_per_concept / self.batch_size).max(1)
    }

    /// The resolved visiting order.
    pub fn resolve_order(&self) -> Result<Vec<usize>> {
        self.order.resolve(self.concepts)
    }
}
