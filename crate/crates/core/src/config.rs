//! Model, training, and data configuration.
//!
//! Configs are TOML documents with `[model]`, `[train]` and `[data]` tables;
//! every field has a default so a file only needs to name what it changes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::GeluKind;
use crate::error::{LabError, Result};
use crate::task::{SEQUENCE_LEN, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub use_positional_encoding: bool,
    pub causal_attention: bool,
    /// 1-based indices of blocks whose two residual connections are removed.
    pub ablated_layers: BTreeSet<usize>,
    /// Weight on the skip path: `o = f(x) + residual_scale * x`.
    pub residual_scale: f64,
    pub tie_lm_head: bool,
    pub exact_gelu: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_mlp: 512,
            vocab_size: VOCAB_SIZE,
            context_len: SEQUENCE_LEN,
            use_positional_encoding: true,
            causal_attention: true,
            ablated_layers: BTreeSet::new(),
            residual_scale: 1.0,
            tie_lm_head: true,
            exact_gelu: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LabError::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return fail("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if let Some(&bad) = self
            .ablated_layers
            .iter()
            .find(|&&l| l == 0 || l > self.n_layers)
        {
            return fail(format!(
                "ablated layer {bad} is outside 1..={}",
                self.n_layers
            ));
        }
        if self.context_len < SEQUENCE_LEN {
            return fail(format!(
                "context_len {} is shorter than a rendered sample ({SEQUENCE_LEN})",
                self.context_len
            ));
        }
        if self.vocab_size < VOCAB_SIZE {
            return fail(format!("vocab_size must be at least {VOCAB_SIZE}"));
        }
        if !(self.ln_eps > 0.0) || !self.residual_scale.is_finite() {
            return fail("ln_eps must be positive and residual_scale finite".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn gelu(&self) -> GeluKind {
        if self.exact_gelu {
            GeluKind::Erf
        } else {
            GeluKind::Tanh
        }
    }

    pub fn residuals_enabled(&self, layer: usize) -> bool {
        !self.ablated_layers.contains(&layer)
    }

    /// Short label such as `pe causal ablate{1,2}`.
    pub fn label(&self) -> String {
        format!(
            "{} {} ablate{}",
            if self.use_positional_encoding {
                "pe"
            } else {
                "nope"
            },
            if self.causal_attention {
                "causal"
            } else {
                "noncausal"
            },
            format_layer_set(&self.ablated_layers)
        )
    }
}

pub fn format_layer_set(set: &BTreeSet<usize>) -> String {
    let items: Vec<String> = set.iter().map(|l| l.to_string()).collect();
    format!("{{{}}}", items.join(","))
}

/// Parses `"2,3"`, `"{2,3}"`, `""` or `"{}"` into a layer set.
pub fn parse_layer_set(s: &str) -> Result<BTreeSet<usize>> {
    let inner = s.trim().trim_start_matches('{').trim_end_matches('}');
    inner
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| LabError::Config(format!("bad layer index {t:?}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Learning rate reached at `max_iters` by the cosine decay.
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_interval: usize,
    /// Test samples scored at intermediate evaluations; the final
    /// evaluation always uses the full test split.
    pub eval_samples: usize,
    /// Seed for batch sampling.
    pub seed: u64,
    /// Restrict the loss to the answer tokens instead of every position.
    pub answer_only_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_iters: 5000,
            learning_rate: 2e-3,
            min_lr: 2e-4,
            warmup_iters: 100,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_interval: 500,
            eval_samples: 500,
            seed: 0,
            answer_only_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(LabError::Config(msg.to_string()));
        if self.batch_size == 0 || self.eval_interval == 0 {
            return fail("batch_size and eval_interval must be positive");
        }
        if self.warmup_iters > self.max_iters {
            return fail("warmup_iters exceeds max_iters");
        }
        if !(self.learning_rate > 0.0) || self.min_lr < 0.0 || self.min_lr > self.learning_rate {
            return fail("need 0 <= min_lr <= learning_rate and learning_rate > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("adam_eps must be positive; weight_decay and grad_clip non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 10_000,
            n_test: 1_000,
            seed: 42,
        }
    }
}

/// Everything needed to reproduce one training run besides the init seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
