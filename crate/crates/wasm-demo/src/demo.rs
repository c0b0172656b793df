//! Plain-Rust logic behind the browser demo, testable natively.

use nopelab::analysis::{
    attention_maps, block_structure, collect_activations, correlation_matrix, Positions, Tap,
};
use nopelab::checkpoint::decode;
use nopelab::config::{parse_layer_set, ModelConfig};
use nopelab::model::argmax;
use nopelab::rng::LabRng;
use nopelab::task::{
    decode_from_prefixes, detokenize, generate_splits, tokenize, ANSWER_LEN, DOLLAR,
};
use nopelab::{init_params, LabError, Result, TransformerModel};

/// Architecture choices exposed by the page.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub use_positional_encoding: bool,
    pub causal_attention: bool,
    pub ablated_layers: String,
    pub seed: u64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        DemoSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            use_positional_encoding: false,
            causal_attention: true,
            ablated_layers: String::new(),
            seed: 1,
        }
    }
}

pub fn build_model(spec: &DemoSpec) -> Result<TransformerModel> {
    let config = ModelConfig {
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        d_model: spec.d_model,
        d_mlp: 4 * spec.d_model,
        use_positional_encoding: spec.use_positional_encoding,
        causal_attention: spec.causal_attention,
        ablated_layers: parse_layer_set(&spec.ablated_layers)?,
        ..ModelConfig::default()
    };
    init_params(&config, spec.seed)
}

pub fn model_from_checkpoint(bytes: &[u8]) -> Result<TransformerModel> {
    Ok(decode(bytes)?.model)
}

/// Token ids for a prompt typed on the page, with a leading `$` added when
/// missing.
pub fn prompt_ids(model: &TransformerModel, prompt: &str) -> Result<Vec<usize>> {
    let mut ids = tokenize(prompt.trim())?;
    if ids.first() != Some(&DOLLAR) {
        ids.insert(0, DOLLAR);
    }
    let max = model.config.context_len;
    if ids.len() > max {
        return Err(LabError::ContextLength {
            len: ids.len(),
            max,
        });
    }
    Ok(ids)
}

/// Row-major `l × l` attention weights of one head in one block (1-based).
pub fn attention(
    model: &TransformerModel,
    prompt: &str,
    layer: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let ids = prompt_ids(model, prompt)?;
    let maps = attention_maps(model, &ids)?;
    let per_layer = maps
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| LabError::Contract(format!("layer must lie in 1..={}", maps.len())))?;
    let map = per_layer
        .get(head)
        .ok_or_else(|| LabError::Contract(format!("head must lie in 0..{}", per_layer.len())))?;
    Ok(map.data().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationOutcome {
    pub original: String,
    pub permuted: String,
    /// Max |Δ| over the final-position logits.
    pub deviation: f64,
    pub next_original: String,
    pub next_permuted: String,
    /// Greedy five-token continuations; empty when they would not fit the
    /// context window.
    pub answer_original: String,
    pub answer_permuted: String,
}

/// Shuffles every position except the leading `$` and the final token,
/// then compares final logits and greedy continuations.
pub fn permutation(
    model: &TransformerModel,
    prompt: &str,
    seed: u64,
) -> Result<PermutationOutcome> {
    let ids = prompt_ids(model, prompt)?;
    if ids.len() < 4 {
        return Err(LabError::Contract(
            "prompt needs at least 3 symbols after '$'".into(),
        ));
    }
    let last = ids.len() - 1;
    let mut rng = LabRng::new(seed);
    let mut permuted = ids.clone();
    for _ in 0..64 {
        rng.shuffle(&mut permuted[1..last]);
        if permuted != ids {
            break;
        }
    }
    let a = model.logits(&ids)?;
    let b = model.logits(&permuted)?;
    let deviation = a
        .row(last)
        .iter()
        .zip(b.row(last))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let answers = if ids.len() + ANSWER_LEN <= model.config.context_len + 1 {
        let mut m = model;
        decode_from_prefixes(&mut m, vec![ids.clone(), permuted.clone()])?
    } else {
        vec![Vec::new(), Vec::new()]
    };
    Ok(PermutationOutcome {
        original: detokenize(&ids)?,
        permuted: detokenize(&permuted)?,
        deviation,
        next_original: detokenize(&[argmax(a.row(last))])?,
        next_permuted: detokenize(&[argmax(b.row(last))])?,
        answer_original: detokenize(&answers[0])?,
        answer_permuted: detokenize(&answers[1])?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationView {
    pub size: usize,
    /// `|corr|` scaled to 0..=255, row-major.
    pub pixels: Vec<u8>,
    pub off_block_ratio: f64,
}

/// Layer activation correlations over `n_samples` random addition problems.
pub fn correlation(
    model: &TransformerModel,
    layer: usize,
    n_samples: usize,
    seed: u64,
) -> Result<CorrelationView> {
    let samples = generate_splits(0, n_samples, seed)?.test;
    let acts = collect_activations(model, &samples, layer, Tap::BlockOutput, Positions::Full)?;
    let corr = correlation_matrix(&acts)?;
    Ok(CorrelationView {
        size: corr.n_features(),
        pixels: corr
            .matrix
            .data()
            .iter()
            .map(|v| (v.abs().min(1.0) * 255.0).round() as u8)
            .collect(),
        off_block_ratio: block_structure(&corr).ratio,
    })
}
