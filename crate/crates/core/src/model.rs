//! Decoder-only transformer with switchable causal masking, optional learned
//! absolute positions, and per-block residual ablation.
//!
//! Each block is pre-LN:
//!
//! ```text
//! y = attn(LN1(x)) + alpha * x      (skip path removed when ablated)
//! o = mlp(LN2(y))  + alpha * y
//! ```
//!
//! where `attn` is multi-head softmax attention `softmax(mask(QKᵀ/√d_head))V`
//! followed by the output projection, and `mlp` is `GELU(h·W_fc)·W_proj`
//! without biases.

use crate::autodiff::{GeluKind, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{LabError, Result};
use crate::rng::LabRng;
use crate::task::NextToken;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// `d_model × d_model`; columns `h·d_head..(h+1)·d_head` belong to head `h`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn: AttentionLayer,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub w_proj: Tensor,
    /// Both the attention and the MLP skip connections.
    pub residuals_enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Option<Tensor>,
    pub blocks: Vec<Block>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    /// Separate output projection `vocab × d_model`; `None` when tied to the
    /// token embedding.
    pub lm_head: Option<Tensor>,
}

/// Handles into one forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Parameter leaves in [`TransformerModel::param_names`] order.
    pub params: Vec<Var>,
    /// `[batch·seq × vocab]`
    pub logits: Var,
    /// Residual stream leaving each block, `[batch·seq × d_model]`.
    pub block_outputs: Vec<Var>,
    /// Each block output after the layer norm that consumes it next (the
    /// following block's LN1, or the final LN for the last block).
    pub normalized_outputs: Vec<Var>,
    /// Per block: pre-mask scores `[batch·heads × seq × seq]`.
    pub scores: Vec<Var>,
    /// Per block: post-softmax attention weights, same shape as `scores`.
    pub attention: Vec<Var>,
}

/// Intermediate values of one attention sublayer.
struct AttentionVars {
    scores: Var,
    weights: Var,
    out: Var,
}

/// Tape handles for one block's parameters.
struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_fc: Var,
    w_proj: Var,
}

fn gaussian(rng: &mut LabRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Gaussian init (std 0.02; projections into the residual stream scaled by
/// `1/√(2·n_layers)`), fully determined by `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = LabRng::derived(seed, 0);
    let d = config.d_model;
    let proj_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let token_embedding = gaussian(&mut rng, &[config.vocab_size, d], INIT_STD);
    let positional_embedding = config
        .use_positional_encoding
        .then(|| gaussian(&mut rng, &[config.context_len, d], INIT_STD));
    let blocks = (1..=config.n_layers)
        .map(|layer| Block {
            attn: AttentionLayer {
                ln_gain: Tensor::full(&[d], 1.0),
                ln_bias: Tensor::zeros(&[d]),
                w_q: gaussian(&mut rng, &[d, d], INIT_STD),
                w_k: gaussian(&mut rng, &[d, d], INIT_STD),
                w_v: gaussian(&mut rng, &[d, d], INIT_STD),
                w_o: gaussian(&mut rng, &[d, d], proj_std),
            },
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w_fc: gaussian(&mut rng, &[d, config.d_mlp], INIT_STD),
            w_proj: gaussian(&mut rng, &[config.d_mlp, d], proj_std),
            residuals_enabled: config.residuals_enabled(layer),
        })
        .collect();
    let lm_head =
        (!config.tie_lm_head).then(|| gaussian(&mut rng, &[config.vocab_size, d], INIT_STD));
    Ok(TransformerModel {
        config: config.clone(),
        token_embedding,
        positional_embedding,
        blocks,
        ln_f_gain: Tensor::full(&[d], 1.0),
        ln_f_bias: Tensor::zeros(&[d]),
        lm_head,
    })
}

impl TransformerModel {
    /// Stable parameter names, in the same order as [`Self::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string()];
        if self.positional_embedding.is_some() {
            names.push("pos_emb".into());
        }
        for i in 0..self.blocks.len() {
            for part in [
                "ln1.gain",
                "ln1.bias",
                "attn.w_q",
                "attn.w_k",
                "attn.w_v",
                "attn.w_o",
                "ln2.gain",
                "ln2.bias",
                "mlp.w_fc",
                "mlp.w_proj",
            ] {
                names.push(format!("blocks.{i}.{part}"));
            }
        }
        names.push("ln_f.gain".into());
        names.push("ln_f.bias".into());
        if self.lm_head.is_some() {
            names.push("lm_head".into());
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding];
        out.extend(self.positional_embedding.as_ref());
        for b in &self.blocks {
            let a = &b.attn;
            out.extend([
                &a.ln_gain,
                &a.ln_bias,
                &a.w_q,
                &a.w_k,
                &a.w_v,
                &a.w_o,
                &b.ln2_gain,
                &b.ln2_bias,
                &b.w_fc,
                &b.w_proj,
            ]);
        }
        out.extend([&self.ln_f_gain, &self.ln_f_bias]);
        out.extend(self.lm_head.as_ref());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        out.extend(self.positional_embedding.as_mut());
        for b in &mut self.blocks {
            let a = &mut b.attn;
            out.extend([
                &mut a.ln_gain,
                &mut a.ln_bias,
                &mut a.w_q,
                &mut a.w_k,
                &mut a.w_v,
                &mut a.w_o,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_fc,
                &mut b.w_proj,
            ]);
        }
        out.extend([&mut self.ln_f_gain, &mut self.ln_f_bias]);
        out.extend(self.lm_head.as_mut());
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records a forward pass over `batch` sequences of equal length `seq`
    /// given as one flat id list. Parameters enter the tape as gradient
    /// leaves when `track_grad` is set, as constants otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        batch: usize,
        seq: usize,
        track_grad: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if ids.len() != batch * seq {
            return Err(LabError::Shape(format!(
                "{} ids do not form {batch} sequences of length {seq}",
                ids.len()
            )));
        }
        if seq > cfg.context_len {
            return Err(LabError::ContextLength {
                len: seq,
                max: cfg.context_len,
            });
        }
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| {
                if track_grad {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter count");

        let tok = take();
        let mut x = tape.embedding(tok, ids)?;
        if self.positional_embedding.is_some() {
            let pos = take();
            let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
            let p = tape.embedding(pos, &positions)?;
            x = tape.add(x, p)?;
        }

        let mut pass = ForwardPass {
            params: Vec::new(),
            logits: x,
            block_outputs: Vec::with_capacity(self.blocks.len()),
            normalized_outputs: Vec::with_capacity(self.blocks.len()),
            scores: Vec::with_capacity(self.blocks.len()),
            attention: Vec::with_capacity(self.blocks.len()),
        };
        let mut normed = Vec::with_capacity(self.blocks.len() + 1);
        for block in &self.blocks {
            let v = BlockVars {
                ln1_g: take(),
                ln1_b: take(),
                w_q: take(),
                w_k: take(),
                w_v: take(),
                w_o: take(),
                ln2_g: take(),
                ln2_b: take(),
                w_fc: take(),
                w_proj: take(),
            };
            let h = tape.layer_norm(x, v.ln1_g, v.ln1_b, cfg.ln_eps)?;
            normed.push(h);
            let att = attention_sublayer(tape, h, &v, cfg, batch, seq)?;
            let y = skip(
                tape,
                att.out,
                x,
                block.residuals_enabled,
                cfg.residual_scale,
            )?;
            let h2 = tape.layer_norm(y, v.ln2_g, v.ln2_b, cfg.ln_eps)?;
            let m = mlp(tape, h2, v.w_fc, v.w_proj, cfg.gelu())?;
            x = skip(tape, m, y, block.residuals_enabled, cfg.residual_scale)?;
            pass.scores.push(att.scores);
            pass.attention.push(att.weights);
            pass.block_outputs.push(x);
        }
        let (lnf_g, lnf_b) = (take(), take());
        let hf = tape.layer_norm(x, lnf_g, lnf_b, cfg.ln_eps)?;
        normed.push(hf);
        let head = if self.lm_head.is_some() { take() } else { tok };
        pass.logits = tape.matmul_nt(hf, head)?;
        pass.normalized_outputs = normed.into_iter().skip(1).collect();
        pass.params = params;
        Ok(pass)
    }

    /// Logits `[len × vocab]` for a single token sequence.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, ids, 1, ids.len(), false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Greedy next token at the last position of each prefix.
    pub fn greedy_next(&self, prefixes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let Some(seq) = prefixes.first().map(Vec::len) else {
            return Ok(Vec::new());
        };
        if prefixes.iter().any(|p| p.len() != seq) {
            return Err(LabError::Contract("prefixes must share one length".into()));
        }
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, &ids, prefixes.len(), seq, false)?;
        let logits = tape.value(pass.logits);
        Ok((0..prefixes.len())
            .map(|b| argmax(logits.row(b * seq + seq - 1)))
            .collect())
    }
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decoding runs in chunks so memory stays bounded on large test sets.
const DECODE_CHUNK: usize = 256;

impl NextToken for TransformerModel {
    fn next_tokens(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let mut shared: &TransformerModel = self;
        shared.next_tokens(prefixes)
    }
}

impl NextToken for &TransformerModel {
    fn next_tokens(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(prefixes.len());
        for chunk in prefixes.chunks(DECODE_CHUNK) {
            out.extend(self.greedy_next(chunk)?);
        }
        Ok(out)
    }
}

fn attention_sublayer(
    tape: &mut Tape,
    h: Var,
    v: &BlockVars,
    cfg: &ModelConfig,
    batch: usize,
    seq: usize,
) -> Result<AttentionVars> {
    let heads = cfg.n_heads;
    let q = tape.matmul(h, v.w_q)?;
    let k = tape.matmul(h, v.w_k)?;
    let val = tape.matmul(h, v.w_v)?;
    let q = tape.split_heads(q, batch, seq, heads)?;
    let k = tape.split_heads(k, batch, seq, heads)?;
    let val = tape.split_heads(val, batch, seq, heads)?;
    let qk = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(qk, 1.0 / (cfg.d_head() as f64).sqrt());
    let masked = if cfg.causal_attention {
        tape.causal_mask(scores)?
    } else {
        scores
    };
    let weights = tape.softmax(masked)?;
    let y = tape.batch_matmul(weights, val, false)?;
    let y = tape.merge_heads(y, batch, seq, heads)?;
    let out = tape.matmul(y, v.w_o)?;
    Ok(AttentionVars {
        scores,
        weights,
        out,
    })
}

fn mlp(tape: &mut Tape, h: Var, w_fc: Var, w_proj: Var, kind: GeluKind) -> Result<Var> {
    let a = tape.matmul(h, w_fc)?;
    let a = tape.gelu(a, kind);
    tape.matmul(a, w_proj)
}

/// `f + alpha * x` with the skip path, `f` alone without it.
fn skip(tape: &mut Tape, f: Var, x: Var, enabled: bool, alpha: f64) -> Result<Var> {
    if !enabled {
        return Ok(f);
    }
    let sx = if alpha == 1.0 {
        x
    } else {
        tape.scale(x, alpha)
    };
    tape.add(f, sx)
}

// ── Single-sequence views used by the analysis tools ────────────────────

fn layer_params(tape: &mut Tape, layer: &AttentionLayer) -> [Var; 4] {
    [&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_o].map(|t| tape.constant(t.clone()))
}

/// Pre-mask, pre-softmax scores `(X W_Q)(X W_K)ᵀ / √d_head` of one head.
/// `x` is the sublayer input (already normalised), `[l × d_model]`.
pub fn attention_scores(
    x: &Tensor,
    layer: &AttentionLayer,
    n_heads: usize,
    head: usize,
) -> Result<Tensor> {
    let (l, d) = crate::tensor::dims2(x)?;
    if head >= n_heads || d % n_heads != 0 {
        return Err(LabError::Contract(format!(
            "head {head} of {n_heads} heads over width {d}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let [wq, wk, ..] = layer_params(&mut tape, layer);
    let q = tape.matmul(xv, wq)?;
    let k = tape.matmul(xv, wk)?;
    let q = tape.split_heads(q, 1, l, n_heads)?;
    let k = tape.split_heads(k, 1, l, n_heads)?;
    let qk = tape.batch_matmul(q, k, true)?;
    let s = tape.scale(qk, 1.0 / ((d / n_heads) as f64).sqrt());
    let all = tape.value(s).data();
    Tensor::new(&[l, l], all[head * l * l..(head + 1) * l * l].to_vec())
}

/// Adds the causal mask: entries with column > row become `-inf`.
pub fn apply_causal_mask(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(LabError::Shape(format!(
            "expected an l×l matrix, got {:?}",
            a.shape()
        )));
    }
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let m = tape.causal_mask(v)?;
    Ok(tape.value(m).clone())
}

/// Multi-head attention output (heads concatenated, then `W_O`) for a single
/// sequence `x: [l × d_model]`.
pub fn attention_output(
    x: &Tensor,
    layer: &AttentionLayer,
    n_heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let (l, d) = crate::tensor::dims2(x)?;
    let cfg = ModelConfig {
        n_heads,
        d_model: d,
        causal_attention: causal,
        ..ModelConfig::default()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let [w_q, w_k, w_v, w_o] = layer_params(&mut tape, layer);
    let dummy = w_q;
    let vars = BlockVars {
        ln1_g: dummy,
        ln1_b: dummy,
        w_q,
        w_k,
        w_v,
        w_o,
        ln2_g: dummy,
        ln2_b: dummy,
        w_fc: dummy,
        w_proj: dummy,
    };
    let att = attention_sublayer(&mut tape, xv, &vars, &cfg, 1, l)?;
    Ok(tape.value(att.out).clone())
}

/// One pre-LN block applied to a single sequence.
pub fn block_forward(
    x: &Tensor,
    block: &Block,
    config: &ModelConfig,
    residuals_enabled: bool,
) -> Result<Tensor> {
    let (l, _) = crate::tensor::dims2(x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let a = &block.attn;
    let c = |t: &mut Tape, x: &Tensor| t.constant(x.clone());
    let v = BlockVars {
        ln1_g: c(&mut tape, &a.ln_gain),
        ln1_b: c(&mut tape, &a.ln_bias),
        w_q: c(&mut tape, &a.w_q),
        w_k: c(&mut tape, &a.w_k),
        w_v: c(&mut tape, &a.w_v),
        w_o: c(&mut tape, &a.w_o),
        ln2_g: c(&mut tape, &block.ln2_gain),
        ln2_b: c(&mut tape, &block.ln2_bias),
        w_fc: c(&mut tape, &block.w_fc),
        w_proj: c(&mut tape, &block.w_proj),
    };
    let h = tape.layer_norm(xv, v.ln1_g, v.ln1_b, config.ln_eps)?;
    let att = attention_sublayer(&mut tape, h, &v, config, 1, l)?;
    let y = skip(
        &mut tape,
        att.out,
        xv,
        residuals_enabled,
        config.residual_scale,
    )?;
    let h2 = tape.layer_norm(y, v.ln2_g, v.ln2_b, config.ln_eps)?;
    let m = mlp(&mut tape, h2, v.w_fc, v.w_proj, config.gelu())?;
    let o = skip(&mut tape, m, y, residuals_enabled, config.residual_scale)?;
    Ok(tape.value(o).clone())
}

/// Logits for one token sequence.
pub fn model_forward(model: &TransformerModel, ids: &[usize]) -> Result<Tensor> {
    model.logits(ids)
}
