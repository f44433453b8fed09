//! Decoder-only transformer over token sequences: causal self-attention,
//! next-token cross-entropy on the target positions, and autoregressive
//! probabilistic forecasting.

use crate::error::{Error, Result};
use crate::forecast::{ForecastDistribution, Forecaster};
use crate::lora::LoraAdapters;
use crate::rng::{stream_rng, Domain};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::tokenizer::{self, TokenizerSpec};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Token vocabulary: value bins plus special ids.
    pub vocab: usize,
    pub max_context: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab: TokenizerSpec::default().vocab_size(),
            max_context: 512,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.vocab < 3 || self.max_context == 0 {
            return Err(Error::config("degenerate model dimensions"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_offset: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_offset: Tensor,
    pub w_ff1: Tensor,
    pub w_ff2: Tensor,
}

/// All dense parameters of the model. Flattened in `named_tensors` order
/// this is the parameter vector that checkpoints serialize.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Tensor,
    pub final_ln_offset: Tensor,
    pub w_out: Tensor,
}

impl ModelWeights {
    /// Random initialization: N(0, 0.02) matrices, residual projections
    /// scaled down by sqrt(2 * n_layers), unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Domain::ModelInit, 0);
        let d = cfg.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        let resid_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::filled(1, d, 1.0),
                ln1_offset: Tensor::zeros(1, d),
                wq: normal(d, d, 0.02),
                wk: normal(d, d, 0.02),
                wv: normal(d, d, 0.02),
                wo: normal(d, d, resid_std),
                ln2_gain: Tensor::filled(1, d, 1.0),
                ln2_offset: Tensor::zeros(1, d),
                w_ff1: normal(d, cfg.d_ff, 0.02),
                w_ff2: normal(cfg.d_ff, d, resid_std),
            });
        }
        Ok(ModelWeights {
            token_embedding: normal(cfg.vocab, d, 0.02),
            position_embedding: normal(cfg.max_context, d, 0.02),
            layers,
            final_ln_gain: Tensor::filled(1, d, 1.0),
            final_ln_offset: Tensor::zeros(1, d),
            w_out: normal(d, cfg.vocab, 0.02),
        })
    }

    /// Stable `(name, tensor)` listing; the checkpoint layout and the
    /// optimizer parameter order both follow it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_offset"), &l.ln1_offset));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_offset"), &l.ln2_offset));
            out.push((format!("layer{i}.w_ff1"), &l.w_ff1));
            out.push((format!("layer{i}.w_ff2"), &l.w_ff2));
        }
        out.push(("final_ln_gain".into(), &self.final_ln_gain));
        out.push(("final_ln_offset".into(), &self.final_ln_offset));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_offset);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_offset);
            out.push(&mut l.w_ff1);
            out.push(&mut l.w_ff2);
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_offset);
        out.push(&mut self.w_out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the little-endian byte image of every tensor, in
    /// `named_tensors` order. Fingerprints a parameter state exactly.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            hasher.update(t.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How weights enter the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// All base weights trainable (pre-training, full fine-tuning).
    Trainable,
    /// Base weights frozen (inference; adapter-only fine-tuning).
    Frozen,
}

/// Tape handles for one bound model (plus adapters, when present).
pub struct BoundModel {
    pub token_embedding: VarId,
    pub position_embedding: VarId,
    pub layers: Vec<BoundLayer>,
    pub final_ln_gain: VarId,
    pub final_ln_offset: VarId,
    pub w_out: VarId,
    pub adapters: Option<BoundAdapters>,
}

pub struct BoundLayer {
    pub ln1_gain: VarId,
    pub ln1_offset: VarId,
    pub wq: VarId,
    pub wk: VarId,
    pub wv: VarId,
    pub wo: VarId,
    pub ln2_gain: VarId,
    pub ln2_offset: VarId,
    pub w_ff1: VarId,
    pub w_ff2: VarId,
}

/// Low-rank factors for the adapted projections of every layer, in layer
/// order: `(q_left, q_right, v_left, v_right)`.
pub struct BoundAdapters {
    pub per_layer: Vec<(VarId, VarId, VarId, VarId)>,
    pub scaling: f64,
}

pub fn bind_model(tape: &mut Tape, weights: &ModelWeights, binding: Binding) -> BoundModel {
    let mut put = |t: &Tensor| -> VarId {
        match binding {
            Binding::Trainable => tape.param(t.clone()),
            Binding::Frozen => tape.constant(t.clone()),
        }
    };
    let token_embedding = put(&weights.token_embedding);
    let position_embedding = put(&weights.position_embedding);
    let mut layers = Vec::with_capacity(weights.layers.len());
    for l in &weights.layers {
        layers.push(BoundLayer {
            ln1_gain: put(&l.ln1_gain),
            ln1_offset: put(&l.ln1_offset),
            wq: put(&l.wq),
            wk: put(&l.wk),
            wv: put(&l.wv),
            wo: put(&l.wo),
            ln2_gain: put(&l.ln2_gain),
            ln2_offset: put(&l.ln2_offset),
            w_ff1: put(&l.w_ff1),
            w_ff2: put(&l.w_ff2),
        });
    }
    let final_ln_gain = put(&weights.final_ln_gain);
    let final_ln_offset = put(&weights.final_ln_offset);
    let w_out = put(&weights.w_out);
    BoundModel {
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain,
        final_ln_offset,
        w_out,
        adapters: None,
    }
}

pub fn bind_adapters(
    tape: &mut Tape,
    adapters: &LoraAdapters,
    trainable: bool,
) -> BoundAdapters {
    let mut put = |t: &Tensor| -> VarId {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let per_layer = adapters
        .layers
        .iter()
        .map(|l| (put(&l.q_left), put(&l.q_right), put(&l.v_left), put(&l.v_right)))
        .collect();
    BoundAdapters {
        per_layer,
        scaling: adapters.scaling(),
    }
}

/// Projection through a base matrix plus, when adapters are present, the
/// low-rank path `scaling * ((x @ left) @ right)`. Keeping the adapter on
/// its own activation path is what lets the backward pass skip `dW` for
/// the frozen base matrix.
fn project(
    tape: &mut Tape,
    x: VarId,
    w: VarId,
    adapter: Option<(VarId, VarId, f64)>,
) -> VarId {
    let base = tape.matmul(x, w);
    match adapter {
        None => base,
        Some((left, right, scaling)) => {
            let down = tape.matmul(x, left);
            let up = tape.matmul(down, right);
            let scaled = tape.scale(up, scaling);
            tape.add(base, scaled)
        }
    }
}

/// Full forward pass over one token sequence; returns the `L x vocab`
/// logits node. `positions[i]` is the positional-embedding row of token
/// `i` (callers clamp these when generating past `max_context`).
pub fn forward_logits(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
    positions: &[usize],
) -> Result<VarId> {
    let final_h = forward_hidden(tape, bound, cfg, tokens, positions)?;
    Ok(tape.matmul(final_h, bound.w_out))
}

/// Forward pass up to the final layer norm (`L x d_model`).
pub fn forward_hidden(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
    positions: &[usize],
) -> Result<VarId> {
    let len = tokens.len();
    if len == 0 {
        return Err(Error::data("empty token sequence"));
    }
    if len > cfg.max_context {
        return Err(Error::data(format!(
            "sequence length {len} exceeds max_context {}",
            cfg.max_context
        )));
    }
    if positions.len() != len {
        return Err(Error::config("positions must align with tokens"));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    if ids.iter().any(|&t| t >= cfg.vocab) {
        return Err(Error::data("token id out of vocabulary"));
    }
    if positions.iter().any(|&p| p >= cfg.max_context) {
        return Err(Error::config("position index beyond the embedding table"));
    }

    let tok = tape.embedding(bound.token_embedding, &ids);
    let pos = tape.embedding(bound.position_embedding, positions);
    let mut x = tape.add(tok, pos);

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for (li, layer) in bound.layers.iter().enumerate() {
        let adapters = bound.adapters.as_ref().map(|a| (a.per_layer[li], a.scaling));
        let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_offset);
        let q = project(tape, h, layer.wq, adapters.map(|((ql, qr, _, _), s)| (ql, qr, s)));
        let k = tape.matmul(h, layer.wk);
        let v = project(tape, h, layer.wv, adapters.map(|((_, _, vl, vr), s)| (vl, vr, s)));

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = tape.col_slice(q, head * dh, dh);
            let kh = tape.col_slice(k, head * dh, dh);
            let vh = tape.col_slice(v, head * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let probs = tape.causal_softmax(scaled);
            heads.push(tape.matmul(probs, vh));
        }
        let concat = tape.concat_cols(&heads);
        let att = tape.matmul(concat, layer.wo);
        x = tape.add(x, att);

        let h2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_offset);
        let a1 = tape.matmul(h2, layer.w_ff1);
        let g = tape.gelu(a1);
        let ff = tape.matmul(g, layer.w_ff2);
        x = tape.add(x, ff);
    }
    Ok(tape.layer_norm(x, bound.final_ln_gain, bound.final_ln_offset))
}

/// A tokenized (context || target) sequence. Positions
/// `loss_start ..` are the forecast targets the loss is restricted to.
#[derive(Debug, Clone)]
pub struct TokenizedWindow {
    pub tokens: Vec<u32>,
    pub loss_start: usize,
}

impl TokenizedWindow {
    /// Scale by the context, then discretize context and target with the
    /// shared scale.
    pub fn encode(context: &[f64], target: &[f64], spec: &TokenizerSpec) -> Result<Self> {
        let (scaled_ctx, s) = tokenizer::mean_scale(context, spec);
        let mut tokens = Vec::with_capacity(context.len() + target.len());
        for v in &scaled_ctx {
            tokens.push(tokenizer::bin_of(*v, spec)?);
        }
        for v in target {
            tokens.push(tokenizer::bin_of(v / s, spec)?);
        }
        Ok(TokenizedWindow {
            tokens,
            loss_start: context.len(),
        })
    }

    pub fn scored_positions(&self) -> usize {
        self.tokens.len() - self.loss_start
    }
}

/// Next-token targets restricted to the window's target segment: the
/// prediction at row `i` scores token `i + 1`.
pub fn next_token_targets(window: &TokenizedWindow) -> Vec<Option<u32>> {
    let len = window.tokens.len();
    (0..len)
        .map(|i| {
            if i + 1 >= window.loss_start && i + 1 < len {
                Some(window.tokens[i + 1])
            } else {
                None
            }
        })
        .collect()
}

/// Loss graph for one window on an already-bound model.
pub fn window_loss_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    window: &TokenizedWindow,
) -> Result<VarId> {
    let positions: Vec<usize> = (0..window.tokens.len()).collect();
    let logits = forward_logits(tape, bound, cfg, &window.tokens, &positions)?;
    let targets = next_token_targets(window);
    Ok(tape.cross_entropy_mean(logits, &targets))
}

/// Mean next-token cross-entropy over a batch, with per-window logits.
/// Loss is averaged over every scored position across the batch.
pub fn forward_loss(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    batch: &[TokenizedWindow],
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut logits_out = Vec::with_capacity(batch.len());
    for window in batch {
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, weights, Binding::Frozen);
        let positions: Vec<usize> = (0..window.tokens.len()).collect();
        let logits = forward_logits(&mut tape, &bound, cfg, &window.tokens, &positions)?;
        let targets = next_token_targets(window);
        let loss = tape.cross_entropy_mean(logits, &targets);
        let n = window.scored_positions();
        total += tape.value(loss).data()[0] * n as f64;
        scored += n;
        logits_out.push(tape.value(logits).clone());
    }
    Ok((total / scored as f64, logits_out))
}

/// Logits for the last position of a token sequence, without gradient
/// bookkeeping. `positions` are clamped to the embedding table.
pub fn last_position_logits(
    weights: &ModelWeights,
    adapters: Option<&LoraAdapters>,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut bound = bind_model(&mut tape, weights, Binding::Frozen);
    if let Some(a) = adapters {
        bound.adapters = Some(bind_adapters(&mut tape, a, false));
    }
    let positions: Vec<usize> = (0..tokens.len())
        .map(|p| p.min(cfg.max_context - 1))
        .collect();
    let hidden = forward_hidden(&mut tape, &bound, cfg, tokens, &positions)?;
    let h = tape.value(hidden);
    let last = Tensor::row_vector(h.row(h.rows() - 1).to_vec());
    let logits = last.matmul(&weights.w_out);
    Ok(logits.data().to_vec())
}

/// Draw `S` autoregressive sample paths of `H` steps from the model.
///
/// The raw context is mean-scaled and tokenized; a context longer than
/// `max_context` is truncated to its most recent `max_context` tokens
/// (with a warning) and generated positions clamp to the last embedding
/// row, reproducing the degradation of running past the pre-training
/// context cap. Sampling is full categorical at temperature 1 over the
/// value bins.
pub fn sample_forecast(
    weights: &ModelWeights,
    adapters: Option<&LoraAdapters>,
    cfg: &ModelConfig,
    spec: &TokenizerSpec,
    context: &[f64],
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<ForecastDistribution> {
    if context.is_empty() {
        return Err(Error::data("context must contain at least one sample"));
    }
    if horizon == 0 || n_paths < 2 {
        return Err(Error::config("horizon must be >= 1 and n_paths >= 2"));
    }
    let encoded = tokenizer::encode_context(context, spec)?;
    let mut ctx_tokens = encoded.tokens;
    if ctx_tokens.len() > cfg.max_context {
        log::warn!(
            "context of {} tokens exceeds max_context {}; truncating to the most recent window",
            ctx_tokens.len(),
            cfg.max_context
        );
        ctx_tokens = ctx_tokens[ctx_tokens.len() - cfg.max_context..].to_vec();
    }

    let n_bins = spec.n_bins;
    let mut samples = Vec::with_capacity(n_paths);
    for path in 0..n_paths {
        let mut rng = stream_rng(seed, Domain::ForecastPath, path as u64);
        let mut tokens = ctx_tokens.clone();
        let mut path_tokens = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let work = if tokens.len() > cfg.max_context {
                &tokens[tokens.len() - cfg.max_context..]
            } else {
                &tokens[..]
            };
            let logits = last_position_logits(weights, adapters, cfg, work)?;
            // restrict sampling to value bins; special ids carry no value
            let max = logits[..n_bins]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = logits[..n_bins].iter().map(|l| (l - max).exp()).collect();
            let z: f64 = probs.iter().sum();
            for p in probs.iter_mut() {
                *p /= z;
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = n_bins - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            tokens.push(chosen as u32);
            path_tokens.push(chosen as u32);
        }
        let seq = tokenizer::TokenSequence {
            tokens: path_tokens,
            scale: encoded.scale,
        };
        samples.push(tokenizer::detokenize(&seq, spec)?);
    }
    ForecastDistribution::new(samples)
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d_K)) V` with an
/// optional causal mask. Reference entry point; the transformer layers
/// build the same graph inline.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
    assert_eq!(q.rows(), k.rows(), "Q and K row counts must match");
    assert_eq!(k.rows(), v.rows(), "K and V row counts must match");
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let kt = tape.transpose(kv);
    let scores = tape.matmul(qv, kt);
    let scaled = tape.scale(scores, 1.0 / (k.cols() as f64).sqrt());
    let probs = if causal {
        tape.causal_softmax(scaled)
    } else {
        tape.softmax(scaled)
    };
    let out = tape.matmul(probs, vv);
    tape.value(out).clone()
}

/// The transformer as a [`Forecaster`]: feeds the most recent
/// `context_len` history values into `sample_forecast`.
pub struct TsfmForecaster<'a> {
    pub weights: &'a ModelWeights,
    pub adapters: Option<&'a LoraAdapters>,
    pub cfg: &'a ModelConfig,
    pub spec: &'a TokenizerSpec,
    pub context_len: usize,
}

impl Forecaster for TsfmForecaster<'_> {
    fn forecast(
        &self,
        history: &[f64],
        horizon: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<ForecastDistribution> {
        if history.len() < self.context_len {
            return Err(Error::data(format!(
                "history of {} samples is shorter than the context window {}",
                history.len(),
                self.context_len
            )));
        }
        let context = &history[history.len() - self.context_len..];
        sample_forecast(
            self.weights,
            self.adapters,
            self.cfg,
            self.spec,
            context,
            horizon,
            n_paths,
            seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab: 12,
            max_context: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn attention_single_row_returns_v() {
        let q = Tensor::from_vec(1, 2, vec![0.3, -0.7]);
        let k = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let v = Tensor::from_vec(1, 2, vec![5.0, -3.0]);
        let out = attention(&q, &k, &v, true);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_uniform_scores_average_visible_rows() {
        let q = Tensor::zeros(3, 2);
        let k = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let v = Tensor::from_vec(3, 1, vec![3.0, 9.0, 30.0]);
        let out = attention(&q, &k, &v, false);
        for r in 0..3 {
            assert!((out.get(r, 0) - 14.0).abs() < 1e-12);
        }
        let causal = attention(&q, &k, &v, true);
        assert!((causal.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((causal.get(1, 0) - 6.0).abs() < 1e-12);
        assert!((causal.get(2, 0) - 14.0).abs() < 1e-12);
    }

    #[test]
    fn attention_hand_worked_example() {
        // d_K = 1, Q = [[1],[0]], K = [[1],[0]], V = [[2],[4]], causal:
        // row 0 sees only V0 -> 2; row 1 has equal scores -> (2+4)/2 = 3
        let q = Tensor::from_vec(2, 1, vec![1.0, 0.0]);
        let k = Tensor::from_vec(2, 1, vec![1.0, 0.0]);
        let v = Tensor::from_vec(2, 1, vec![2.0, 4.0]);
        let out = attention(&q, &k, &v, true);
        assert!((out.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((out.get(1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let cfg = tiny_cfg();
        let mut weights = ModelWeights::init(&cfg, 1).unwrap();
        // zero output projection -> identical logits -> uniform softmax
        weights.w_out = Tensor::zeros(cfg.d_model, cfg.vocab);
        let window = TokenizedWindow {
            tokens: vec![1, 2, 3, 4, 5, 6],
            loss_start: 3,
        };
        let (loss, _) = forward_loss(&weights, &cfg, &[window]).unwrap();
        assert!((loss - (cfg.vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sequence_longer_than_max_context_rejected_in_training() {
        let cfg = tiny_cfg();
        let weights = ModelWeights::init(&cfg, 1).unwrap();
        let window = TokenizedWindow {
            tokens: vec![0; cfg.max_context + 1],
            loss_start: 1,
        };
        assert!(forward_loss(&weights, &cfg, &[window]).is_err());
    }

    #[test]
    fn forecast_same_seed_bit_identical() {
        let cfg = tiny_cfg();
        let spec = TokenizerSpec::new(10, 4.0).unwrap();
        let weights = ModelWeights::init(&cfg, 3).unwrap();
        let context = vec![1.0, 2.0, 1.5, 2.5];
        let a = sample_forecast(&weights, None, &cfg, &spec, &context, 3, 4, 42).unwrap();
        let b = sample_forecast(&weights, None, &cfg, &spec, &context, 3, 4, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_forecast(&weights, None, &cfg, &spec, &context, 3, 4, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn deterministic_model_yields_identical_paths() {
        let cfg = tiny_cfg();
        let spec = TokenizerSpec::new(10, 4.0).unwrap();
        let mut weights = ModelWeights::init(&cfg, 3).unwrap();
        // force all output mass onto bin 4: huge logit via the out matrix
        weights.w_out = Tensor::zeros(cfg.d_model, cfg.vocab);
        weights.final_ln_offset = Tensor::filled(1, cfg.d_model, 1.0);
        for r in 0..cfg.d_model {
            weights.w_out.set(r, 4, 100.0);
        }
        let context = vec![1.0, 2.0, 1.5, 2.5];
        let d = sample_forecast(&weights, None, &cfg, &spec, &context, 3, 4, 0).unwrap();
        for path in &d.samples {
            assert_eq!(path, &d.samples[0]);
        }
    }

    #[test]
    fn causality_perturbing_future_token_leaves_past_logits_unchanged() {
        let cfg = tiny_cfg();
        let weights = ModelWeights::init(&cfg, 9).unwrap();
        let tokens_a: Vec<u32> = vec![1, 2, 3, 4, 5];
        let mut tokens_b = tokens_a.clone();
        tokens_b[4] = 9; // perturb the last token
        let positions: Vec<usize> = (0..5).collect();

        let logits = |tokens: &[u32]| -> Tensor {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &weights, Binding::Frozen);
            let id = forward_logits(&mut tape, &bound, &cfg, tokens, &positions).unwrap();
            tape.value(id).clone()
        };
        let la = logits(&tokens_a);
        let lb = logits(&tokens_b);
        for r in 0..4 {
            assert_eq!(la.row(r), lb.row(r), "logits before the perturbed position changed");
        }
        assert_ne!(la.row(4), lb.row(4));
    }
}
