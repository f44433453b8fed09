//! Low-rank adapters over the attention query/value projections.
//!
//! An adapted projection computes `x W + (alpha/r) (x W_L) W_R` with the
//! base `W` frozen. `W_R` starts at zero, so a freshly injected model is
//! bit-identical to its base. Merging folds `(alpha/r) W_L W_R` into the
//! base weights and consumes the adapters, so a double merge cannot
//! double-add.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::rng::{stream_rng, Domain};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; the effective delta is `(alpha / rank) W_L W_R`.
    /// With `alpha = rank` (the default constructor) this reduces to the
    /// plain `W + W_L W_R` composition.
    pub alpha: f64,
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: rank as f64,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if self.rank >= cfg.d_model {
            return Err(Error::config(format!(
                "LoRA rank {} must be below the adapted dimension {}",
                self.rank, cfg.d_model
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("LoRA alpha must be positive"));
        }
        Ok(())
    }
}

/// Adapter factors for one transformer layer (query and value targets).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters {
    pub q_left: Tensor,
    pub q_right: Tensor,
    pub v_left: Tensor,
    pub v_right: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub config: LoraConfig,
    pub layers: Vec<LayerAdapters>,
}

impl LoraAdapters {
    pub fn scaling(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.lora_q_left"), &l.q_left));
            out.push((format!("layer{i}.lora_q_right"), &l.q_right));
            out.push((format!("layer{i}.lora_v_left"), &l.v_left));
            out.push((format!("layer{i}.lora_v_right"), &l.v_right));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.q_left);
            out.push(&mut l.q_right);
            out.push(&mut l.v_left);
            out.push(&mut l.v_right);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// A frozen base model plus trainable adapters.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub base: ModelWeights,
    pub adapters: LoraAdapters,
}

/// Allocate adapters over every layer's query and value projections:
/// left factors Gaussian with variance `1/rank`, right factors zero.
pub fn inject(base: ModelWeights, cfg: &ModelConfig, lora: LoraConfig, seed: u64) -> Result<AdaptedModel> {
    lora.validate(cfg)?;
    let d = cfg.d_model;
    let r = lora.rank;
    let std = 1.0 / (r as f64).sqrt();
    let mut rng = stream_rng(seed, Domain::ModelInit, 1);
    let mut gaussian = |rows: usize, cols: usize| -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    };
    let layers = (0..cfg.n_layers)
        .map(|_| LayerAdapters {
            q_left: gaussian(d, r),
            q_right: Tensor::zeros(r, d),
            v_left: gaussian(d, r),
            v_right: Tensor::zeros(r, d),
        })
        .collect();
    Ok(AdaptedModel {
        base,
        adapters: LoraAdapters { config: lora, layers },
    })
}

/// Fold `(alpha/r) W_L W_R` into the base query/value matrices. Takes the
/// adapted model by value: once merged, the adapters are gone and a second
/// merge of the same adapters is unrepresentable.
pub fn merge(adapted: AdaptedModel) -> ModelWeights {
    let mut weights = adapted.base;
    let scaling = adapted.adapters.scaling();
    for (layer, ad) in weights.layers.iter_mut().zip(&adapted.adapters.layers) {
        let dq = ad.q_left.matmul(&ad.q_right).scale(scaling);
        layer.wq.add_assign(&dq);
        let dv = ad.v_left.matmul(&ad.v_right).scale(scaling);
        layer.wv.add_assign(&dv);
    }
    weights
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainableCount {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

/// Adapter parameter count `sum (d1 + d2) * r` over every target, against
/// the instantiated model's total (base plus adapters).
pub fn count_trainable(weights: &ModelWeights, cfg: &ModelConfig, lora: LoraConfig) -> TrainableCount {
    let per_target = (cfg.d_model + cfg.d_model) * lora.rank;
    let trainable = per_target * 2 * cfg.n_layers;
    let total = weights.n_params() + trainable;
    TrainableCount {
        trainable,
        total,
        ratio: trainable as f64 / total as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtMode {
    FullFt,
    Peft,
}

/// One matmul of a forward pass: output is `m x n` with inner dimension
/// `k`; the flags say which operands receive gradients during training.
#[derive(Debug, Clone, Copy)]
struct MatmulCost {
    m: usize,
    k: usize,
    n: usize,
    grad_a: bool,
    grad_b: bool,
}

impl MatmulCost {
    fn forward_macs(&self) -> u64 {
        (self.m * self.k * self.n) as u64
    }

    fn backward_macs(&self) -> u64 {
        let one = self.forward_macs();
        let mut total = 0;
        if self.grad_a {
            total += one;
        }
        if self.grad_b {
            total += one;
        }
        total
    }
}

/// Every matmul of one training forward at sequence length `seq_len`,
/// with gradient flags mirroring how the tape propagates requires-grad:
/// in adapter-only mode nothing below the first layer's adapters needs a
/// gradient, frozen weight matrices never pay for `dW`, and activation
/// paths above the first adapter stay hot.
fn enumerate_matmuls(cfg: &ModelConfig, mode: FtMode, rank: usize, seq_len: usize) -> Vec<MatmulCost> {
    let l = seq_len;
    let d = cfg.d_model;
    let full = mode == FtMode::FullFt;
    let mut out = Vec::new();
    // `residual_hot` = does the residual stream require gradients here?
    // FullFT: embeddings are trainable, so it is hot from the start. PEFT:
    // it heats up once the first adapter output joins the stream.
    let mut residual_hot = full;
    for _ in 0..cfg.n_layers {
        let h_hot = residual_hot;
        // q, k, v base projections
        out.push(MatmulCost { m: l, k: d, n: d, grad_a: h_hot, grad_b: full }); // wq
        out.push(MatmulCost { m: l, k: d, n: d, grad_a: h_hot, grad_b: full }); // wk
        out.push(MatmulCost { m: l, k: d, n: d, grad_a: h_hot, grad_b: full }); // wv
        let (q_hot, k_hot, v_hot) = if full {
            (true, true, true)
        } else {
            // adapters always make q and v gradient-bearing
            (true, h_hot, true)
        };
        if mode == FtMode::Peft {
            // adapter paths: x @ left (grad: left always, x when hot), then
            // (x left) @ right (both sides hot: `down` carries adapter grad)
            for _ in 0..2 {
                out.push(MatmulCost { m: l, k: d, n: rank, grad_a: h_hot, grad_b: true });
                out.push(MatmulCost { m: l, k: rank, n: d, grad_a: true, grad_b: true });
            }
        }
        // attention scores and weighted values (per-head slices sum to these)
        out.push(MatmulCost { m: l, k: d, n: l, grad_a: q_hot, grad_b: k_hot });
        out.push(MatmulCost { m: l, k: l, n: d, grad_a: true, grad_b: v_hot });
        // output projection; the attention result always carries adapter grads
        out.push(MatmulCost { m: l, k: d, n: d, grad_a: true, grad_b: full });
        residual_hot = true;
        // feed-forward
        out.push(MatmulCost { m: l, k: d, n: cfg.d_ff, grad_a: true, grad_b: full });
        out.push(MatmulCost { m: l, k: cfg.d_ff, n: d, grad_a: true, grad_b: full });
    }
    // output head
    out.push(MatmulCost { m: l, k: d, n: cfg.vocab, grad_a: true, grad_b: full });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub forward_flops: f64,
    pub backward_flops: f64,
    pub total_flops: f64,
}

/// Analytic matmul FLOP count for a whole training run
/// (`batch * steps` sequences of length `seq_len`; 2 FLOPs per
/// multiply-accumulate). Adapter-only mode excludes every `dW` of a
/// frozen matrix but keeps the activation-gradient flow.
pub fn flops_estimate(
    cfg: &ModelConfig,
    mode: FtMode,
    rank: usize,
    batch: usize,
    seq_len: usize,
    steps: usize,
) -> FlopsEstimate {
    let costs = enumerate_matmuls(cfg, mode, rank, seq_len);
    let fwd_macs: u64 = costs.iter().map(|c| c.forward_macs()).sum();
    let bwd_macs: u64 = costs.iter().map(|c| c.backward_macs()).sum();
    let runs = (batch * steps) as f64;
    let forward_flops = 2.0 * fwd_macs as f64 * runs;
    let backward_flops = 2.0 * bwd_macs as f64 * runs;
    FlopsEstimate {
        forward_flops,
        backward_flops,
        total_flops: forward_flops + backward_flops,
    }
}

/// Per-sequence training macs (forward, backward) for cross-checking
/// against the tape's instrumentation.
pub fn expected_macs_per_sequence(
    cfg: &ModelConfig,
    mode: FtMode,
    rank: usize,
    seq_len: usize,
) -> (u64, u64) {
    let costs = enumerate_matmuls(cfg, mode, rank, seq_len);
    (
        costs.iter().map(|c| c.forward_macs()).sum(),
        costs.iter().map(|c| c.backward_macs()).sum(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind_adapters, bind_model, window_loss_graph, Binding, TokenizedWindow};
    use crate::tape::Tape;

    fn cfg() -> ModelConfig {
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
    fn freshly_injected_model_matches_base_bitwise() {
        let mc = cfg();
        let base = ModelWeights::init(&mc, 5).unwrap();
        let adapted = inject(base.clone(), &mc, LoraConfig::with_rank(2), 7).unwrap();
        let window = TokenizedWindow {
            tokens: vec![1, 2, 3, 4, 5, 6, 7],
            loss_start: 4,
        };
        let logits_base = {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &base, Binding::Frozen);
            let positions: Vec<usize> = (0..window.tokens.len()).collect();
            let id = crate::model::forward_logits(&mut tape, &bound, &mc, &window.tokens, &positions)
                .unwrap();
            tape.value(id).clone()
        };
        let logits_adapted = {
            let mut tape = Tape::new();
            let mut bound = bind_model(&mut tape, &adapted.base, Binding::Frozen);
            bound.adapters = Some(bind_adapters(&mut tape, &adapted.adapters, false));
            let positions: Vec<usize> = (0..window.tokens.len()).collect();
            let id = crate::model::forward_logits(&mut tape, &bound, &mc, &window.tokens, &positions)
                .unwrap();
            tape.value(id).clone()
        };
        assert_eq!(logits_base, logits_adapted);
    }

    #[test]
    fn merge_of_zero_adapters_is_identity() {
        let mc = cfg();
        let base = ModelWeights::init(&mc, 5).unwrap();
        let adapted = inject(base.clone(), &mc, LoraConfig::with_rank(2), 7).unwrap();
        let merged = merge(adapted);
        assert_eq!(merged, base);
    }

    #[test]
    fn rank_at_or_above_dimension_rejected() {
        let mc = cfg();
        let base = ModelWeights::init(&mc, 5).unwrap();
        assert!(inject(base, &mc, LoraConfig::with_rank(8), 7).is_err());
    }

    #[test]
    fn trainable_counts_follow_the_formula() {
        // desk defaults: 4 layers, d_model 64, r = 4, Q and V targets
        let mc = ModelConfig::default();
        let weights = ModelWeights::init(&mc, 0).unwrap();
        let c4 = count_trainable(&weights, &mc, LoraConfig::with_rank(4));
        assert_eq!(c4.trainable, (64 + 64) * 4 * 2 * 4);
        assert_eq!(c4.trainable, 4096);
        let c16 = count_trainable(&weights, &mc, LoraConfig::with_rank(16));
        assert_eq!(c16.trainable, 4 * c4.trainable);
        assert!(c4.ratio < 0.05);
    }

    #[test]
    fn adapter_allocation_matches_count() {
        let mc = cfg();
        let base = ModelWeights::init(&mc, 5).unwrap();
        let adapted = inject(base, &mc, LoraConfig::with_rank(3), 7).unwrap();
        let counted = count_trainable(&adapted.base, &mc, LoraConfig::with_rank(3));
        assert_eq!(adapted.adapters.n_params(), counted.trainable);
    }

    #[test]
    fn flops_peft_below_fullft_and_zero_steps_zero() {
        let mc = ModelConfig::default();
        let full = flops_estimate(&mc, FtMode::FullFt, 4, 8, 120, 100);
        let peft = flops_estimate(&mc, FtMode::Peft, 4, 8, 120, 100);
        assert!(peft.total_flops < full.total_flops);
        assert!(peft.backward_flops < full.backward_flops);
        let none = flops_estimate(&mc, FtMode::FullFt, 4, 8, 120, 0);
        assert_eq!(none.total_flops, 0.0);
    }

    #[test]
    fn analytic_macs_match_tape_instrumentation() {
        let mc = cfg();
        let window = TokenizedWindow {
            tokens: vec![1, 2, 3, 4, 5, 6, 7, 8],
            loss_start: 5,
        };
        // FullFT: everything trainable
        {
            let weights = ModelWeights::init(&mc, 5).unwrap();
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &weights, Binding::Trainable);
            let loss = window_loss_graph(&mut tape, &bound, &mc, &window).unwrap();
            tape.backward(loss);
            let (fwd, bwd) = expected_macs_per_sequence(&mc, FtMode::FullFt, 0, window.tokens.len());
            assert_eq!(tape.forward_macs, fwd, "forward macs (FullFT)");
            assert_eq!(tape.backward_macs, bwd, "backward macs (FullFT)");
        }
        // PEFT: frozen base plus rank-2 adapters
        {
            let base = ModelWeights::init(&mc, 5).unwrap();
            let adapted = inject(base, &mc, LoraConfig::with_rank(2), 9).unwrap();
            let mut tape = Tape::new();
            let mut bound = bind_model(&mut tape, &adapted.base, Binding::Frozen);
            bound.adapters = Some(bind_adapters(&mut tape, &adapted.adapters, true));
            let loss = window_loss_graph(&mut tape, &bound, &mc, &window).unwrap();
            tape.backward(loss);
            let (fwd, bwd) = expected_macs_per_sequence(&mc, FtMode::Peft, 2, window.tokens.len());
            assert_eq!(tape.forward_macs, fwd, "forward macs (PEFT)");
            assert_eq!(tape.backward_macs, bwd, "backward macs (PEFT)");
        }
    }
}
