//! Pre-training on a synthetic corpus, full fine-tuning, and
//! adapter-only (PEFT) fine-tuning.
//!
//! One shared loop drives all three modes: sample a window batch from the
//! run's dedicated batch stream, accumulate per-item gradients in index
//! order, and apply one AdamW step to whatever parameter set is
//! trainable. Given `(seed, data, config)` the resulting checkpoint is
//! bit-identical on every run.

use crate::checkpoint::{Checkpoint, TrainMode, TrainRunMeta};
use crate::error::{Error, Result};
use crate::lora::{inject, LoraAdapters, LoraConfig};
use crate::model::{
    bind_adapters, bind_model, window_loss_graph, Binding, ModelConfig, ModelWeights,
    TokenizedWindow,
};
use crate::optim::{adamw_step, OptimizerState};
use crate::rng::{stream_rng, Domain};
use crate::series::{TimeSeries, WindowedDataset};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerSpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of iterations spent in linear learning-rate warmup.
    pub warmup_frac: f64,
}

impl TrainRun {
    pub fn pretrain(iterations: usize, seed: u64) -> Self {
        TrainRun {
            mode: TrainMode::Pretrain,
            iterations,
            batch_size: 32,
            seed,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_frac: 0.05,
        }
    }

    /// Fine-tuning defaults: 1000 iterations at a tenth of the
    /// pre-training learning rate.
    pub fn finetune(mode: TrainMode, seed: u64) -> Self {
        TrainRun {
            mode,
            iterations: 1000,
            batch_size: 32,
            seed,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_frac: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("bad optimizer settings"));
        }
        Ok(())
    }

    fn meta(&self, final_loss: f64) -> TrainRunMeta {
        TrainRunMeta {
            mode: self.mode,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.seed,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            final_loss,
        }
    }
}

/// Pre-training window policy: context lengths to mix and the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainWindows {
    pub context_choices: Vec<usize>,
    pub horizon: usize,
}

impl Default for PretrainWindows {
    fn default() -> Self {
        PretrainWindows {
            context_choices: vec![96],
            horizon: 24,
        }
    }
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<f64>,
    pub seconds_per_iteration: f64,
}

enum Trainable<'a> {
    Full(&'a mut ModelWeights),
    Adapters(&'a ModelWeights, &'a mut LoraAdapters),
}

fn training_loop(
    cfg: &ModelConfig,
    run: &TrainRun,
    mut trainable: Trainable<'_>,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> TokenizedWindow,
) -> Result<(Vec<f64>, f64)> {
    run.validate()?;
    let n_trainable = match &trainable {
        Trainable::Full(w) => w.named_tensors().len(),
        Trainable::Adapters(_, a) => a.named_tensors().len(),
    };
    let mut state = {
        let shapes: Vec<Tensor> = match &trainable {
            Trainable::Full(w) => w.named_tensors().iter().map(|(_, t)| (*t).clone()).collect(),
            Trainable::Adapters(_, a) => a.named_tensors().iter().map(|(_, t)| (*t).clone()).collect(),
        };
        OptimizerState::new(&shapes, run.learning_rate)
    };
    state.weight_decay = run.weight_decay;
    state.warmup_steps = (run.iterations as f64 * run.warmup_frac) as usize;

    let mut loss_curve = Vec::with_capacity(run.iterations);
    let started = std::time::Instant::now();
    for iter in 0..run.iterations {
        let mut rng = stream_rng(run.seed, Domain::BatchSampling, iter as u64);
        let batch: Vec<TokenizedWindow> = (0..run.batch_size).map(|_| sample(&mut rng)).collect();
        let total_scored: usize = batch.iter().map(|w| w.scored_positions()).sum();

        let mut grads: Vec<Option<Tensor>> = vec![None; n_trainable];
        let mut batch_loss = 0.0;
        for window in &batch {
            let weight = window.scored_positions() as f64 / total_scored as f64;
            let mut tape = Tape::new();
            let (bound, ids) = match &trainable {
                Trainable::Full(w) => {
                    let bound = bind_model(&mut tape, w, Binding::Trainable);
                    let ids = collect_model_ids(&bound);
                    (bound, ids)
                }
                Trainable::Adapters(base, adapters) => {
                    let mut bound = bind_model(&mut tape, base, Binding::Frozen);
                    let bound_ad = bind_adapters(&mut tape, adapters, true);
                    let ids = bound_ad
                        .per_layer
                        .iter()
                        .flat_map(|&(a, b, c, d)| [a, b, c, d])
                        .collect();
                    bound.adapters = Some(bound_ad);
                    (bound, ids)
                }
            };
            let loss = window_loss_graph(&mut tape, &bound, cfg, window)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    iteration: iter,
                    message: format!("divergent loss ({loss_value})"),
                });
            }
            batch_loss += weight * loss_value;
            tape.backward(loss);
            for (slot, id) in grads.iter_mut().zip(&ids) {
                if let Some(g) = tape.grad(*id) {
                    match slot {
                        Some(acc) => acc.add_assign(&g.scale(weight)),
                        None => *slot = Some(g.scale(weight)),
                    }
                }
            }
        }
        loss_curve.push(batch_loss);

        let grads: Vec<Tensor> = {
            let shapes: Vec<(usize, usize)> = match &trainable {
                Trainable::Full(w) => w
                    .named_tensors()
                    .iter()
                    .map(|(_, t)| (t.rows(), t.cols()))
                    .collect(),
                Trainable::Adapters(_, a) => a
                    .named_tensors()
                    .iter()
                    .map(|(_, t)| (t.rows(), t.cols()))
                    .collect(),
            };
            grads
                .into_iter()
                .zip(shapes)
                .map(|(g, (r, c))| g.unwrap_or_else(|| Tensor::zeros(r, c)))
                .collect()
        };
        let mut params: Vec<&mut Tensor> = match &mut trainable {
            Trainable::Full(w) => w.tensors_mut(),
            Trainable::Adapters(_, a) => a.tensors_mut(),
        };
        adamw_step(&mut params, &grads, &mut state).map_err(|e| match e {
            Error::Training { message, .. } => Error::Training {
                iteration: iter,
                message,
            },
            other => other,
        })?;
    }
    let seconds_per_iteration = started.elapsed().as_secs_f64() / run.iterations as f64;
    Ok((loss_curve, seconds_per_iteration))
}

fn collect_model_ids(bound: &crate::model::BoundModel) -> Vec<crate::tape::VarId> {
    let mut ids = vec![bound.token_embedding, bound.position_embedding];
    for l in &bound.layers {
        ids.extend([
            l.ln1_gain, l.ln1_offset, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_offset, l.w_ff1,
            l.w_ff2,
        ]);
    }
    ids.extend([bound.final_ln_gain, bound.final_ln_offset, bound.w_out]);
    ids
}

fn encode_pair(
    context: &[f64],
    target: &[f64],
    spec: &TokenizerSpec,
) -> TokenizedWindow {
    TokenizedWindow::encode(context, target, spec)
        .expect("finite preprocessed values tokenize cleanly")
}

/// Train a fresh model on windows sampled uniformly across the corpus.
/// Each draw picks a series, one of the configured context lengths, and
/// an origin, so one run sees many zones and alignment phases.
pub fn pretrain(
    cfg: &ModelConfig,
    spec: &TokenizerSpec,
    corpus: &[TimeSeries],
    windows: &PretrainWindows,
    run: &TrainRun,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    run.validate()?;
    if corpus.is_empty() {
        return Err(Error::data("pre-training corpus is empty"));
    }
    if windows.context_choices.is_empty() || windows.horizon == 0 {
        return Err(Error::config("pretraining needs context choices and a horizon"));
    }
    let h = windows.horizon;
    let longest = *windows.context_choices.iter().max().unwrap();
    if longest + h > cfg.max_context {
        return Err(Error::config(format!(
            "context {longest} + horizon {h} exceeds max_context {}",
            cfg.max_context
        )));
    }
    for series in corpus {
        let min_c = *windows.context_choices.iter().min().unwrap();
        if series.len() < min_c + h {
            return Err(Error::data(format!(
                "series {} too short for the smallest training window",
                series.id
            )));
        }
    }

    let mut weights = ModelWeights::init(cfg, run.seed)?;
    let (loss_curve, seconds_per_iteration) = {
        let sample = |rng: &mut ChaCha8Rng| -> TokenizedWindow {
            loop {
                let series = &corpus[rng.gen_range(0..corpus.len())];
                let c = windows.context_choices[rng.gen_range(0..windows.context_choices.len())];
                if series.len() < c + h {
                    continue;
                }
                let origin = rng.gen_range(c..=series.len() - h);
                return encode_pair(
                    &series.values[origin - c..origin],
                    &series.values[origin..origin + h],
                    spec,
                );
            }
        };
        training_loop(cfg, run, Trainable::Full(&mut weights), sample)?
    };
    let final_loss = *loss_curve.last().unwrap();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(
            cfg.clone(),
            spec.clone(),
            weights,
            None,
            Some(run.meta(final_loss)),
        ),
        loss_curve,
        seconds_per_iteration,
    })
}

fn check_dataset_compat(base: &Checkpoint, dataset: &WindowedDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::data("fine-tuning dataset is empty"));
    }
    if dataset.context_len + dataset.horizon > base.model_config.max_context {
        return Err(Error::config(format!(
            "dataset windows ({} + {}) exceed the checkpoint's max_context {}",
            dataset.context_len, dataset.horizon, base.model_config.max_context
        )));
    }
    Ok(())
}

/// Update every parameter of the base checkpoint on the target dataset.
pub fn finetune_full(
    base: &Checkpoint,
    dataset: &WindowedDataset,
    run: &TrainRun,
) -> Result<TrainOutcome> {
    check_dataset_compat(base, dataset)?;
    let cfg = base.model_config.clone();
    let spec = base.tokenizer.clone();
    let mut weights = base.weights.clone();
    let (loss_curve, seconds_per_iteration) = {
        let sample = |rng: &mut ChaCha8Rng| -> TokenizedWindow {
            let pair = &dataset.pairs[rng.gen_range(0..dataset.len())];
            encode_pair(&pair.context, &pair.target, &spec)
        };
        training_loop(&cfg, run, Trainable::Full(&mut weights), sample)?
    };
    let final_loss = *loss_curve.last().unwrap();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg, spec, weights, None, Some(run.meta(final_loss))),
        loss_curve,
        seconds_per_iteration,
    })
}

/// Train low-rank adapters over a frozen base checkpoint. The stored base
/// weights are bit-identical to the input's.
pub fn finetune_peft(
    base: &Checkpoint,
    dataset: &WindowedDataset,
    lora_cfg: LoraConfig,
    run: &TrainRun,
) -> Result<TrainOutcome> {
    check_dataset_compat(base, dataset)?;
    let cfg = base.model_config.clone();
    let spec = base.tokenizer.clone();
    let adapted = inject(base.weights.clone(), &cfg, lora_cfg, run.seed)?;
    let base_weights = adapted.base;
    let mut adapters = adapted.adapters;
    let (loss_curve, seconds_per_iteration) = {
        let sample = |rng: &mut ChaCha8Rng| -> TokenizedWindow {
            let pair = &dataset.pairs[rng.gen_range(0..dataset.len())];
            encode_pair(&pair.context, &pair.target, &spec)
        };
        training_loop(
            &cfg,
            run,
            Trainable::Adapters(&base_weights, &mut adapters),
            sample,
        )?
    };
    let final_loss = *loss_curve.last().unwrap();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(
            cfg,
            spec,
            base_weights,
            Some(adapters),
            Some(run.meta(final_loss)),
        ),
        loss_curve,
        seconds_per_iteration,
    })
}

/// Moving average of a loss curve with the given window, for progress
/// checks.
pub fn smoothed(curve: &[f64], window: usize) -> Vec<f64> {
    if curve.len() < window || window == 0 {
        return curve.to_vec();
    }
    (0..=curve.len() - window)
        .map(|i| curve[i..i + window].iter().sum::<f64>() / window as f64)
        .collect()
}
