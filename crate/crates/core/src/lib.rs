//! Probabilistic building-energy forecasting at desk scale.
//!
//! The crate covers the full pipeline: synthetic multi-zone building
//! signals (or CSV ingestion), preprocessing and windowing, a tokenized
//! decoder-only transformer forecaster with full and low-rank (LoRA)
//! fine-tuning on a from-scratch f64 autodiff engine, reference
//! baselines, and a scaled-metric rolling evaluation harness
//! (MASE / RMSSE / wQL / MSIS).

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod series;
pub mod series_io;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
