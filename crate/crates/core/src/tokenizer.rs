//! Conversion between real-valued windows and discrete token sequences.
//!
//! A context window is divided by the mean of its absolute values, then
//! each scaled value falls into one of `n_bins` uniform bins spanning
//! `[-bin_limit, bin_limit]`. Decoding maps a bin back to its center and
//! multiplies by the stored scale. Two ids above the value bins are
//! reserved for padding and end-of-sequence.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub n_bins: usize,
    /// Half-width of the scaled bin range `[-bin_limit, bin_limit]`.
    pub bin_limit: f64,
    pub scale_epsilon: f64,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec {
            n_bins: 256,
            bin_limit: 15.0,
            scale_epsilon: 1e-6,
        }
    }
}

impl TokenizerSpec {
    pub fn new(n_bins: usize, bin_limit: f64) -> Result<Self> {
        let spec = TokenizerSpec {
            n_bins,
            bin_limit,
            ..TokenizerSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::config(format!("n_bins must be >= 2, got {}", self.n_bins)));
        }
        if !(self.bin_limit > 0.0) {
            return Err(Error::config("bin_limit must be positive"));
        }
        if !(self.scale_epsilon > 0.0) {
            return Err(Error::config("scale_epsilon must be positive"));
        }
        Ok(())
    }

    pub fn pad_token(&self) -> u32 {
        self.n_bins as u32
    }

    pub fn eos_token(&self) -> u32 {
        self.n_bins as u32 + 1
    }

    /// Value bins plus the two special ids.
    pub fn vocab_size(&self) -> usize {
        self.n_bins + 2
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.bin_limit / self.n_bins as f64
    }

    pub fn bin_center(&self, bin: u32) -> f64 {
        -self.bin_limit + (bin as f64 + 0.5) * self.bin_width()
    }
}

/// Token ids plus the scale that maps bin centers back to raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub scale: f64,
}

/// `s = max(mean(|context|), scale_epsilon)`; returns `(context / s, s)`.
pub fn mean_scale(context: &[f64], spec: &TokenizerSpec) -> (Vec<f64>, f64) {
    assert!(!context.is_empty(), "mean_scale needs a nonempty context");
    let mean_abs = context.iter().map(|v| v.abs()).sum::<f64>() / context.len() as f64;
    let s = mean_abs.max(spec.scale_epsilon);
    (context.iter().map(|v| v / s).collect(), s)
}

/// Bin index of one scaled value; out-of-range values clamp to edge bins.
pub fn bin_of(v: f64, spec: &TokenizerSpec) -> Result<u32> {
    if !v.is_finite() {
        return Err(Error::data(format!("cannot tokenize non-finite value {v}")));
    }
    let raw = ((v + spec.bin_limit) / spec.bin_width()).floor();
    let clamped = raw.max(0.0).min(spec.n_bins as f64 - 1.0);
    Ok(clamped as u32)
}

/// Discretize a scaled window.
pub fn tokenize(scaled: &[f64], scale: f64, spec: &TokenizerSpec) -> Result<TokenSequence> {
    let tokens = scaled
        .iter()
        .map(|&v| bin_of(v, spec))
        .collect::<Result<Vec<u32>>>()?;
    Ok(TokenSequence { tokens, scale })
}

/// Map token ids back to bin centers in raw units.
pub fn detokenize(seq: &TokenSequence, spec: &TokenizerSpec) -> Result<Vec<f64>> {
    seq.tokens
        .iter()
        .map(|&t| {
            if t >= spec.n_bins as u32 {
                Err(Error::data(format!(
                    "special token {t} in payload (n_bins = {})",
                    spec.n_bins
                )))
            } else {
                Ok(spec.bin_center(t) * seq.scale)
            }
        })
        .collect()
}

/// Scale and tokenize a raw context in one step.
pub fn encode_context(context: &[f64], spec: &TokenizerSpec) -> Result<TokenSequence> {
    let (scaled, s) = mean_scale(context, spec);
    tokenize(&scaled, s, spec)
}
