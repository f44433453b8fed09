//! Probabilistic forecasts as empirical sample sets, and the interface
//! every forecaster (transformer or baseline) plugs into the evaluator.

use crate::error::{Error, Result};
use crate::tensor::quantile_sorted;

/// `S` sampled paths of `H` steps each, in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    /// `samples[s][h]` = step `h` of path `s`.
    pub samples: Vec<Vec<f64>>,
}

impl ForecastDistribution {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::config("a forecast needs at least 2 sample paths"));
        }
        let h = samples[0].len();
        if samples.iter().any(|p| p.len() != h) {
            return Err(Error::config("sample paths must share one horizon"));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite value in forecast samples"));
        }
        Ok(ForecastDistribution { samples })
    }

    pub fn n_paths(&self) -> usize {
        self.samples.len()
    }

    pub fn horizon(&self) -> usize {
        self.samples[0].len()
    }

    /// Per-step empirical quantile, linearly interpolated between order
    /// statistics at position `(S - 1) * beta`.
    pub fn quantile_path(&self, beta: f64) -> Vec<f64> {
        assert!(0.0 < beta && beta < 1.0, "beta must lie in (0, 1)");
        let mut out = Vec::with_capacity(self.horizon());
        let mut column = vec![0.0; self.n_paths()];
        for h in 0..self.horizon() {
            for (s, path) in self.samples.iter().enumerate() {
                column[s] = path[h];
            }
            column.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.push(quantile_sorted(&column, beta));
        }
        out
    }

    /// Per-step arithmetic mean over paths.
    pub fn mean_path(&self) -> Vec<f64> {
        let n = self.n_paths() as f64;
        (0..self.horizon())
            .map(|h| self.samples.iter().map(|p| p[h]).sum::<f64>() / n)
            .collect()
    }
}

/// Anything that can forecast `horizon` steps ahead from a history slice.
///
/// `seed` controls sample-path randomness only; implementations must be
/// pure given `(history, horizon, n_paths, seed)`.
pub trait Forecaster: Sync {
    fn forecast(
        &self,
        history: &[f64],
        horizon: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<ForecastDistribution>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist_1step(values: &[f64]) -> ForecastDistribution {
        ForecastDistribution::new(values.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn quantiles_of_one_to_ten() {
        let d = dist_1step(&[1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]);
        assert!((d.quantile_path(0.5)[0] - 5.5).abs() < 1e-12);
        assert!((d.quantile_path(0.1)[0] - 1.9).abs() < 1e-12);
        assert!((d.mean_path()[0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn quantiles_are_monotone_in_beta() {
        let d = dist_1step(&[0.3, -2.0, 7.7, 1.1, 0.0, 4.2]);
        let mut prev = f64::NEG_INFINITY;
        for beta in [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95] {
            let q = d.quantile_path(beta)[0];
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn rejects_single_path_and_ragged_horizons() {
        assert!(ForecastDistribution::new(vec![vec![1.0]]).is_err());
        assert!(ForecastDistribution::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
