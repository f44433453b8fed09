//! Scaled forecast metrics and the rolling-window evaluation harness.
//!
//! Point scores (MASE, RMSSE) and distributional scores (wQL, MSIS) are
//! all normalized by factors derived from the training split: the naive
//! seasonal error for MASE/RMSSE/MSIS and the mean absolute level for
//! wQL. Factors are computed once per series, never per window.

use crate::error::{Error, Result};
use crate::forecast::Forecaster;
use serde::{Deserialize, Serialize};

/// Reference lag (one workday of 15-minute steps) for the naive scaling.
pub const DEFAULT_C_REF: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    pub zeta_mae: f64,
    pub zeta_rmse: f64,
    pub zeta_ql: f64,
    pub c_ref: usize,
}

/// Naive-error scaling factors over the training series.
///
/// `zeta_mae` is the mean absolute `c_ref`-lagged difference, `zeta_rmse`
/// its root-mean-square form, and `zeta_ql` the mean absolute level over
/// the same index range.
pub fn scaling_factors(train: &[f64], c_ref: usize) -> Result<ScalingFactors> {
    if c_ref == 0 {
        return Err(Error::config("c_ref must be positive"));
    }
    if train.len() <= c_ref {
        return Err(Error::data(format!(
            "training series of {} samples is too short for c_ref {c_ref}",
            train.len()
        )));
    }
    let n = (train.len() - c_ref) as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut level_sum = 0.0;
    for tau in c_ref..train.len() {
        let diff = train[tau] - train[tau - c_ref];
        abs_sum += diff.abs();
        sq_sum += diff * diff;
        level_sum += train[tau].abs();
    }
    let zeta_mae = abs_sum / n;
    let zeta_rmse = (sq_sum / n).sqrt();
    let zeta_ql = level_sum / n;
    if zeta_mae == 0.0 {
        return Err(Error::data(
            "series is exactly periodic at c_ref; naive error is zero and scaled metrics are undefined",
        ));
    }
    if zeta_ql == 0.0 {
        return Err(Error::data("series is identically zero; wQL scaling undefined"));
    }
    Ok(ScalingFactors {
        zeta_mae,
        zeta_rmse,
        zeta_ql,
        c_ref,
    })
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::data(format!(
            "path length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean absolute error of the mean path, scaled by `zeta_mae`.
pub fn mase(mean_path: &[f64], truth: &[f64], zeta_mae: f64) -> Result<f64> {
    check_lengths(mean_path, truth)?;
    let h = truth.len() as f64;
    let mae = mean_path
        .iter()
        .zip(truth)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / h;
    Ok(mae / zeta_mae)
}

/// Root-mean-square error of the mean path, scaled by `zeta_rmse`.
pub fn rmsse(mean_path: &[f64], truth: &[f64], zeta_rmse: f64) -> Result<f64> {
    check_lengths(mean_path, truth)?;
    let h = truth.len() as f64;
    let mse = mean_path
        .iter()
        .zip(truth)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / h;
    Ok(mse.sqrt() / zeta_rmse)
}

/// Quantile (pinball) loss at level `beta`, scaled:
/// `(2 / (H * zeta_ql)) * sum_t [beta (y - q)_+ + (1 - beta) (q - y)_+]`.
pub fn quantile_loss(quantile_path: &[f64], truth: &[f64], beta: f64, zeta_ql: f64) -> Result<f64> {
    check_lengths(quantile_path, truth)?;
    let h = truth.len() as f64;
    let mut sum = 0.0;
    for (q, y) in quantile_path.iter().zip(truth) {
        sum += beta * (y - q).max(0.0) + (1.0 - beta) * (q - y).max(0.0);
    }
    Ok(2.0 * sum / (h * zeta_ql))
}

/// Mean of the quantile losses over the configured levels.
pub fn wql(
    quantile_paths: &[(f64, Vec<f64>)],
    truth: &[f64],
    zeta_ql: f64,
) -> Result<f64> {
    if quantile_paths.is_empty() {
        return Err(Error::config("wQL needs at least one quantile level"));
    }
    let mut total = 0.0;
    for (beta, path) in quantile_paths {
        total += quantile_loss(path, truth, *beta, zeta_ql)?;
    }
    Ok(total / quantile_paths.len() as f64)
}

/// Mean scaled interval score for the `[beta, 1 - beta]` interval:
/// width plus `2/beta` penalties for truth escaping the interval, scaled
/// by `H * zeta_mae`.
pub fn msis(
    lower: &[f64],
    upper: &[f64],
    truth: &[f64],
    beta: f64,
    zeta_mae: f64,
) -> Result<f64> {
    check_lengths(lower, truth)?;
    check_lengths(upper, truth)?;
    if !(0.0 < beta && beta < 0.5) {
        return Err(Error::config("MSIS beta must lie in (0, 0.5)"));
    }
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return Err(Error::data("crossed interval: lower bound above upper"));
    }
    let h = truth.len() as f64;
    let mut sum = 0.0;
    for ((l, u), y) in lower.iter().zip(upper).zip(truth) {
        sum += u - l;
        if y < l {
            sum += (2.0 / beta) * (l - y);
        }
        if y > u {
            sum += (2.0 / beta) * (y - u);
        }
    }
    Ok(sum / (h * zeta_mae))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingEvalConfig {
    /// Test span in steps; the evaluator scores `t_test - horizon + 1` origins.
    pub t_test: usize,
    pub horizon: usize,
    pub context_len: usize,
    pub quantiles: Vec<f64>,
    pub msis_beta: f64,
    /// Sample paths drawn per forecast.
    pub n_paths: usize,
    pub c_ref: usize,
    pub seed: u64,
}

impl Default for RollingEvalConfig {
    fn default() -> Self {
        RollingEvalConfig {
            t_test: 480,
            horizon: 24,
            context_len: 96,
            quantiles: vec![0.1, 0.5, 0.9],
            msis_beta: 0.1,
            n_paths: 20,
            c_ref: DEFAULT_C_REF,
            seed: 0,
        }
    }
}

impl RollingEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_test < self.horizon {
            return Err(Error::config("t_test must be at least the horizon"));
        }
        if self.quantiles.is_empty() || self.quantiles.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::config("quantile levels must lie in (0, 1)"));
        }
        if !(0.0 < self.msis_beta && self.msis_beta < 0.5) {
            return Err(Error::config("msis_beta must lie in (0, 0.5)"));
        }
        if self.n_paths < 2 {
            return Err(Error::config("need at least 2 sample paths"));
        }
        Ok(())
    }
}

/// Scores of one forecast origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScores {
    pub origin: usize,
    pub mase: f64,
    pub rmsse: f64,
    pub wql: f64,
    pub msis: f64,
}

/// Per-window scores plus their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub series: String,
    pub window_count: usize,
    pub mase: MeanStd,
    pub rmsse: MeanStd,
    pub wql: MeanStd,
    pub msis: MeanStd,
    pub per_window: Vec<WindowScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Roll a forecaster across the test span.
///
/// `train` supplies the scaling factors and the earliest context samples;
/// `test` supplies truth. For each origin `t` in
/// `[T, T + t_test - horizon]` (with `T = train.len()`) the forecaster
/// sees everything before `t` and is scored on the next `horizon` steps.
pub fn rolling_evaluate(
    forecaster: &dyn Forecaster,
    train: &[f64],
    test: &[f64],
    cfg: &RollingEvalConfig,
) -> Result<MetricReport> {
    rolling_evaluate_named(forecaster, train, test, cfg, "series")
}

pub fn rolling_evaluate_named(
    forecaster: &dyn Forecaster,
    train: &[f64],
    test: &[f64],
    cfg: &RollingEvalConfig,
    series_name: &str,
) -> Result<MetricReport> {
    cfg.validate()?;
    if test.len() < cfg.t_test {
        return Err(Error::data(format!(
            "test split has {} samples, t_test wants {}",
            test.len(),
            cfg.t_test
        )));
    }
    if train.len() < cfg.context_len {
        return Err(Error::data(
            "training split shorter than the context window; first origins would lack context",
        ));
    }
    let factors = scaling_factors(train, cfg.c_ref)?;

    let mut full = Vec::with_capacity(train.len() + cfg.t_test);
    full.extend_from_slice(train);
    full.extend_from_slice(&test[..cfg.t_test]);

    let t0 = train.len();
    let origins: Vec<usize> = (t0..=t0 + cfg.t_test - cfg.horizon).collect();
    let mut per_window = Vec::with_capacity(origins.len());
    for &t in &origins {
        let scores = score_origin(forecaster, &full, t, cfg, &factors)
            .map_err(|e| Error::Evaluation {
                origin: t,
                message: e.to_string(),
            })?;
        per_window.push(scores);
    }
    Ok(report_from_windows(series_name, per_window))
}

fn score_origin(
    forecaster: &dyn Forecaster,
    full: &[f64],
    t: usize,
    cfg: &RollingEvalConfig,
    factors: &ScalingFactors,
) -> Result<WindowScores> {
    let dist = forecaster.forecast(&full[..t], cfg.horizon, cfg.n_paths, cfg.seed ^ t as u64)?;
    let truth = &full[t..t + cfg.horizon];
    let mean_path = dist.mean_path();
    let quantile_paths: Vec<(f64, Vec<f64>)> = cfg
        .quantiles
        .iter()
        .map(|&b| (b, dist.quantile_path(b)))
        .collect();
    let lower = dist.quantile_path(cfg.msis_beta);
    let upper = dist.quantile_path(1.0 - cfg.msis_beta);
    Ok(WindowScores {
        origin: t,
        mase: mase(&mean_path, truth, factors.zeta_mae)?,
        rmsse: rmsse(&mean_path, truth, factors.zeta_rmse)?,
        wql: wql(&quantile_paths, truth, factors.zeta_ql)?,
        msis: msis(&lower, &upper, truth, cfg.msis_beta, factors.zeta_mae)?,
    })
}

pub fn report_from_windows(series_name: &str, per_window: Vec<WindowScores>) -> MetricReport {
    let collect = |f: fn(&WindowScores) -> f64| -> Vec<f64> { per_window.iter().map(f).collect() };
    MetricReport {
        series: series_name.to_string(),
        window_count: per_window.len(),
        mase: mean_std(&collect(|w| w.mase)),
        rmsse: mean_std(&collect(|w| w.rmsse)),
        wql: mean_std(&collect(|w| w.wql)),
        msis: mean_std(&collect(|w| w.msis)),
        per_window,
    }
}

/// Cross-series summary: unweighted mean and population standard
/// deviation of each metric's per-report means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub n_series: usize,
    pub mase: MeanStd,
    pub rmsse: MeanStd,
    pub wql: MeanStd,
    pub msis: MeanStd,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateSummary> {
    if reports.is_empty() {
        return Err(Error::data("cannot aggregate zero reports"));
    }
    let collect = |f: fn(&MetricReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    Ok(AggregateSummary {
        n_series: reports.len(),
        mase: mean_std(&collect(|r| r.mase.mean)),
        rmsse: mean_std(&collect(|r| r.rmsse.mean)),
        wql: mean_std(&collect(|r| r.wql.mean)),
        msis: mean_std(&collect(|r| r.msis.mean)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_factors_hand_example() {
        let f = scaling_factors(&[1.0, 3.0, 2.0, 5.0], 2).unwrap();
        assert!((f.zeta_mae - 1.5).abs() < 1e-12);
        assert!((f.zeta_rmse - (2.5f64).sqrt()).abs() < 1e-12);
        assert!((f.zeta_ql - 3.5).abs() < 1e-12);
    }

    #[test]
    fn periodic_and_constant_series_rejected() {
        // exactly 2-periodic
        assert!(scaling_factors(&[1.0, 2.0, 1.0, 2.0, 1.0], 2).is_err());
        // constant
        assert!(scaling_factors(&[7.0, 7.0, 7.0, 7.0], 2).is_err());
    }

    #[test]
    fn mase_rmsse_hand_examples() {
        let m = mase(&[2.0, 4.0], &[3.0, 5.0], 1.5).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
        let r = rmsse(&[2.0, 4.0], &[3.0, 5.0], (2.5f64).sqrt()).unwrap();
        assert!((r - 1.0 / (2.5f64).sqrt()).abs() < 1e-12);
        // perfect forecast
        assert_eq!(mase(&[3.0, 5.0], &[3.0, 5.0], 1.5).unwrap(), 0.0);
        assert_eq!(rmsse(&[3.0, 5.0], &[3.0, 5.0], 1.5).unwrap(), 0.0);
    }

    #[test]
    fn wql_hand_example() {
        let truth = [4.0];
        let zeta = 3.5;
        let q10 = quantile_loss(&[3.0], &truth, 0.1, zeta).unwrap();
        let q50 = quantile_loss(&[4.0], &truth, 0.5, zeta).unwrap();
        let q90 = quantile_loss(&[6.0], &truth, 0.9, zeta).unwrap();
        assert!((q10 - 2.0 * 0.1 / 3.5).abs() < 1e-12);
        assert_eq!(q50, 0.0);
        assert!((q90 - 2.0 * 0.2 / 3.5).abs() < 1e-12);
        let w = wql(
            &[(0.1, vec![3.0]), (0.5, vec![4.0]), (0.9, vec![6.0])],
            &truth,
            zeta,
        )
        .unwrap();
        assert!((w - (q10 + q50 + q90) / 3.0).abs() < 1e-12);
        assert!((w - 0.0571428571428).abs() < 1e-10);
    }

    #[test]
    fn pinball_is_symmetric_at_the_median() {
        let over = quantile_loss(&[5.0], &[4.0], 0.5, 1.0).unwrap();
        let under = quantile_loss(&[3.0], &[4.0], 0.5, 1.0).unwrap();
        assert!((over - under).abs() < 1e-15);
    }

    #[test]
    fn msis_hand_example() {
        let v = msis(&[0.0], &[2.0], &[3.0], 0.1, 1.5).unwrap();
        assert!((v - (2.0 + 20.0) / 1.5).abs() < 1e-12);
        // truth inside: only the width remains
        let v = msis(&[0.0], &[2.0], &[1.0], 0.1, 1.5).unwrap();
        assert!((v - 2.0 / 1.5).abs() < 1e-12);
        // degenerate interval equal to truth
        let v = msis(&[3.0], &[3.0], &[3.0], 0.1, 1.5).unwrap();
        assert_eq!(v, 0.0);
        // crossed interval rejected
        assert!(msis(&[2.0], &[1.0], &[1.5], 0.1, 1.5).is_err());
    }

    #[test]
    fn aggregation_mean_and_population_std() {
        let mk = |m: f64| MetricReport {
            series: "s".into(),
            window_count: 1,
            mase: MeanStd { mean: m, std: 0.0 },
            rmsse: MeanStd { mean: m, std: 0.0 },
            wql: MeanStd { mean: m, std: 0.0 },
            msis: MeanStd { mean: m, std: 0.0 },
            per_window: vec![],
        };
        let s = aggregate(&[mk(0.2), mk(0.4)]).unwrap();
        assert!((s.mase.mean - 0.3).abs() < 1e-12);
        assert!((s.mase.std - 0.1).abs() < 1e-12);
        let single = aggregate(&[mk(0.7)]).unwrap();
        assert_eq!(single.mase.std, 0.0);
    }
}
