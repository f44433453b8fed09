//! Reference forecasters: the seasonal-naive baseline that anchors the
//! metric scaling, and a direct quantile regressor trained with pinball
//! loss. Both expose the same [`Forecaster`] interface as the transformer
//! so they run through the identical rolling evaluation path.

use crate::error::{Error, Result};
use crate::forecast::{ForecastDistribution, Forecaster};
use crate::optim::{adamw_step, OptimizerState};
use crate::rng::{stream_rng, Domain};
use crate::series::WindowedDataset;
use crate::tape::Tape;
use crate::tensor::{quantile_sorted, Tensor};
use crate::tokenizer::{mean_scale, TokenizerSpec};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Repeats the value one `lag` earlier; sample paths add bootstrap draws
/// from the training residual pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeasonalNaiveModel {
    pub lag: usize,
    /// Training residuals `y[t] - y[t - lag]`.
    pub residuals: Vec<f64>,
    /// Empirical residual quantiles per horizon step (rows) and level
    /// (columns), monotone in the level.
    pub quantile_table: Vec<Vec<f64>>,
    pub quantile_levels: Vec<f64>,
}

impl SeasonalNaiveModel {
    pub fn fit(train: &[f64], lag: usize, horizon: usize, levels: &[f64]) -> Result<Self> {
        if lag == 0 {
            return Err(Error::config("lag must be positive"));
        }
        if train.len() <= lag {
            return Err(Error::data("training split shorter than the lag"));
        }
        let residuals: Vec<f64> = (lag..train.len()).map(|t| train[t] - train[t - lag]).collect();
        let mut sorted = residuals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // the naive scheme has one residual pool; every horizon step
        // shares its quantiles
        let row: Vec<f64> = levels.iter().map(|&b| quantile_sorted(&sorted, b)).collect();
        Ok(SeasonalNaiveModel {
            lag,
            residuals,
            quantile_table: vec![row; horizon],
            quantile_levels: levels.to_vec(),
        })
    }
}

impl Forecaster for SeasonalNaiveModel {
    fn forecast(
        &self,
        history: &[f64],
        horizon: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<ForecastDistribution> {
        if history.len() < self.lag {
            return Err(Error::data(format!(
                "history of {} samples is shorter than lag {}",
                history.len(),
                self.lag
            )));
        }
        if horizon > self.lag {
            return Err(Error::config("horizon beyond the seasonal lag is unsupported"));
        }
        let start = history.len() - self.lag;
        let point: Vec<f64> = (0..horizon).map(|h| history[start + h]).collect();
        let mut samples = Vec::with_capacity(n_paths);
        for path in 0..n_paths {
            let mut rng = stream_rng(seed, Domain::Bootstrap, path as u64);
            let draw: Vec<f64> = point
                .iter()
                .map(|p| {
                    if self.residuals.is_empty() {
                        *p
                    } else {
                        p + self.residuals[rng.gen_range(0..self.residuals.len())]
                    }
                })
                .collect();
            samples.push(draw);
        }
        ForecastDistribution::new(samples)
    }
}

/// Small feed-forward map from the scaled context to `H x N_q` quantiles,
/// trained jointly with pinball loss. Outputs are sorted per step so the
/// quantile paths never cross.
#[derive(Debug, Clone)]
pub struct QuantileRegressorModel {
    pub context_len: usize,
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    pub hidden: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub tokenizer: TokenizerSpec,
}

impl QuantileRegressorModel {
    pub fn init(
        context_len: usize,
        horizon: usize,
        quantiles: &[f64],
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if quantiles.is_empty() || quantiles.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::config("quantile levels must lie in (0, 1)"));
        }
        let mut sorted = quantiles.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let out_dim = horizon * sorted.len();
        let mut rng = stream_rng(seed, Domain::ModelInit, 2);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        let in_std = 1.0 / (context_len as f64).sqrt();
        let hid_std = 1.0 / (hidden as f64).sqrt();
        Ok(QuantileRegressorModel {
            context_len,
            horizon,
            quantiles: sorted,
            hidden,
            w1: normal(context_len, hidden, in_std),
            b1: Tensor::zeros(1, hidden),
            w2: normal(hidden, out_dim, hid_std),
            b2: Tensor::zeros(1, out_dim),
            tokenizer: TokenizerSpec::default(),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    /// Predicted quantile paths `[step][level]` in raw units, sorted per
    /// step (monotone rearrangement).
    pub fn predict(&self, context: &[f64]) -> Result<Vec<Vec<f64>>> {
        if context.len() != self.context_len {
            return Err(Error::data(format!(
                "context of {} values, model expects {}",
                context.len(),
                self.context_len
            )));
        }
        let (scaled, s) = mean_scale(context, &self.tokenizer);
        let x = Tensor::row_vector(scaled);
        let h = x.matmul(&self.w1).add(&self.b1);
        let h = Tensor::from_vec(
            1,
            self.hidden,
            h.data().iter().map(|&v| gelu(v)).collect(),
        );
        let out = h.matmul(&self.w2).add(&self.b2);
        let nq = self.quantiles.len();
        let mut paths = Vec::with_capacity(self.horizon);
        for step in 0..self.horizon {
            let mut row: Vec<f64> = (0..nq).map(|q| out.data()[step * nq + q] * s).collect();
            row.sort_by(|a, b| a.partial_cmp(b).unwrap());
            paths.push(row);
        }
        Ok(paths)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044_715 * x * x * x)).tanh())
}

/// Training stats of the quantile regressor.
#[derive(Debug, Clone)]
pub struct QuantileRegressorTraining {
    pub model: QuantileRegressorModel,
    pub loss_curve: Vec<f64>,
}

/// Minimize the mean pinball loss over the dataset with AdamW.
pub fn train_quantile_regressor(
    dataset: &WindowedDataset,
    quantiles: &[f64],
    hidden: usize,
    iterations: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<QuantileRegressorTraining> {
    if dataset.is_empty() {
        return Err(Error::data("empty fine-tuning dataset"));
    }
    if iterations == 0 {
        return Err(Error::config("iterations must be >= 1"));
    }
    let mut model = QuantileRegressorModel::init(
        dataset.context_len,
        dataset.horizon,
        quantiles,
        hidden,
        seed,
    )?;
    let nq = model.quantiles.len();
    let out_dim = model.horizon * nq;

    // per-position pinball coefficients: loss = 0.5 |e| + (beta - 0.5) e
    let beta_shift: Vec<f64> = (0..out_dim).map(|i| model.quantiles[i % nq] - 0.5).collect();
    let beta_shift = Tensor::from_vec(1, out_dim, beta_shift);
    let ones_col = Tensor::filled(out_dim, 1, 1.0);

    let params_init: Vec<Tensor> = vec![
        model.w1.clone(),
        model.b1.clone(),
        model.w2.clone(),
        model.b2.clone(),
    ];
    let mut state = OptimizerState::new(&params_init, learning_rate);
    // decay would bias the pinball optimum; the head is tiny anyway
    state.weight_decay = 0.0;
    state.warmup_steps = (iterations as f64 * 0.05) as usize;
    let mut loss_curve = Vec::with_capacity(iterations);

    for iter in 0..iterations {
        let mut rng = stream_rng(seed, Domain::BatchSampling, iter as u64);
        let mut grads: Vec<Tensor> = params_init
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        let mut batch_loss = 0.0;
        for _ in 0..batch_size {
            let pair = &dataset.pairs[rng.gen_range(0..dataset.len())];
            let (scaled_ctx, s) = mean_scale(&pair.context, &model.tokenizer);
            // replicate each scaled target across the quantile block
            let target: Vec<f64> = (0..out_dim)
                .map(|i| pair.target[i / nq] / s)
                .collect();

            let mut tape = Tape::new();
            let w1 = tape.param(model.w1.clone());
            let b1 = tape.param(model.b1.clone());
            let w2 = tape.param(model.w2.clone());
            let b2 = tape.param(model.b2.clone());
            let x = tape.constant(Tensor::row_vector(scaled_ctx));
            let y = tape.constant(Tensor::from_vec(1, out_dim, target));
            let shift = tape.constant(beta_shift.clone());
            let ones = tape.constant(ones_col.clone());

            let a1 = tape.matmul(x, w1);
            let a1 = tape.add(a1, b1);
            let h = tape.gelu(a1);
            let pred = tape.matmul(h, w2);
            let pred = tape.add(pred, b2);
            let neg_pred = tape.scale(pred, -1.0);
            let err = tape.add(y, neg_pred); // e = y - pred
            let abs_err = tape.abs(err);
            let half_abs = tape.scale(abs_err, 0.5);
            let shifted = tape.mul(err, shift);
            let pin = tape.add(half_abs, shifted);
            let total = tape.matmul(pin, ones);
            let loss = tape.scale(total, 1.0 / out_dim as f64);

            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    iteration: iter,
                    message: "non-finite pinball loss".to_string(),
                });
            }
            batch_loss += loss_value;
            tape.backward(loss);
            for (gi, id) in [w1, b1, w2, b2].iter().enumerate() {
                if let Some(g) = tape.grad(*id) {
                    grads[gi].add_assign(&g.scale(1.0 / batch_size as f64));
                }
            }
        }
        loss_curve.push(batch_loss / batch_size as f64);
        let mut params: Vec<&mut Tensor> =
            vec![&mut model.w1, &mut model.b1, &mut model.w2, &mut model.b2];
        adamw_step(&mut params, &grads, &mut state).map_err(|e| match e {
            Error::Training { message, .. } => Error::Training {
                iteration: iter,
                message,
            },
            other => other,
        })?;
    }
    Ok(QuantileRegressorTraining { model, loss_curve })
}

impl Forecaster for QuantileRegressorModel {
    /// Samples come from the piecewise-linear inverse CDF through the
    /// predicted quantile anchors, evaluated at `(i + 0.5) / n_paths`;
    /// deterministic, so all models share one evaluation path.
    fn forecast(
        &self,
        history: &[f64],
        horizon: usize,
        n_paths: usize,
        _seed: u64,
    ) -> Result<ForecastDistribution> {
        if history.len() < self.context_len {
            return Err(Error::data("history shorter than the model context"));
        }
        if horizon != self.horizon {
            return Err(Error::config(format!(
                "model predicts {} steps, asked for {horizon}",
                self.horizon
            )));
        }
        let context = &history[history.len() - self.context_len..];
        let paths = self.predict(context)?;
        let mut samples = Vec::with_capacity(n_paths);
        for i in 0..n_paths {
            let p = (i as f64 + 0.5) / n_paths as f64;
            let path: Vec<f64> = (0..horizon)
                .map(|h| inverse_cdf(&self.quantiles, &paths[h], p))
                .collect();
            samples.push(path);
        }
        ForecastDistribution::new(samples)
    }
}

/// Piecewise-linear inverse CDF through `(levels[i], anchors[i])`, flat
/// beyond the outermost anchors.
fn inverse_cdf(levels: &[f64], anchors: &[f64], p: f64) -> f64 {
    if p <= levels[0] {
        return anchors[0];
    }
    if p >= levels[levels.len() - 1] {
        return anchors[anchors.len() - 1];
    }
    for i in 0..levels.len() - 1 {
        if p <= levels[i + 1] {
            let frac = (p - levels[i]) / (levels[i + 1] - levels[i]);
            return anchors[i] + frac * (anchors[i + 1] - anchors[i]);
        }
    }
    anchors[anchors.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{make_windows, Channel, Season, SeriesId, TimeSeries};

    fn series(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new(
            SeriesId {
                zone: 0,
                season: Season::Winter,
                channel: Channel::Occ,
            },
            chrono::NaiveDate::from_ymd_opt(2024, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            900,
            values,
        )
        .unwrap()
    }

    #[test]
    fn naive_point_path_is_the_lagged_history() {
        // 2-periodic training data -> zero residuals
        let train: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let model = SeasonalNaiveModel::fit(&train, 2, 2, &[0.1, 0.5, 0.9]).unwrap();
        assert!(model.residuals.iter().all(|&r| r == 0.0));
        // history [..., a, b] with lag 2 -> point path [a, b], exactly
        let history = vec![9.0, 7.0, 1.0, 2.0, 3.0, 4.0];
        let d = model.forecast(&history, 2, 4, 0).unwrap();
        for path in &d.samples {
            assert_eq!(path, &[3.0, 4.0]);
        }
    }

    #[test]
    fn naive_lag_indexing_hand_example() {
        let train = vec![0.0, 1.0, 0.5, 1.5, 0.25, 1.25];
        let model = SeasonalNaiveModel::fit(&train, 2, 2, &[0.5]).unwrap();
        let history = vec![7.0, 8.0, 10.0, 20.0]; // last two are [a, b]
        let d = model.forecast(&history, 2, 2, 1).unwrap();
        // point path = [a, b] plus bootstrap noise; check the shared base
        let base = [10.0, 20.0];
        for path in &d.samples {
            for (p, b) in path.iter().zip(base) {
                let shifted = p - b;
                assert!(model.residuals.iter().any(|r| (r - shifted).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn naive_quantile_table_is_monotone() {
        let train: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let model = SeasonalNaiveModel::fit(&train, 5, 3, &[0.1, 0.5, 0.9]).unwrap();
        for row in &model.quantile_table {
            assert!(row[0] <= row[1] && row[1] <= row[2]);
        }
    }

    #[test]
    fn quantile_regressor_fits_constant_data() {
        let s = series(vec![5.0; 40]);
        let ds = make_windows(&s, 8, 2).unwrap();
        let trained =
            train_quantile_regressor(&ds, &[0.1, 0.5, 0.9], 16, 1500, 8, 2e-3, 3).unwrap();
        let paths = trained.model.predict(&vec![5.0; 8]).unwrap();
        for row in &paths {
            for &q in row {
                assert!((q - 5.0).abs() < 1e-2 * 5.0f64.max(1.0), "q = {q}");
            }
        }
    }

    #[test]
    fn pinball_loss_decreases_early() {
        let values: Vec<f64> = (0..200)
            .map(|i| 3.0 + (i as f64 * 0.3).sin() + 0.2 * ((i * 7 % 13) as f64 / 13.0))
            .collect();
        let ds = make_windows(&series(values), 12, 3).unwrap();
        let trained = train_quantile_regressor(&ds, &[0.1, 0.5, 0.9], 16, 120, 8, 2e-3, 5).unwrap();
        let head: f64 = trained.loss_curve[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trained.loss_curve[110..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "smoothed pinball loss should drop: head {head}, tail {tail}"
        );
    }

    #[test]
    fn quantile_outputs_are_monotone_after_rearrangement() {
        let values: Vec<f64> = (0..120).map(|i| (i as f64 * 0.37).sin().abs() * 4.0 + 1.0).collect();
        let ds = make_windows(&series(values), 10, 4).unwrap();
        let trained = train_quantile_regressor(&ds, &[0.1, 0.5, 0.9], 12, 60, 4, 2e-3, 7).unwrap();
        let paths = trained.model.predict(&ds.pairs[0].context).unwrap();
        for row in &paths {
            assert!(row[0] <= row[1] && row[1] <= row[2]);
        }
    }

    #[test]
    fn inverse_cdf_interpolates_and_clamps() {
        let levels = [0.1, 0.5, 0.9];
        let anchors = [1.0, 2.0, 4.0];
        assert_eq!(inverse_cdf(&levels, &anchors, 0.05), 1.0);
        assert_eq!(inverse_cdf(&levels, &anchors, 0.95), 4.0);
        assert!((inverse_cdf(&levels, &anchors, 0.3) - 1.5).abs() < 1e-12);
        assert!((inverse_cdf(&levels, &anchors, 0.7) - 3.0).abs() < 1e-12);
    }
}
