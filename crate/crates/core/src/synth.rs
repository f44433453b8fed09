//! Seeded generator of building-like signals, standing in for real
//! telemetry, plus a Monte-Carlo oracle for true conditional quantiles.
//!
//! Each (zone, season, channel) series is a deterministic diurnal profile
//! times zone/season/weekday factors, plus clamped Gaussian noise. Zones
//! fall into two profile families: office floors with a morning-to-evening
//! plateau and a lunch dip, and relaxation floors with midday visit bumps.
//! The last two zones of a building (when it has more than two) are the
//! relaxation ones. Every random choice comes from a counter-based stream
//! keyed by the config seed and the series identity, so corpora are
//! identical no matter what order series are generated in.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain};
use crate::series::{Channel, Season, SeriesId, TimeSeries};
use crate::tensor::quantile_sorted;
use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_zones: u32,
    pub seasons: Vec<Season>,
    pub channels: Vec<Channel>,
    /// Calendar days per series, starting on a Monday.
    pub days: usize,
    pub steps_per_day: usize,
    /// Noise standard deviation relative to the series' driven amplitude.
    pub noise_std: f64,
    /// 0 = identical seasons, 1 = full seasonal spread.
    pub seasonal_amplitude: f64,
    /// 0 = identical workdays, ~1 = strong Monday/Friday dips.
    pub weekly_modulation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_zones: 8,
            seasons: Season::ALL.to_vec(),
            channels: Channel::ALL.to_vec(),
            days: 28,
            steps_per_day: 96,
            noise_std: 0.05,
            seasonal_amplitude: 1.0,
            weekly_modulation: 0.6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_zones == 0 || self.seasons.is_empty() || self.channels.is_empty() {
            return Err(Error::config("synth config needs zones, seasons and channels"));
        }
        if self.days == 0 {
            return Err(Error::config("days must be >= 1"));
        }
        if self.steps_per_day == 0 || 86_400 % self.steps_per_day != 0 {
            return Err(Error::config("steps_per_day must divide 86400 seconds"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be >= 0"));
        }
        Ok(())
    }

    pub fn step_seconds(&self) -> i64 {
        (86_400 / self.steps_per_day) as i64
    }

    /// 2024-01-01, a Monday. Keeps weekday arithmetic trivial.
    pub fn start_time(&self) -> chrono::NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ZoneKind {
    Office,
    Relaxation,
}

/// Per-zone shape parameters, drawn once from the zone's stream.
#[derive(Debug, Clone)]
struct ZoneProfile {
    kind: ZoneKind,
    gain: f64,
    start_shift_h: f64,
    end_shift_h: f64,
    lunch_depth: f64,
    lunch_shift_h: f64,
    afternoon_tilt: f64,
    bump_center_h: f64,
    bump_width_h: f64,
}

fn zone_kind(zone: u32, n_zones: u32) -> ZoneKind {
    let relax_from = n_zones.saturating_sub(2).max(2);
    if zone >= relax_from {
        ZoneKind::Relaxation
    } else {
        ZoneKind::Office
    }
}

fn zone_profile(cfg: &SynthConfig, zone: u32) -> ZoneProfile {
    let mut rng = stream_rng(cfg.seed, Domain::SynthSeries, u64::from(zone) * 64 + 60);
    let kind = zone_kind(zone, cfg.n_zones);
    ZoneProfile {
        kind,
        gain: rng.gen_range(0.7..1.4),
        start_shift_h: rng.gen_range(-0.9..0.9),
        end_shift_h: rng.gen_range(-1.1..1.1),
        lunch_depth: rng.gen_range(0.15..0.55),
        lunch_shift_h: rng.gen_range(-0.5..0.5),
        afternoon_tilt: rng.gen_range(-0.12..0.12),
        bump_center_h: rng.gen_range(11.6..13.8),
        bump_width_h: rng.gen_range(0.9..2.0),
    }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn gauss_bump(u: f64, center: f64, width: f64) -> f64 {
    let d = (u - center) / width;
    (-0.5 * d * d).exp()
}

/// Unitless diurnal shape, ~[0, 1.1], zero outside working hours.
fn diurnal_shape(zp: &ZoneProfile, hour: f64) -> f64 {
    match zp.kind {
        ZoneKind::Office => {
            let start = 7.75 + zp.start_shift_h;
            let end = 17.75 + zp.end_shift_h;
            let rise = smoothstep((hour - start) / 1.6);
            let fall = 1.0 - smoothstep((hour - end) / 2.0);
            let dip = 1.0 - zp.lunch_depth * gauss_bump(hour, 12.6 + zp.lunch_shift_h, 0.7);
            let tilt = 1.0 + zp.afternoon_tilt * (hour - 12.5) / 6.0;
            (rise * fall * dip * tilt).max(0.0)
        }
        ZoneKind::Relaxation => {
            let envelope = smoothstep((hour - 7.5) / 1.2) * (1.0 - smoothstep((hour - 19.0) / 1.2));
            let main = gauss_bump(hour, zp.bump_center_h, zp.bump_width_h);
            let morning = 0.3 * gauss_bump(hour, 9.6 + zp.start_shift_h * 0.5, 0.8);
            let afternoon = 0.45 * gauss_bump(hour, 15.7 + zp.end_shift_h * 0.5, 1.0);
            (envelope * (0.08 + main + morning + afternoon)).max(0.0)
        }
    }
}

/// Mon..Fri pattern scaled by `weekly_modulation`; weekends collapse to a
/// small residual presence.
fn weekday_factor(cfg: &SynthConfig, day_of_week: usize) -> f64 {
    const PATTERN: [f64; 5] = [-0.50, -0.075, 0.25, 0.10, -0.30];
    if day_of_week >= 5 {
        0.04
    } else {
        (1.0 + cfg.weekly_modulation * PATTERN[day_of_week]).max(0.0)
    }
}

fn seasonal_gain(cfg: &SynthConfig, season: Season, channel: Channel) -> f64 {
    let table: [f64; 4] = match channel {
        Channel::Occ => [0.95, 1.0, 0.88, 1.02],
        Channel::CO2 => [1.0, 0.97, 0.92, 1.0],
        Channel::Light => [1.18, 1.0, 0.94, 1.08],
        Channel::Hvac => [1.45, 0.55, 1.55, 0.6],
    };
    1.0 + cfg.seasonal_amplitude * (table[season.index()] - 1.0)
}

fn channel_base_and_amp(channel: Channel) -> (f64, f64) {
    match channel {
        Channel::Occ => (0.0, 28.0),
        Channel::CO2 => (420.0, 380.0),
        Channel::Light => (40.0, 3800.0),
        Channel::Hvac => (150.0, 4200.0),
    }
}

/// Deterministic (noise-free) signal value at step `t` of a series.
fn profile_value(cfg: &SynthConfig, zp: &ZoneProfile, season: Season, channel: Channel, t: usize) -> f64 {
    let day = t / cfg.steps_per_day;
    let step = t % cfg.steps_per_day;
    let hour = step as f64 * 24.0 / cfg.steps_per_day as f64;
    let dow = day % 7;
    let (base, amp) = channel_base_and_amp(channel);
    let driven = amp * zp.gain * seasonal_gain(cfg, season, channel);
    base + driven * diurnal_shape(zp, hour) * weekday_factor(cfg, dow)
}

/// Noise standard deviation of one series, in raw units.
fn noise_sigma_for(cfg: &SynthConfig, zp: &ZoneProfile, season: Season, channel: Channel) -> f64 {
    let (_, amp) = channel_base_and_amp(channel);
    cfg.noise_std * amp * zp.gain * seasonal_gain(cfg, season, channel)
}

fn noise_stream(zone: u32, season: Season, channel: Channel) -> u64 {
    u64::from(zone) * 64 + (season.index() as u64) * 16 + (channel.index() as u64) * 4
}

/// One series per (zone, season, channel), in that lexicographic order.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<TimeSeries>> {
    cfg.validate()?;
    let total = cfg.days * cfg.steps_per_day;
    let mut out = Vec::new();
    for zone in 0..cfg.n_zones {
        let zp = zone_profile(cfg, zone);
        for &season in &cfg.seasons {
            for &channel in &cfg.channels {
                let sigma = noise_sigma_for(cfg, &zp, season, channel);
                let mut rng =
                    stream_rng(cfg.seed, Domain::SynthSeries, noise_stream(zone, season, channel));
                let mut values = Vec::with_capacity(total);
                for t in 0..total {
                    let mean = profile_value(cfg, &zp, season, channel, t);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    values.push((mean + sigma * z).max(0.0));
                }
                out.push(TimeSeries::new(
                    SeriesId { zone, season, channel },
                    cfg.start_time(),
                    cfg.step_seconds(),
                    values,
                )?);
            }
        }
    }
    Ok(out)
}

/// Handle to the generative process for conditional resampling.
#[derive(Debug, Clone)]
pub struct SynthOracle {
    pub config: SynthConfig,
    pub oracle_seed: u64,
    pub n_resamples: usize,
}

impl SynthOracle {
    pub fn new(config: SynthConfig) -> Self {
        SynthOracle {
            config,
            oracle_seed: 0x07ac1e,
            n_resamples: 10_000,
        }
    }

    /// Deterministic profile at step `t`.
    pub fn profile(&self, zone: u32, season: Season, channel: Channel, t: usize) -> f64 {
        let zp = zone_profile(&self.config, zone);
        profile_value(&self.config, &zp, season, channel, t)
    }

    /// Raw-unit noise sigma of a series.
    pub fn noise_sigma(&self, zone: u32, season: Season, channel: Channel) -> f64 {
        let zp = zone_profile(&self.config, zone);
        noise_sigma_for(&self.config, &zp, season, channel)
    }

    /// Empirical per-step quantiles of the true conditional distribution
    /// over `t+1 ..= t+H`, from `n_resamples` fresh noise draws around the
    /// fixed deterministic profile.
    pub fn true_quantiles(
        &self,
        zone: u32,
        season: Season,
        channel: Channel,
        t: usize,
        horizon: usize,
        betas: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::config("quantile levels must lie in (0, 1)"));
        }
        let total = self.config.days * self.config.steps_per_day;
        if t + horizon >= total {
            return Err(Error::config(format!(
                "query t + H = {} exceeds series span {total}",
                t + horizon
            )));
        }
        let zp = zone_profile(&self.config, zone);
        let sigma = noise_sigma_for(&self.config, &zp, season, channel);
        let mut rng = stream_rng(
            self.oracle_seed ^ self.config.seed,
            Domain::SynthOracle,
            noise_stream(zone, season, channel),
        );
        // quantile paths indexed [step][beta]
        let mut result = vec![vec![0.0; betas.len()]; horizon];
        let mut samples = vec![0.0f64; self.n_resamples];
        for h in 0..horizon {
            let mean = profile_value(&self.config, &zp, season, channel, t + 1 + h);
            for s in samples.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *s = (mean + sigma * z).max(0.0);
            }
            samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (bi, &beta) in betas.iter().enumerate() {
                result[h][bi] = quantile_sorted(&samples, beta);
            }
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_zones: 2,
            seasons: vec![Season::Winter],
            channels: vec![Channel::Occ],
            days: 14,
            noise_std: 0.05,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_config_bit_identical() {
        let a = generate_corpus(&small_cfg()).unwrap();
        let b = generate_corpus(&small_cfg()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn corpus_size_is_zones_x_seasons_x_channels() {
        let cfg = SynthConfig {
            n_zones: 8,
            seasons: Season::ALL.to_vec(),
            channels: vec![Channel::Occ],
            days: 2,
            ..SynthConfig::default()
        };
        assert_eq!(generate_corpus(&cfg).unwrap().len(), 32);
    }

    #[test]
    fn noiseless_days_repeat_within_weekday_class() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            days: 21,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let spd = cfg.steps_per_day;
        for series in &corpus {
            for day in 0..14 {
                for k in 0..spd {
                    let a = series.values[day * spd + k];
                    let b = series.values[(day + 7) * spd + k];
                    assert_eq!(a, b, "weekday class must repeat exactly");
                }
            }
        }
    }

    #[test]
    fn occupancy_is_nonnegative() {
        let cfg = SynthConfig {
            noise_std: 0.5,
            ..small_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for series in &corpus {
            assert!(series.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn noiseless_quantiles_collapse_to_profile() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small_cfg()
        };
        let oracle = SynthOracle::new(cfg);
        let qs = oracle
            .true_quantiles(0, Season::Winter, Channel::Occ, 96 * 2, 4, &[0.1, 0.5, 0.9])
            .unwrap();
        for (h, row) in qs.iter().enumerate() {
            let p = oracle.profile(0, Season::Winter, Channel::Occ, 96 * 2 + 1 + h);
            for &q in row {
                assert!((q - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_quantile_gap_matches_closed_form() {
        // midday Wednesday, profile far from the clamp at zero
        let cfg = SynthConfig {
            noise_std: 0.08,
            days: 7,
            ..small_cfg()
        };
        let oracle = SynthOracle {
            n_resamples: 20_000,
            ..SynthOracle::new(cfg)
        };
        let t = 2 * 96 + 44; // Wednesday 11:00
        let qs = oracle
            .true_quantiles(0, Season::Winter, Channel::Occ, t, 1, &[0.1, 0.5, 0.9])
            .unwrap();
        let gap = qs[0][2] - qs[0][0];
        let sigma = oracle.noise_sigma(0, Season::Winter, Channel::Occ);
        let expected = 2.0 * 1.2815515655446004 * sigma;
        assert!(
            (gap - expected).abs() < 0.06 * sigma,
            "gap {gap} vs closed form {expected}"
        );
        // median tracks the profile under symmetric noise
        let median = qs[0][1];
        let profile = oracle.profile(0, Season::Winter, Channel::Occ, t + 1);
        assert!((median - profile).abs() < 0.05 * sigma, "median {median} vs {profile}");
    }
}
