//! Time-series containers, preprocessing, and windowing.
//!
//! The preprocessing chain mirrors a building-telemetry intake: fill gaps
//! by linear interpolation, resample onto a common 15-minute grid, convert
//! per-interval energy to power, drop weekends/holidays, then slice the
//! result into (context, target) training pairs.

use crate::error::{Error, Result};
use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Autumn];

    pub fn index(self) -> usize {
        match self {
            Season::Winter => 0,
            Season::Spring => 1,
            Season::Summer => 2,
            Season::Autumn => 3,
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Autumn => "autumn",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Season {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "winter" => Ok(Season::Winter),
            "spring" => Ok(Season::Spring),
            "summer" => Ok(Season::Summer),
            "autumn" | "fall" => Ok(Season::Autumn),
            other => Err(Error::config(format!("unknown season `{other}`"))),
        }
    }
}

/// Monitored signal kind. Units: persons, ppm, W, W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Occ,
    CO2,
    Light,
    Hvac,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Occ, Channel::CO2, Channel::Light, Channel::Hvac];

    pub fn index(self) -> usize {
        match self {
            Channel::Occ => 0,
            Channel::CO2 => 1,
            Channel::Light => 2,
            Channel::Hvac => 3,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Channel::Occ => "Occ",
            Channel::CO2 => "CO2",
            Channel::Light => "Light",
            Channel::Hvac => "HVAC",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "occ" => Ok(Channel::Occ),
            "co2" => Ok(Channel::CO2),
            "light" => Ok(Channel::Light),
            "hvac" => Ok(Channel::Hvac),
            other => Err(Error::config(format!("unknown channel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesId {
    pub zone: u32,
    pub season: Season,
    pub channel: Channel,
}

impl fmt::Display for SeriesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "zone{}_{}_{}", self.zone, self.season, self.channel)
    }
}

/// A uniformly sampled univariate signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: SeriesId,
    pub start_time: NaiveDateTime,
    /// Sampling step in seconds (15 minutes by default).
    pub step_seconds: i64,
    pub values: Vec<f64>,
    /// `true` marks a missing sample. `None` means fully observed.
    pub missing_mask: Option<Vec<bool>>,
}

pub const DEFAULT_STEP_SECONDS: i64 = 15 * 60;
pub const STEPS_PER_DAY: usize = 96;

impl TimeSeries {
    pub fn new(
        id: SeriesId,
        start_time: NaiveDateTime,
        step_seconds: i64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::data("series must contain at least one value"));
        }
        if step_seconds <= 0 {
            return Err(Error::data("step must be positive"));
        }
        Ok(TimeSeries {
            id,
            start_time,
            step_seconds,
            values,
            missing_mask: None,
        })
    }

    pub fn with_missing(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(Error::data("missing mask length must match values"));
        }
        self.missing_mask = if mask.iter().any(|&m| m) { Some(mask) } else { None };
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start_time + Duration::seconds(self.step_seconds * index as i64)
    }

    pub fn has_missing(&self) -> bool {
        self.missing_mask.as_ref().map_or(false, |m| m.iter().any(|&x| x))
    }

    /// New series with the same identity and timing but different values.
    pub fn with_values(&self, values: Vec<f64>) -> TimeSeries {
        TimeSeries {
            id: self.id,
            start_time: self.start_time,
            step_seconds: self.step_seconds,
            values,
            missing_mask: None,
        }
    }
}

/// One (context, target) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    /// First target sample sits at `values[origin_index]`.
    pub origin_index: usize,
}

/// The fine-tuning set: every stride-1 (context, target) pair of a series.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub pairs: Vec<WindowPair>,
    pub context_len: usize,
    pub horizon: usize,
    pub source_id: SeriesId,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Which weekdays and dates are excluded by workday filtering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkCalendar {
    /// Weekday indices with Monday = 0 ... Sunday = 6.
    pub weekend_days: BTreeSet<u8>,
    pub holidays: BTreeSet<chrono::NaiveDate>,
}

impl Default for WorkCalendar {
    fn default() -> Self {
        WorkCalendar {
            weekend_days: BTreeSet::from([5, 6]),
            holidays: BTreeSet::new(),
        }
    }
}

impl WorkCalendar {
    pub fn validate(&self) -> Result<()> {
        if self.weekend_days.iter().any(|&d| d > 6) {
            return Err(Error::config("weekend day index out of 0..=6"));
        }
        Ok(())
    }

    pub fn is_workday(&self, date: chrono::NaiveDate) -> bool {
        let dow = date.weekday().num_days_from_monday() as u8;
        !self.weekend_days.contains(&dow) && !self.holidays.contains(&date)
    }
}

/// Fill gaps by linear interpolation between the nearest valid neighbors;
/// leading/trailing gaps take the nearest valid value.
pub fn interpolate_missing(series: &TimeSeries) -> Result<TimeSeries> {
    let Some(mask) = series.missing_mask.as_ref() else {
        return Ok(series.clone());
    };
    let valid: Vec<usize> = (0..series.len()).filter(|&i| !mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::data(format!(
            "series {} is entirely missing; nothing to interpolate",
            series.id
        )));
    }
    let mut values = series.values.clone();
    for i in 0..values.len() {
        if !mask[i] {
            continue;
        }
        let next = valid.partition_point(|&v| v < i);
        let right = valid.get(next).copied();
        let left = if next > 0 { Some(valid[next - 1]) } else { None };
        values[i] = match (left, right) {
            (Some(l), Some(r)) => {
                let frac = (i - l) as f64 / (r - l) as f64;
                series.values[l] + (series.values[r] - series.values[l]) * frac
            }
            (Some(l), None) => series.values[l],
            (None, Some(r)) => series.values[r],
            (None, None) => unreachable!("valid is nonempty"),
        };
    }
    Ok(series.with_values(values))
}

/// Resample onto the grid of `target_step_seconds` anchored at the first
/// grid point at or after `start_time` (grid = multiples of the step from
/// midnight). Values come from linear interpolation between input samples;
/// grid points outside the observed span are dropped.
pub fn resample_align(series: &TimeSeries, target_step_seconds: i64) -> Result<TimeSeries> {
    if target_step_seconds <= 0 {
        return Err(Error::data("target step must be positive"));
    }
    if series.has_missing() {
        return Err(Error::data("interpolate missing values before resampling"));
    }
    let start = series.start_time;
    let day_offset = i64::from(start.time().num_seconds_from_midnight());
    let rem = day_offset % target_step_seconds;
    let first_offset = if rem == 0 { 0 } else { target_step_seconds - rem };
    let span_seconds = series.step_seconds * (series.len() as i64 - 1);
    if first_offset > span_seconds {
        return Err(Error::data(format!(
            "no {target_step_seconds}s grid point inside the series span"
        )));
    }
    let n_out = (span_seconds - first_offset) / target_step_seconds + 1;
    let mut values = Vec::with_capacity(n_out as usize);
    for k in 0..n_out {
        let t = (first_offset + k * target_step_seconds) as f64 / series.step_seconds as f64;
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(series.len() - 1);
        let frac = t - lo as f64;
        values.push(series.values[lo] + (series.values[hi] - series.values[lo]) * frac);
    }
    Ok(TimeSeries {
        id: series.id,
        start_time: start + Duration::seconds(first_offset),
        step_seconds: target_step_seconds,
        values,
        missing_mask: None,
    })
}

/// Convert per-interval energy (kWh) to mean power (W) assuming power is
/// constant across each interval: `P = E * 3.6e6 / step_seconds`.
pub fn energy_to_power(series: &TimeSeries) -> Result<TimeSeries> {
    if let Some(idx) = series.values.iter().position(|&v| v < 0.0) {
        return Err(Error::data(format!(
            "negative energy increment {} at sample {idx}",
            series.values[idx]
        )));
    }
    let factor = 3.6e6 / series.step_seconds as f64;
    Ok(series.with_values(series.values.iter().map(|e| e * factor).collect()))
}

/// Drop every sample falling on a weekend or holiday and concatenate the
/// remaining days into a gapless index space. After this step the series
/// "time" axis counts workday steps, not wall-clock time.
pub fn filter_workdays(series: &TimeSeries, cal: &WorkCalendar) -> Result<TimeSeries> {
    cal.validate()?;
    let mut values = Vec::new();
    let mut first_kept: Option<usize> = None;
    for i in 0..series.len() {
        let date = series.timestamp(i).date();
        if cal.is_workday(date) {
            if first_kept.is_none() {
                first_kept = Some(i);
            }
            values.push(series.values[i]);
        }
    }
    let Some(first) = first_kept else {
        return Err(Error::data(format!(
            "series {} has no workday samples after filtering",
            series.id
        )));
    };
    Ok(TimeSeries {
        id: series.id,
        start_time: series.timestamp(first),
        step_seconds: series.step_seconds,
        values,
        missing_mask: None,
    })
}

/// All stride-1 (context, target) pairs: `T - H - C + 1` of them.
pub fn make_windows(series: &TimeSeries, context_len: usize, horizon: usize) -> Result<WindowedDataset> {
    let t = series.len();
    if context_len == 0 || horizon == 0 {
        return Err(Error::config("context and horizon must be positive"));
    }
    if t < context_len + horizon {
        return Err(Error::data(format!(
            "series length {t} below required minimum {} (C + H)",
            context_len + horizon
        )));
    }
    let mut pairs = Vec::with_capacity(t - horizon - context_len + 1);
    for origin in context_len..=(t - horizon) {
        pairs.push(WindowPair {
            context: series.values[origin - context_len..origin].to_vec(),
            target: series.values[origin..origin + horizon].to_vec(),
            origin_index: origin,
        });
    }
    Ok(WindowedDataset {
        pairs,
        context_len,
        horizon,
        source_id: series.id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn dt(y: i32, m: u32, d: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn series(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new(test_id(), dt(2024, 1, 1), DEFAULT_STEP_SECONDS, values).unwrap()
    }

    fn test_id() -> SeriesId {
        SeriesId {
            zone: 0,
            season: Season::Winter,
            channel: Channel::Occ,
        }
    }

    #[test]
    fn interpolates_interior_gap() {
        let s = series(vec![1.0, 0.0, 3.0])
            .with_missing(vec![false, true, false])
            .unwrap();
        let out = interpolate_missing(&s).unwrap();
        assert_eq!(out.values, vec![1.0, 2.0, 3.0]);
        assert!(!out.has_missing());
    }

    #[test]
    fn no_gaps_is_identity() {
        let s = series(vec![1.0, 2.0, 3.0]);
        let out = interpolate_missing(&s).unwrap();
        assert_eq!(out.values, s.values);
    }

    #[test]
    fn edge_gaps_take_nearest_value() {
        let s = series(vec![0.0, 4.0, 0.0])
            .with_missing(vec![true, false, true])
            .unwrap();
        let out = interpolate_missing(&s).unwrap();
        assert_eq!(out.values, vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn all_missing_rejected() {
        let s = series(vec![0.0, 0.0]).with_missing(vec![true, true]).unwrap();
        assert!(interpolate_missing(&s).is_err());
    }

    #[test]
    fn interpolation_is_idempotent() {
        let s = series(vec![1.0, 0.0, 0.0, 7.0])
            .with_missing(vec![false, true, true, false])
            .unwrap();
        let once = interpolate_missing(&s).unwrap();
        let twice = interpolate_missing(&once).unwrap();
        assert_eq!(once.values, twice.values);
    }

    #[test]
    fn resample_identity_when_aligned() {
        let s = series(vec![1.0, 2.0, 3.0]);
        let out = resample_align(&s, DEFAULT_STEP_SECONDS).unwrap();
        assert_eq!(out.values, s.values);
        assert_eq!(out.start_time, s.start_time);
    }

    #[test]
    fn resample_interpolates_between_samples() {
        // values at 0 and 30 min; 15-min grid gives the midpoint
        let s = TimeSeries::new(test_id(), dt(2024, 1, 1), 30 * 60, vec![0.0, 10.0]).unwrap();
        let out = resample_align(&s, 15 * 60).unwrap();
        assert_eq!(out.values, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn resample_subsamples_finer_grid() {
        let s = TimeSeries::new(
            test_id(),
            dt(2024, 1, 1),
            5 * 60,
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let out = resample_align(&s, 15 * 60).unwrap();
        assert_eq!(out.values, vec![0.0, 3.0, 6.0]);
    }

    #[test]
    fn resample_rejects_empty_grid() {
        let s = TimeSeries::new(
            test_id(),
            dt(2024, 1, 1).with_second(30).unwrap(),
            10,
            vec![1.0, 2.0],
        )
        .unwrap();
        // series spans 10s starting at :30; the next minute boundary is outside
        assert!(resample_align(&s, 60).is_err());
    }

    #[test]
    fn energy_conversion_unit_arithmetic() {
        let s = series(vec![0.25, 0.0]);
        let out = energy_to_power(&s).unwrap();
        assert_eq!(out.values, vec![1000.0, 0.0]);

        let hourly = TimeSeries::new(test_id(), dt(2024, 1, 1), 3600, vec![1.2]).unwrap();
        assert_eq!(energy_to_power(&hourly).unwrap().values, vec![1200.0]);
    }

    #[test]
    fn energy_conversion_reports_negative_index() {
        let s = series(vec![0.25, -0.1, 0.3]);
        let err = energy_to_power(&s).unwrap_err().to_string();
        assert!(err.contains("sample 1"), "{err}");
    }

    #[test]
    fn energy_reintegrates_to_input() {
        let s = series(vec![0.25, 0.5, 0.125, 0.0, 3.75]);
        let p = energy_to_power(&s).unwrap();
        for (e, w) in s.values.iter().zip(&p.values) {
            let back = w * s.step_seconds as f64 / 3.6e6;
            assert!((back - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn workday_filter_drops_weekends() {
        // 2024-01-01 is a Monday; 7 days cover one full week
        let s = series(vec![1.0; 7 * STEPS_PER_DAY]);
        let out = filter_workdays(&s, &WorkCalendar::default()).unwrap();
        assert_eq!(out.len(), 5 * STEPS_PER_DAY);
    }

    #[test]
    fn workday_filter_identity_without_weekends() {
        let s = series(vec![2.0; 4 * STEPS_PER_DAY]); // Mon..Thu
        let out = filter_workdays(&s, &WorkCalendar::default()).unwrap();
        assert_eq!(out.values, s.values);
    }

    #[test]
    fn workday_filter_rejects_weekend_only_span() {
        // 2024-01-06 is a Saturday
        let s = TimeSeries::new(
            test_id(),
            dt(2024, 1, 6),
            DEFAULT_STEP_SECONDS,
            vec![1.0; 2 * STEPS_PER_DAY],
        )
        .unwrap();
        assert!(filter_workdays(&s, &WorkCalendar::default()).is_err());
    }

    #[test]
    fn workday_filter_respects_holidays() {
        let s = series(vec![1.0; 5 * STEPS_PER_DAY]); // Mon..Fri
        let mut cal = WorkCalendar::default();
        cal.holidays.insert(NaiveDate::from_ymd_opt(2024, 1, 3).unwrap());
        let out = filter_workdays(&s, &cal).unwrap();
        assert_eq!(out.len(), 4 * STEPS_PER_DAY);
    }

    #[test]
    fn window_counts() {
        let s = series((0..10).map(|v| v as f64).collect());
        let ds = make_windows(&s, 3, 2).unwrap();
        assert_eq!(ds.len(), 6);

        let s = series((0..5).map(|v| v as f64).collect());
        let ds = make_windows(&s, 3, 2).unwrap();
        assert_eq!(ds.len(), 1);

        let s = series((0..4).map(|v| v as f64).collect());
        assert!(make_windows(&s, 3, 2).is_err());
    }

    #[test]
    fn windows_reconstruct_the_series_exactly() {
        let s = series((0..40).map(|v| (v as f64).sin()).collect());
        let ds = make_windows(&s, 5, 3).unwrap();
        for pair in &ds.pairs {
            let t = pair.origin_index;
            let mut joined = pair.context.clone();
            joined.extend_from_slice(&pair.target);
            assert_eq!(&joined[..], &s.values[t - 5..t + 3]);
        }
    }
}
