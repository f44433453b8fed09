//! CSV ingestion and emission for time series.
//!
//! Wire schema: header `timestamp,value`, ISO-8601 timestamps on a uniform
//! grid, empty value cell = missing sample. Series identity is not part of
//! the CSV; it arrives via CLI flags or the JSON manifest.

use crate::error::{Error, Result};
use crate::series::{SeriesId, TimeSeries};
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const TIMESTAMP_FORMATS: [&str; 2] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"];

fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    for fmt in TIMESTAMP_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    Err(Error::data(format!("unparseable timestamp `{s}`")))
}

/// Read one `timestamp,value` CSV into a series with the given identity.
/// Timestamps must be strictly increasing on a uniform grid.
pub fn read_csv<R: Read>(reader: R, id: SeriesId) -> Result<TimeSeries> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = csv_reader.headers()?;
        if headers.len() < 2 || &headers[0] != "timestamp" || &headers[1] != "value" {
            return Err(Error::data(format!(
                "expected header `timestamp,value`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    for record in csv_reader.records() {
        let record = record?;
        let ts = parse_timestamp(record.get(0).unwrap_or(""))?;
        let cell = record.get(1).unwrap_or("").trim();
        timestamps.push(ts);
        if cell.is_empty() {
            values.push(0.0);
            mask.push(true);
        } else {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::data(format!("bad value `{cell}` at {ts}")))?;
            values.push(v);
            mask.push(false);
        }
    }
    if values.is_empty() {
        return Err(Error::data("CSV contains no data rows"));
    }
    let step_seconds = if timestamps.len() >= 2 {
        let step = (timestamps[1] - timestamps[0]).num_seconds();
        if step <= 0 {
            return Err(Error::data("timestamps must be strictly increasing"));
        }
        for (i, pair) in timestamps.windows(2).enumerate() {
            if (pair[1] - pair[0]).num_seconds() != step {
                return Err(Error::data(format!(
                    "non-uniform sampling at row {}: expected {step}s step",
                    i + 2
                )));
            }
        }
        step
    } else {
        crate::series::DEFAULT_STEP_SECONDS
    };
    TimeSeries::new(id, timestamps[0], step_seconds, values)?.with_missing(mask)
}

pub fn read_csv_file(path: &Path, id: SeriesId) -> Result<TimeSeries> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), id)
}

/// Write a series in the ingestion schema. Missing samples become empty cells.
pub fn write_csv<W: Write>(writer: W, series: &TimeSeries) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["timestamp", "value"])?;
    for i in 0..series.len() {
        let ts = series.timestamp(i).format("%Y-%m-%dT%H:%M:%S").to_string();
        let missing = series
            .missing_mask
            .as_ref()
            .map_or(false, |m| m[i]);
        if missing {
            out.write_record([ts.as_str(), ""])?;
        } else {
            out.write_record([ts.as_str(), &format!("{}", series.values[i])])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, series: &TimeSeries) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(file), series)
}

/// One entry of the JSON ingestion manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub zone: u32,
    pub season: crate::series::Season,
    pub channel: crate::series::Channel,
    /// `power_w` (default) loads values as-is; `energy_kwh` converts
    /// per-interval kWh to W on ingestion.
    #[serde(default)]
    pub unit: ManifestUnit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestUnit {
    #[default]
    PowerW,
    EnergyKwh,
}

/// Load every series named by a JSON manifest (an array of entries with
/// paths relative to the manifest file).
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<TimeSeries>> {
    let text = std::fs::read_to_string(manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let id = SeriesId {
            zone: entry.zone,
            season: entry.season,
            channel: entry.channel,
        };
        let series = read_csv_file(&base.join(&entry.path), id)?;
        let series = crate::series::interpolate_missing(&series)?;
        let series = match entry.unit {
            ManifestUnit::PowerW => series,
            ManifestUnit::EnergyKwh => crate::series::energy_to_power(&series)?,
        };
        out.push(series);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{Channel, Season};

    fn id() -> SeriesId {
        SeriesId {
            zone: 1,
            season: Season::Summer,
            channel: Channel::Light,
        }
    }

    #[test]
    fn round_trip_with_missing_cells() {
        let csv = "timestamp,value\n\
                   2024-01-01T00:00:00,1.5\n\
                   2024-01-01T00:15:00,\n\
                   2024-01-01T00:30:00,3.25\n";
        let series = read_csv(csv.as_bytes(), id()).unwrap();
        assert_eq!(series.len(), 3);
        assert!(series.has_missing());
        assert_eq!(series.step_seconds, 900);

        let mut buf = Vec::new();
        write_csv(&mut buf, &series).unwrap();
        let again = read_csv(buf.as_slice(), id()).unwrap();
        assert_eq!(again.values[0], 1.5);
        assert_eq!(again.values[2], 3.25);
        assert_eq!(again.missing_mask, series.missing_mask);
    }

    #[test]
    fn rejects_bad_header() {
        let csv = "time,val\n2024-01-01T00:00:00,1\n";
        assert!(read_csv(csv.as_bytes(), id()).is_err());
    }

    #[test]
    fn rejects_non_uniform_grid() {
        let csv = "timestamp,value\n\
                   2024-01-01T00:00:00,1\n\
                   2024-01-01T00:15:00,2\n\
                   2024-01-01T00:45:00,3\n";
        assert!(read_csv(csv.as_bytes(), id()).is_err());
    }
}
