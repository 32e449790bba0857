//! Sensor CSV ingestion, 30 s grid regularization and chronological splits.
//!
//! Raw streams arrive as timestamped rows of CO₂, indoor temperature,
//! relative humidity and a binary occupancy label. Loading sorts rows,
//! rejects duplicate timestamps and clamps out-of-range readings (counted
//! per channel rather than dropped, so the grid stays contiguous).
//! Regularization resamples onto an exact 30 s grid, interpolating short
//! gaps and splitting the series where a gap exceeds `max_gap`.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed sampling period of the regular grid, in seconds.
pub const SAMPLE_PERIOD: i64 = 30;

/// Physical admissible ranges used for clamping, per channel.
pub const CO2_RANGE: (f64, f64) = (300.0, 10_000.0);
pub const T_RANGE: (f64, f64) = (-10.0, 50.0);
pub const RH_RANGE: (f64, f64) = (0.0, 100.0);

/// One timestamped multi-channel reading with its occupancy label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    /// CO₂ concentration, ppm.
    pub co2: f64,
    /// Indoor temperature, °C.
    pub t_indoor: f64,
    /// Relative humidity, %.
    pub rh: f64,
    /// Occupancy label, 0 (vacant) or 1 (occupied).
    pub occupied: u8,
}

/// An ordered sensor stream from one apartment or scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub records: Vec<SensorRecord>,
    /// Sampling period in seconds; fixed to [`SAMPLE_PERIOD`] after regularization.
    pub sample_period: i64,
    pub source_id: String,
}

impl SensorSeries {
    pub fn new(records: Vec<SensorRecord>, source_id: impl Into<String>) -> Self {
        Self {
            records,
            sample_period: SAMPLE_PERIOD,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<i64> {
        self.records.first().map(|r| r.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.records.last().map(|r| r.timestamp)
    }
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub co2: String,
    pub t_indoor: String,
    pub rh: String,
    pub occupied: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            co2: "co2_ppm".into(),
            t_indoor: "t_indoor_c".into(),
            rh: "rh_pct".into(),
            occupied: "occupied".into(),
        }
    }
}

/// Per-channel counts of clamped out-of-range readings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadDiagnostics {
    pub clamped_co2: usize,
    pub clamped_t_indoor: usize,
    pub clamped_rh: usize,
    pub rows: usize,
}

/// Chronological split boundaries; the test set is everything after `val_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: i64,
    pub val_end: i64,
}

/// Contiguous index ranges of train, validation and test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn whole_as_test(n: usize) -> Self {
        Self {
            train: 0..0,
            val: 0..0,
            test: 0..n,
        }
    }
}

fn parse_timestamp(field: &str) -> Option<i64> {
    if let Ok(epoch) = field.parse::<i64>() {
        return Some(epoch);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(field) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(field, fmt) {
            return Some(naive.and_utc().timestamp());
        }
    }
    None
}

fn clamp_count(value: f64, range: (f64, f64), counter: &mut usize) -> f64 {
    if value < range.0 {
        *counter += 1;
        range.0
    } else if value > range.1 {
        *counter += 1;
        range.1
    } else {
        value
    }
}

/// Load a sensor CSV, returning records sorted by timestamp plus clamp diagnostics.
///
/// Timestamps may be epoch seconds or ISO-8601. Duplicate timestamps and
/// non-numeric fields are rejected with the offending line number.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(SensorSeries, LoadDiagnostics)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_ts = col(&schema.timestamp)?;
    let c_co2 = col(&schema.co2)?;
    let c_t = col(&schema.t_indoor)?;
    let c_rh = col(&schema.rh)?;
    let c_occ = col(&schema.occupied)?;

    let mut diag = LoadDiagnostics::default();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = row?;
        let field = |idx: usize| -> Result<&str> {
            row.get(idx).ok_or_else(|| Error::MalformedRow {
                line,
                reason: "short row".into(),
            })
        };
        let timestamp = parse_timestamp(field(c_ts)?).ok_or_else(|| Error::MalformedRow {
            line,
            reason: format!("unparseable timestamp `{}`", row.get(c_ts).unwrap_or("")),
        })?;
        let numeric = |idx: usize, name: &str| -> Result<f64> {
            field(idx)?.trim().parse::<f64>().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("non-numeric {name} `{}`", row.get(idx).unwrap_or("")),
            })
        };
        let co2 = numeric(c_co2, "co2")?;
        let t_indoor = numeric(c_t, "t_indoor")?;
        let rh = numeric(c_rh, "rh")?;
        let occ_raw = numeric(c_occ, "occupied")?;
        let occupied = if occ_raw == 0.0 {
            0
        } else if occ_raw == 1.0 {
            1
        } else {
            return Err(Error::MalformedRow {
                line,
                reason: format!("occupancy label `{occ_raw}` not in {{0,1}}"),
            });
        };
        records.push(SensorRecord {
            timestamp,
            co2: clamp_count(co2, CO2_RANGE, &mut diag.clamped_co2),
            t_indoor: clamp_count(t_indoor, T_RANGE, &mut diag.clamped_t_indoor),
            rh: clamp_count(rh, RH_RANGE, &mut diag.clamped_rh),
            occupied,
        });
    }
    diag.rows = records.len();

    records.sort_by_key(|r| r.timestamp);
    for pair in records.windows(2) {
        if pair[0].timestamp == pair[1].timestamp {
            return Err(Error::DuplicateTimestamp {
                timestamp: pair[0].timestamp,
            });
        }
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((SensorSeries::new(records, stem), diag))
}

/// Write a series using the default schema column names, epoch-second timestamps.
pub fn write_csv(series: &SensorSeries, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "timestamp,co2_ppm,t_indoor_c,rh_pct,occupied")?;
    for r in &series.records {
        // f64 Display is shortest-round-trip, so load_csv(write_csv(s)) is exact
        writeln!(
            out,
            "{},{},{},{},{}",
            r.timestamp, r.co2, r.t_indoor, r.rh, r.occupied
        )?;
    }
    out.flush()?;
    Ok(())
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

/// Resample a sorted series onto the exact 30 s grid.
///
/// Gaps up to `max_gap` seconds are filled by linear interpolation of the
/// continuous channels and last-observation-carried-forward occupancy.
/// Larger gaps split the series; each returned segment is gapless and
/// grid-aligned, anchored at its own first record.
pub fn regularize(series: &SensorSeries, max_gap: i64) -> Result<Vec<SensorSeries>> {
    if series.records.is_empty() {
        return Err(Error::EmptySeries);
    }
    assert!(max_gap >= SAMPLE_PERIOD, "max_gap below sampling period");

    let mut segments = Vec::new();
    let mut start = 0usize;
    for i in 1..series.records.len() {
        if series.records[i].timestamp - series.records[i - 1].timestamp > max_gap {
            segments.push(&series.records[start..i]);
            start = i;
        }
    }
    segments.push(&series.records[start..]);

    let mut out = Vec::with_capacity(segments.len());
    for (k, seg) in segments.iter().enumerate() {
        let t0 = seg[0].timestamp;
        let t_end = seg[seg.len() - 1].timestamp;
        let steps = (t_end - t0) / SAMPLE_PERIOD;
        let mut records = Vec::with_capacity(steps as usize + 1);
        let mut cursor = 0usize;
        for step in 0..=steps {
            let t = t0 + step * SAMPLE_PERIOD;
            while cursor + 1 < seg.len() && seg[cursor + 1].timestamp <= t {
                cursor += 1;
            }
            let lo = &seg[cursor];
            if lo.timestamp == t || cursor + 1 == seg.len() {
                records.push(SensorRecord { timestamp: t, ..*lo });
            } else {
                let hi = &seg[cursor + 1];
                let w = (t - lo.timestamp) as f64 / (hi.timestamp - lo.timestamp) as f64;
                records.push(SensorRecord {
                    timestamp: t,
                    co2: lerp(lo.co2, hi.co2, w),
                    t_indoor: lerp(lo.t_indoor, hi.t_indoor, w),
                    rh: lerp(lo.rh, hi.rh, w),
                    occupied: lo.occupied, // carried forward over the gap
                });
            }
        }
        let source_id = if segments.len() == 1 {
            series.source_id.clone()
        } else {
            format!("{}#{k}", series.source_id)
        };
        out.push(SensorSeries::new(records, source_id));
    }
    Ok(out)
}

/// Split one contiguous series into train/val/test index ranges.
///
/// Half-open convention: a record whose timestamp equals a boundary goes to
/// the later split. All three ranges must be non-empty.
pub fn split(series: &SensorSeries, spec: &SplitSpec) -> Result<SplitRanges> {
    let n = series.records.len();
    if n == 0 {
        return Err(Error::EmptySeries);
    }
    let train_end = series.records.partition_point(|r| r.timestamp < spec.train_end);
    let val_end = series.records.partition_point(|r| r.timestamp < spec.val_end);
    if train_end == 0 || val_end <= train_end || val_end >= n {
        return Err(Error::BoundaryOutsideSeries);
    }
    Ok(SplitRanges {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..n,
    })
}

/// Assign each row of a concatenation of segments to a split by timestamp.
///
/// Used when gaps produced more than one segment; the half-open boundary
/// convention matches [`split`].
pub fn split_by_timestamp(timestamps: &[i64], spec: &SplitSpec) -> Result<SplitRanges> {
    let n = timestamps.len();
    if n == 0 {
        return Err(Error::EmptySeries);
    }
    let train_end = timestamps.partition_point(|&t| t < spec.train_end);
    let val_end = timestamps.partition_point(|&t| t < spec.val_end);
    if train_end == 0 || val_end <= train_end || val_end >= n {
        return Err(Error::BoundaryOutsideSeries);
    }
    Ok(SplitRanges {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..n,
    })
}
