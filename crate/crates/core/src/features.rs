//! Shared feature construction: CO₂ slope, season one-hot, train-set
//! standardization and sliding sequence windows.
//!
//! The canonical feature layout is four continuous columns
//! (`co2`, `t_indoor`, `rh`, `co2_slope`) followed by a four-column season
//! one-hot (`season_winter`, `season_spring`, `season_summer`,
//! `season_autumn`). Masks select named subsets; the season block moves as
//! one unit under the name `season`.
//!
//! A [`FeatureTable`] can be cached to disk in a small binary container so
//! slopes are not recomputed on long series. Layout (all little-endian):
//! magic `OFT1`, `u32` column count d, `u64` row count T, d length-prefixed
//! UTF-8 column names, `u64` mask bitmap over the canonical 8 columns,
//! `u32` segment count then per segment `u64` start row, `u64` end row,
//! `i64` start timestamp, three `u64` pairs for train/val/test ranges,
//! then T·d `f64` row-major feature values and T label bytes.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};

use crate::dataset::{SensorSeries, SplitRanges, SAMPLE_PERIOD};
use crate::error::{Error, Result};

/// Canonical column names of the full feature set, in order.
pub const CANONICAL_COLUMNS: [&str; 8] = [
    "co2",
    "t_indoor",
    "rh",
    "co2_slope",
    "season_winter",
    "season_spring",
    "season_summer",
    "season_autumn",
];

/// Default trailing window for the CO₂ slope, seconds.
pub const SLOPE_WINDOW: i64 = 900;

/// Per-column standardization statistics, fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Column names the statistics belong to.
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    /// Population standard deviation; zero replaced by 1 and flagged.
    pub std: Vec<f64>,
    /// True where the training column was constant and σ was replaced by 1.
    pub degenerate: Vec<bool>,
}

impl Standardizer {
    /// Standardize one row in place. One-hot season columns are untouched.
    pub fn apply_row(&self, row: &mut [f64], names: &[String]) {
        for (j, name) in names.iter().enumerate() {
            if let Some(k) = self.columns.iter().position(|c| c == name) {
                row[j] = (row[j] - self.mean[k]) / self.std[k];
            }
        }
    }
}

/// Standardized feature matrix with labels, timestamps, segment boundaries
/// and chronological split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    /// Row-major T × d values.
    pub data: Vec<f64>,
    pub labels: Vec<u8>,
    pub timestamps: Vec<i64>,
    /// Half-open row ranges of gap-free segments.
    pub segments: Vec<Range<usize>>,
    pub split: SplitRanges,
}

impl FeatureTable {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.data[i * d..(i + 1) * d]
    }

    /// Rows of one split as index range.
    pub fn split_range(&self, which: Split) -> Range<usize> {
        match which {
            Split::Train => self.split.train.clone(),
            Split::Val => self.split.val.clone(),
            Split::Test => self.split.test.clone(),
        }
    }
}

/// Which chronological split a window or row set is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A sliding window of `l_seq` consecutive rows ending at `end`, labeled by
/// the occupancy at `end`. Rows are `end + 1 - l_seq ..= end` of the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceWindow {
    pub end: usize,
    pub l_seq: usize,
    pub label: u8,
}

impl SequenceWindow {
    pub fn rows(&self) -> Range<usize> {
        self.end + 1 - self.l_seq..self.end + 1
    }
}

/// Least-squares slope of the CO₂ channel over a trailing window, ppm/s.
///
/// The slope at step `t` is the ordinary least-squares line fit over the
/// samples in `[t - window, t]` within the same segment; fewer than two
/// available samples yield slope 0.
pub fn co2_slope(series: &SensorSeries, window: i64) -> Vec<f64> {
    let n = series.records.len();
    let w = (window / SAMPLE_PERIOD) as usize + 1; // samples per window, incl. endpoints
    let mut slopes = vec![0.0; n];
    for t in 0..n {
        let lo = t + 1 - w.min(t + 1);
        let m = t - lo + 1;
        if m < 2 {
            continue;
        }
        // x in seconds relative to window start; y = co2
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (k, rec) in series.records[lo..=t].iter().enumerate() {
            let x = (k as f64) * SAMPLE_PERIOD as f64;
            sx += x;
            sy += rec.co2;
            sxx += x * x;
            sxy += x * rec.co2;
        }
        let mf = m as f64;
        let denom = mf * sxx - sx * sx;
        if denom.abs() > 0.0 {
            slopes[t] = (mf * sxy - sx * sy) / denom;
        }
    }
    slopes
}

/// Map an epoch timestamp (UTC) to the meteorological season one-hot
/// (winter, spring, summer, autumn).
pub fn season_onehot(timestamp: i64) -> [f64; 4] {
    let month = DateTime::from_timestamp(timestamp, 0)
        .expect("timestamp out of chrono range")
        .month();
    let idx = match month {
        12 | 1 | 2 => 0,
        3 | 4 | 5 => 1,
        6 | 7 | 8 => 2,
        _ => 3,
    };
    let mut onehot = [0.0; 4];
    onehot[idx] = 1.0;
    onehot
}

/// Fit per-column mean and population std over training rows.
///
/// Only columns named in `continuous` are standardized; a constant column is
/// flagged degenerate and its σ replaced by 1.
pub fn fit_standardizer(
    data: &[f64],
    names: &[String],
    train: Range<usize>,
    continuous: &[&str],
) -> Result<Standardizer> {
    if train.is_empty() {
        return Err(Error::EmptySeries);
    }
    let d = names.len();
    let n = train.len() as f64;
    let mut columns = Vec::new();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    let mut degenerate = Vec::new();
    for (j, name) in names.iter().enumerate() {
        if !continuous.contains(&name.as_str()) {
            continue;
        }
        let mut sum = 0.0;
        for i in train.clone() {
            sum += data[i * d + j];
        }
        let mu = sum / n;
        let mut ss = 0.0;
        for i in train.clone() {
            let dev = data[i * d + j] - mu;
            ss += dev * dev;
        }
        let sigma = (ss / n).sqrt();
        columns.push(name.clone());
        mean.push(mu);
        degenerate.push(sigma == 0.0);
        std.push(if sigma == 0.0 { 1.0 } else { sigma });
    }
    Ok(Standardizer {
        columns,
        mean,
        std,
        degenerate,
    })
}

/// Assemble the standardized feature table for a set of regularized segments.
///
/// Segments are concatenated in time order; split assignment is by timestamp
/// against `split`. The standardizer is fitted on training rows only and the
/// same transform applied everywhere. Pass `None` for `frozen` to fit; pass a
/// previously fitted standardizer to reuse it (cross-scenario evaluation).
pub fn build_table(
    segments: &[SensorSeries],
    split: Option<&crate::dataset::SplitSpec>,
    frozen: Option<&Standardizer>,
    slope_window: i64,
) -> Result<(FeatureTable, Standardizer)> {
    if segments.is_empty() || segments.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptySeries);
    }
    let names: Vec<String> = CANONICAL_COLUMNS.iter().map(|s| s.to_string()).collect();
    let d = names.len();
    let total: usize = segments.iter().map(|s| s.len()).sum();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut timestamps = Vec::with_capacity(total);
    let mut seg_ranges = Vec::with_capacity(segments.len());
    let mut row = 0usize;
    for seg in segments {
        let slopes = co2_slope(seg, slope_window);
        let start = row;
        for (i, r) in seg.records.iter().enumerate() {
            let season = season_onehot(r.timestamp);
            data.extend_from_slice(&[
                r.co2, r.t_indoor, r.rh, slopes[i], season[0], season[1], season[2], season[3],
            ]);
            labels.push(r.occupied);
            timestamps.push(r.timestamp);
            row += 1;
        }
        seg_ranges.push(start..row);
    }

    let split_ranges = match split {
        Some(spec) => crate::dataset::split_by_timestamp(&timestamps, spec)?,
        None => SplitRanges::whole_as_test(total),
    };

    let continuous = ["co2", "t_indoor", "rh", "co2_slope"];
    let standardizer = match frozen {
        Some(s) => s.clone(),
        None => fit_standardizer(&data, &names, split_ranges.train.clone(), &continuous)?,
    };
    for i in 0..total {
        standardizer.apply_row(&mut data[i * d..(i + 1) * d], &names);
    }

    Ok((
        FeatureTable {
            names,
            data,
            labels,
            timestamps,
            segments: seg_ranges,
            split: split_ranges,
        },
        standardizer,
    ))
}

/// Restrict a table to the named columns. `season` expands to the four
/// one-hot columns. Unknown names are rejected.
pub fn apply_mask(table: &FeatureTable, mask: &[&str]) -> Result<FeatureTable> {
    let mut keep: Vec<usize> = Vec::new();
    for &name in mask {
        if name == "season" {
            for s in ["season_winter", "season_spring", "season_summer", "season_autumn"] {
                keep.push(table.names.iter().position(|n| n == s).unwrap());
            }
        } else if let Some(j) = table.names.iter().position(|n| n == name) {
            keep.push(j);
        } else {
            return Err(Error::UnknownFeature(name.to_string()));
        }
    }
    let d_old = table.n_cols();
    let d = keep.len();
    let mut data = Vec::with_capacity(table.n_rows() * d);
    for i in 0..table.n_rows() {
        for &j in &keep {
            data.push(table.data[i * d_old + j]);
        }
    }
    Ok(FeatureTable {
        names: keep.iter().map(|&j| table.names[j].clone()).collect(),
        data,
        labels: table.labels.clone(),
        timestamps: table.timestamps.clone(),
        segments: table.segments.clone(),
        split: table.split.clone(),
    })
}

/// Enumerate label-aligned windows of `l_seq` rows inside one split.
///
/// Windows never span a segment boundary or a split boundary. Within each
/// contiguous run the first window ends `l_seq - 1` rows in, subsequent
/// windows advance by `stride`.
pub fn make_windows(
    table: &FeatureTable,
    which: Split,
    l_seq: usize,
    stride: usize,
) -> Result<Vec<SequenceWindow>> {
    assert!(l_seq >= 1 && stride >= 1);
    let split = table.split_range(which);
    let mut windows = Vec::new();
    for seg in &table.segments {
        let lo = seg.start.max(split.start);
        let hi = seg.end.min(split.end);
        if hi <= lo || hi - lo < l_seq {
            continue;
        }
        let mut end = lo + l_seq - 1;
        while end < hi {
            windows.push(SequenceWindow {
                end,
                l_seq,
                label: table.labels[end],
            });
            end += stride;
        }
    }
    if windows.is_empty() {
        return Err(Error::SeriesTooShort { l_seq });
    }
    Ok(windows)
}

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(out: &mut impl Write, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(inp: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    inp.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(inp: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    inp.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Write the table to the binary cache format described in the module docs.
pub fn save_table(table: &FeatureTable, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(b"OFT1")?;
    write_u32(&mut out, table.n_cols() as u32)?;
    write_u64(&mut out, table.n_rows() as u64)?;
    for name in &table.names {
        write_u32(&mut out, name.len() as u32)?;
        out.write_all(name.as_bytes())?;
    }
    let mut bitmap = 0u64;
    for (bit, canonical) in CANONICAL_COLUMNS.iter().enumerate() {
        if table.names.iter().any(|n| n == canonical) {
            bitmap |= 1 << bit;
        }
    }
    write_u64(&mut out, bitmap)?;
    write_u32(&mut out, table.segments.len() as u32)?;
    for seg in &table.segments {
        write_u64(&mut out, seg.start as u64)?;
        write_u64(&mut out, seg.end as u64)?;
        out.write_all(&table.timestamps[seg.start].to_le_bytes())?;
    }
    for r in [&table.split.train, &table.split.val, &table.split.test] {
        write_u64(&mut out, r.start as u64)?;
        write_u64(&mut out, r.end as u64)?;
    }
    for v in &table.data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&table.labels)?;
    out.flush()?;
    Ok(())
}

/// Load a table previously written by [`save_table`].
pub fn load_table(path: &Path) -> Result<FeatureTable> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if &magic != b"OFT1" {
        return Err(Error::BadArtifact("feature cache magic mismatch".into()));
    }
    let d = read_u32(&mut inp)? as usize;
    let t = read_u64(&mut inp)? as usize;
    let mut names = Vec::with_capacity(d);
    for _ in 0..d {
        let len = read_u32(&mut inp)? as usize;
        let mut buf = vec![0u8; len];
        inp.read_exact(&mut buf)?;
        names.push(String::from_utf8(buf).map_err(|_| Error::BadArtifact("bad column name".into()))?);
    }
    let _bitmap = read_u64(&mut inp)?;
    let n_segments = read_u32(&mut inp)? as usize;
    let mut segments = Vec::with_capacity(n_segments);
    let mut seg_starts = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let start = read_u64(&mut inp)? as usize;
        let end = read_u64(&mut inp)? as usize;
        let mut ts_buf = [0u8; 8];
        inp.read_exact(&mut ts_buf)?;
        seg_starts.push(i64::from_le_bytes(ts_buf));
        segments.push(start..end);
    }
    let mut ranges = Vec::with_capacity(3);
    for _ in 0..3 {
        let start = read_u64(&mut inp)? as usize;
        let end = read_u64(&mut inp)? as usize;
        ranges.push(start..end);
    }
    let mut data = vec![0.0f64; t * d];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        inp.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    let mut labels = vec![0u8; t];
    inp.read_exact(&mut labels)?;
    let mut timestamps = vec![0i64; t];
    for (seg, &ts0) in segments.iter().zip(seg_starts.iter()) {
        for i in seg.clone() {
            timestamps[i] = ts0 + (i - seg.start) as i64 * SAMPLE_PERIOD;
        }
    }
    Ok(FeatureTable {
        names,
        data,
        labels,
        timestamps,
        segments,
        split: SplitRanges {
            train: ranges[0].clone(),
            val: ranges[1].clone(),
            test: ranges[2].clone(),
        },
    })
}

/// Build a small table directly from columns; used by tests and examples.
pub fn table_from_parts(
    names: &[&str],
    rows: &[Vec<f64>],
    labels: &[u8],
    split: SplitRanges,
) -> FeatureTable {
    let d = names.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        assert_eq!(r.len(), d);
        data.extend_from_slice(r);
    }
    FeatureTable {
        names: names.iter().map(|s| s.to_string()).collect(),
        data,
        labels: labels.to_vec(),
        timestamps: (0..rows.len() as i64).map(|i| i * SAMPLE_PERIOD).collect(),
        segments: vec![0..rows.len()],
        split,
    }
}
