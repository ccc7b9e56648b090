//! CSV time-series ingestion: load a header + numeric-columns file (with an
//! optional leading timestamp column), split it chronologically, standardize
//! with train-split statistics, and slide forecasting windows over each split.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("{path}: row {row} has {got} fields, expected {expected}")]
    Ragged { path: String, row: usize, expected: usize, got: usize },
    #[error("{path}: row {row}, column {col} ({name}): cannot parse {value:?} as a number")]
    BadCell { path: String, row: usize, col: usize, name: String, value: String },
    #[error("{path}: row {row}, column {col} ({name}): missing or non-finite value {value:?}")]
    MissingValue { path: String, row: usize, col: usize, name: String, value: String },
    #[error("channel {index} ({name}) is constant on the training split; cannot standardize")]
    ConstantChannel { index: usize, name: String },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("split of {rows} rows is too short for windows of {need} steps")]
    TooShort { rows: usize, need: usize },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, IngestError>;

/// A fully loaded multichannel series, `rows × channels` row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub values: Vec<f64>,
    pub rows: usize,
    pub channels: usize,
    /// Raw strings of the leading timestamp column, when one was detected.
    pub timestamps: Option<Vec<String>>,
    pub channel_names: Vec<String>,
}

/// Chronological split ratios plus the standardization contract (statistics
/// always come from the training split).
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratios: [0.7, 0.1, 0.2] }
    }
}

/// One standardized contiguous split.
#[derive(Debug, Clone)]
pub struct SplitView {
    pub values: Vec<f64>,
    pub rows: usize,
    pub channels: usize,
}

/// Standardized train/val/test plus the train statistics used everywhere.
#[derive(Debug, Clone)]
pub struct StandardizedSplits {
    pub train: SplitView,
    pub val: SplitView,
    pub test: SplitView,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Load a CSV with a header row. If the first column of the first data row
/// does not parse as a number it is treated as a timestamp column; all other
/// cells must be finite numbers.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => IngestError::Io {
                path: path_str.clone(),
                source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            },
            _ => IngestError::Csv { path: path_str.clone(), source: e },
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Csv { path: path_str.clone(), source: e })?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() {
        return Err(IngestError::Empty { path: path_str });
    }

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| IngestError::Csv { path: path_str.clone(), source: e })?;
        if rec.len() != headers.len() {
            return Err(IngestError::Ragged {
                path: path_str,
                row: i + 2, // 1-based, counting the header line
                expected: headers.len(),
                got: rec.len(),
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(IngestError::Empty { path: path_str });
    }

    let has_timestamp = records[0].get(0).map(|s| s.trim().parse::<f64>().is_err()).unwrap_or(false);
    let first_data_col = usize::from(has_timestamp);
    let channels = headers.len() - first_data_col;
    if channels == 0 {
        return Err(IngestError::Invalid(format!("{path_str}: no numeric columns")));
    }

    let rows = records.len();
    let mut values = Vec::with_capacity(rows * channels);
    let mut timestamps = has_timestamp.then(|| Vec::with_capacity(rows));
    for (i, rec) in records.iter().enumerate() {
        let row = i + 2;
        if let Some(ts) = timestamps.as_mut() {
            ts.push(rec.get(0).unwrap_or("").to_owned());
        }
        for (c, field) in rec.iter().enumerate().skip(first_data_col) {
            let v: f64 = field.trim().parse().map_err(|_| IngestError::BadCell {
                path: path_str.clone(),
                row,
                col: c + 1,
                name: headers[c].clone(),
                value: field.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(IngestError::MissingValue {
                    path: path_str.clone(),
                    row,
                    col: c + 1,
                    name: headers[c].clone(),
                    value: field.to_owned(),
                });
            }
            values.push(v);
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path_str.clone());
    Ok(Dataset {
        name,
        values,
        rows,
        channels,
        timestamps,
        channel_names: headers[first_data_col..].to_vec(),
    })
}

/// Write a dataset in the same format [`load_csv`] reads.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    if ds.timestamps.is_some() {
        out.push_str("date,");
    }
    out.push_str(&ds.channel_names.join(","));
    out.push('\n');
    for r in 0..ds.rows {
        if let Some(ts) = &ds.timestamps {
            let _ = write!(out, "{},", ts[r]);
        }
        for c in 0..ds.channels {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", ds.values[r * ds.channels + c]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Chronological 3-way split standardized with training statistics.
/// Lengths are `floor(T·r0)` / `floor(T·r1)` / remainder.
pub fn split_and_standardize(ds: &Dataset, spec: &SplitSpec) -> Result<StandardizedSplits> {
    let [r0, r1, r2] = spec.ratios;
    if r0 <= 0.0 || r1 < 0.0 || r2 < 0.0 || (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(IngestError::BadRatios(spec.ratios));
    }
    let n_train = (ds.rows as f64 * r0).floor() as usize;
    let n_val = (ds.rows as f64 * r1).floor() as usize;
    if n_train == 0 {
        return Err(IngestError::TooShort { rows: ds.rows, need: 1 });
    }
    let c = ds.channels;
    let mut mean = vec![0.0f64; c];
    for row in ds.values[..n_train * c].chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    let mut std = vec![0.0f64; c];
    for row in ds.values[..n_train * c].chunks_exact(c) {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for (i, s) in std.iter_mut().enumerate() {
        *s = (*s / n_train as f64).sqrt();
        if *s < 1e-12 {
            return Err(IngestError::ConstantChannel { index: i, name: ds.channel_names[i].clone() });
        }
    }
    let standardize = |range: std::ops::Range<usize>| -> SplitView {
        let rows = range.end - range.start;
        let mut values = ds.values[range.start * c..range.end * c].to_vec();
        for row in values.chunks_exact_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        SplitView { values, rows, channels: c }
    };
    Ok(StandardizedSplits {
        train: standardize(0..n_train),
        val: standardize(n_train..n_train + n_val),
        test: standardize(n_train + n_val..ds.rows),
        mean,
        std,
    })
}

/// Invert standardization in place.
pub fn destandardize(values: &mut [f64], channels: usize, mean: &[f64], std: &[f64]) {
    for row in values.chunks_exact_mut(channels) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = *v * s + m;
        }
    }
}

/// Chronological sliding windows: `(input, target)` row-major slices of
/// `input_len` and `pred_len` consecutive rows. `stride` shifts the window
/// start; windows never leave the split.
pub fn window_sampler<'a>(
    split: &'a SplitView,
    input_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<impl ExactSizeIterator<Item = (&'a [f64], &'a [f64])>> {
    if stride == 0 || input_len == 0 || pred_len == 0 {
        return Err(IngestError::Invalid("window lengths and stride must be positive".into()));
    }
    let need = input_len + pred_len;
    if split.rows < need {
        return Err(IngestError::TooShort { rows: split.rows, need });
    }
    let count = (split.rows - need) / stride + 1;
    let c = split.channels;
    Ok((0..count).map(move |w| {
        let t = w * stride;
        let input = &split.values[t * c..(t + input_len) * c];
        let target = &split.values[(t + input_len) * c..(t + need) * c];
        (input, target)
    }))
}

/// Parse timestamps like `2016-07-01 13:45:00` (time optional) into
/// normalized calendar channels (month, day, weekday, hour, each scaled to
/// [-0.5, 0.5]) appended after the data channels.
pub fn append_calendar_features(ds: &Dataset) -> Result<Dataset> {
    let ts = ds.timestamps.as_ref().ok_or_else(|| {
        IngestError::Invalid(format!("{}: no timestamp column to derive calendar features", ds.name))
    })?;
    let mut values = Vec::with_capacity(ds.rows * (ds.channels + 4));
    for (r, stamp) in ts.iter().enumerate() {
        let (y, mo, d, h) = parse_stamp(stamp).ok_or_else(|| IngestError::Invalid(format!(
            "{}: row {}: cannot parse timestamp {stamp:?}",
            ds.name,
            r + 2
        )))?;
        values.extend_from_slice(&ds.values[r * ds.channels..(r + 1) * ds.channels]);
        values.push((mo - 1) as f64 / 11.0 - 0.5);
        values.push((d - 1) as f64 / 30.0 - 0.5);
        values.push(weekday(y, mo, d) as f64 / 6.0 - 0.5);
        values.push(h as f64 / 23.0 - 0.5);
    }
    let mut channel_names = ds.channel_names.clone();
    channel_names.extend(["cal_month", "cal_day", "cal_weekday", "cal_hour"].map(String::from));
    Ok(Dataset {
        name: ds.name.clone(),
        values,
        rows: ds.rows,
        channels: ds.channels + 4,
        timestamps: ds.timestamps.clone(),
        channel_names,
    })
}

fn parse_stamp(s: &str) -> Option<(i64, u32, u32, u32)> {
    let s = s.trim();
    let (date, time) = match s.split_once([' ', 'T']) {
        Some((d, t)) => (d, Some(t)),
        None => (s, None),
    };
    let mut parts = date.split('-');
    let y: i64 = parts.next()?.parse().ok()?;
    let mo: u32 = parts.next()?.parse().ok()?;
    let d: u32 = parts.next()?.parse().ok()?;
    if !(1..=12).contains(&mo) || !(1..=31).contains(&d) {
        return None;
    }
    let h = match time {
        Some(t) => t.split(':').next()?.parse().ok()?,
        None => 0,
    };
    if h > 23 {
        return None;
    }
    Some((y, mo, d, h))
}

/// Day of week, 0 = Monday (Sakamoto's method).
fn weekday(y: i64, m: u32, d: u32) -> u32 {
    const T: [i64; 12] = [0, 3, 2, 5, 0, 3, 5, 1, 4, 6, 2, 4];
    let y = if m < 3 { y - 1 } else { y };
    let w = (y + y / 4 - y / 100 + y / 400 + T[(m - 1) as usize] + d as i64).rem_euclid(7);
    ((w + 6) % 7) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn plain_numeric_file_loads_as_matrix() {
        let f = write_tmp("a,b\n1,2\n3,4\n5,6\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!((ds.rows, ds.channels), (3, 2));
        assert_eq!(ds.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(ds.timestamps.is_none());
        assert_eq!(ds.channel_names, ["a", "b"]);
    }

    #[test]
    fn leading_date_column_is_detected_and_kept_aside() {
        let f = write_tmp(
            "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n\
             2016-07-01 00:00:00,5.8,2.0,1.6,0.4,4.2,1.3,30.5\n\
             2016-07-01 01:00:00,5.7,2.1,1.5,0.4,4.1,1.2,27.8\n",
        );
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.channels, 7);
        assert_eq!(ds.rows, 2);
        assert_eq!(ds.timestamps.as_ref().unwrap().len(), 2);
        assert_eq!(ds.channel_names[6], "OT");
    }

    #[test]
    fn nan_cell_is_rejected_with_its_coordinates() {
        let f = write_tmp("a,b\n1,2\n3,NaN\n");
        let err = load_csv(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("column 2"), "{msg}");
    }

    #[test]
    fn non_numeric_cell_is_rejected_with_its_coordinates() {
        let f = write_tmp("a,b\n1,2\nx,4\n");
        let err = load_csv(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("column 1"), "{msg}");
    }

    #[test]
    fn ragged_row_is_rejected_with_its_row_number() {
        let f = write_tmp("a,b\n1,2\n3\n");
        let err = load_csv(f.path()).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_tmp("a,b\n");
        assert!(matches!(load_csv(f.path()), Err(IngestError::Empty { .. })));
    }

    #[test]
    fn write_then_load_roundtrips() {
        let ds = Dataset {
            name: "synthetic".into(),
            values: vec![1.5, -2.25, 0.0, 3.125],
            rows: 2,
            channels: 2,
            timestamps: None,
            channel_names: vec!["ch0".into(), "ch1".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_csv(&path, &ds).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.values, ds.values);
        assert_eq!(back.channel_names, ds.channel_names);
    }

    fn ramp_dataset(rows: usize) -> Dataset {
        // drifting series so later splits have different statistics
        let values: Vec<f64> = (0..rows)
            .flat_map(|t| [t as f64, (t as f64 * 0.37).sin() * 3.0 + t as f64 * 0.1])
            .collect();
        Dataset {
            name: "ramp".into(),
            values,
            rows,
            channels: 2,
            timestamps: None,
            channel_names: vec!["x".into(), "y".into()],
        }
    }

    #[test]
    fn ratio_split_produces_70_10_20_lengths() {
        let ds = ramp_dataset(100);
        let s = split_and_standardize(&ds, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.rows, s.val.rows, s.test.rows), (70, 10, 20));
    }

    #[test]
    fn train_split_is_standardized_and_later_splits_use_train_stats() {
        let ds = ramp_dataset(200);
        let s = split_and_standardize(&ds, &SplitSpec::default()).unwrap();
        let c = 2;
        for ch in 0..c {
            let col: Vec<f64> =
                s.train.values.chunks_exact(c).map(|r| r[ch]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9, "train mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "train var {var}");
        }
        // the ramp keeps growing, so val/test means sit well above zero
        let val_mean = s.val.values.iter().sum::<f64>() / s.val.values.len() as f64;
        assert!(val_mean > 0.5, "val mean {val_mean}");
    }

    #[test]
    fn constant_channel_is_rejected_by_name() {
        let values: Vec<f64> = (0..50).flat_map(|t| [t as f64, 7.0]).collect();
        let ds = Dataset {
            name: "const".into(),
            values,
            rows: 50,
            channels: 2,
            timestamps: None,
            channel_names: vec!["x".into(), "flat".into()],
        };
        let err = split_and_standardize(&ds, &SplitSpec::default()).unwrap_err();
        assert!(err.to_string().contains("flat"), "{err}");
    }

    #[test]
    fn destandardize_recovers_original_values() {
        let ds = ramp_dataset(100);
        let s = split_and_standardize(&ds, &SplitSpec::default()).unwrap();
        let mut back = s.test.values.clone();
        destandardize(&mut back, 2, &s.mean, &s.std);
        let orig = &ds.values[80 * 2..];
        for (b, o) in back.iter().zip(orig) {
            assert!((b - o).abs() <= 1e-9 * o.abs().max(1.0));
        }
    }

    #[test]
    fn window_counts_and_strides_follow_the_arithmetic() {
        let split = SplitView {
            values: (0..20).map(|v| v as f64).collect(),
            rows: 10,
            channels: 2,
        };
        let windows: Vec<_> = window_sampler(&split, 4, 2, 1).unwrap().collect();
        assert_eq!(windows.len(), 5);
        // chronological and contiguous: target follows its input directly
        assert_eq!(windows[0].0[0], 0.0);
        assert_eq!(windows[0].1[0], 8.0);
        assert_eq!(windows[4].0[0], 8.0);
        // stride = pred_len gives non-overlapping targets
        let strided: Vec<_> = window_sampler(&split, 4, 2, 2).unwrap().collect();
        assert_eq!(strided.len(), 3);
        let t0: Vec<f64> = strided[0].1.to_vec();
        let t1: Vec<f64> = strided[1].1.to_vec();
        assert_eq!(t0, vec![8.0, 9.0, 10.0, 11.0]);
        assert_eq!(t1, vec![12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn too_short_split_is_rejected() {
        let split = SplitView { values: vec![0.0; 10], rows: 5, channels: 2 };
        assert!(matches!(
            window_sampler(&split, 4, 2, 1),
            Err(IngestError::TooShort { rows: 5, need: 6 })
        ));
    }

    #[test]
    fn calendar_features_append_four_normalized_channels() {
        let f = write_tmp(
            "date,v\n2016-07-01 00:00:00,1.0\n2016-07-04 13:00:00,2.0\n",
        );
        let ds = load_csv(f.path()).unwrap();
        let with_cal = append_calendar_features(&ds).unwrap();
        assert_eq!(with_cal.channels, 5);
        let row1 = &with_cal.values[5..10];
        assert_eq!(row1[0], 2.0);
        // 2016-07-04 was a Monday; hour 13 of 23
        assert!((row1[3] - (0.0 / 6.0 - 0.5)).abs() < 1e-12);
        assert!((row1[4] - (13.0 / 23.0 - 0.5)).abs() < 1e-12);
        for v in &with_cal.values[6..10] {
            assert!((-0.5..=0.5).contains(v));
        }
    }
}
