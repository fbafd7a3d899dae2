//! CSV ingestion with last-known-value gap filling, and the derivative
//! series used for event detection.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::model::{PowerSeries, Vec6, CHANNELS};

/// Column mapping of an input CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub channels: [String; CHANNELS],
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            channels: ["P0", "P1", "P2", "P3", "P4", "P5"].map(String::from),
        }
    }
}

/// Gap-fill statistics of one ingested file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapFillSummary {
    pub rows: usize,
    pub samples: usize,
    /// Seconds with no row at all.
    pub filled_samples: usize,
    /// Individual channel values that were missing (including whole
    /// missing seconds, six values each).
    pub filled_values: usize,
    pub filled_percent: f64,
    pub duplicate_timestamps: usize,
}

/// Loads a CSV file into a gap-free 1 Hz series.
pub fn load_series(path: &Path, schema: &CsvSchema) -> Result<(PowerSeries, GapFillSummary)> {
    let file = std::fs::File::open(path)?;
    read_series(file, schema)
}

pub fn read_series<R: Read>(reader: R, schema: &CsvSchema) -> Result<(PowerSeries, GapFillSummary)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("missing column `{name}` in header")))
    };
    let ts_col = column(&schema.timestamp)?;
    let mut ch_cols = [0usize; CHANNELS];
    for (c, name) in schema.channels.iter().enumerate() {
        ch_cols[c] = column(name)?;
    }

    let mut summary = GapFillSummary::default();
    // Last row wins for duplicate timestamps.
    let mut rows: BTreeMap<i64, [Option<f64>; CHANNELS]> = BTreeMap::new();
    let mut last_ts: Option<i64> = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Row {
            line,
            message: e.to_string(),
        })?;
        let ts_raw = rec.get(ts_col).unwrap_or("");
        let ts: i64 = parse_timestamp(ts_raw).ok_or_else(|| Error::Row {
            line,
            message: format!("cannot parse timestamp `{ts_raw}`"),
        })?;
        if let Some(prev) = last_ts {
            if ts < prev {
                return Err(Error::Row {
                    line,
                    message: format!("timestamp {ts} is earlier than previous {prev}"),
                });
            }
            if ts == prev {
                summary.duplicate_timestamps += 1;
            }
        }
        last_ts = Some(ts);
        let mut values = [None; CHANNELS];
        for (c, &col) in ch_cols.iter().enumerate() {
            let raw = rec.get(col).unwrap_or("");
            if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| Error::Row {
                line,
                message: format!("cannot parse `{raw}` in column `{}`", schema.channels[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    line,
                    message: format!("non-finite value in column `{}`", schema.channels[c]),
                });
            }
            values[c] = Some(v);
        }
        rows.insert(ts, values);
        summary.rows += 1;
    }

    let (&first, _) = rows
        .first_key_value()
        .ok_or_else(|| Error::Input("file contains no data rows".into()))?;
    let (&last, _) = rows.last_key_value().expect("non-empty");
    let len = (last - first + 1) as usize;

    // Leading gaps take the first present value of each channel.
    let mut current = [None::<f64>; CHANNELS];
    for values in rows.values() {
        for c in 0..CHANNELS {
            if current[c].is_none() {
                current[c] = values[c];
            }
        }
        if current.iter().all(Option::is_some) {
            break;
        }
    }
    if let Some(c) = current.iter().position(Option::is_none) {
        return Err(Error::Input(format!(
            "column `{}` has no values",
            schema.channels[c]
        )));
    }
    let mut last_known: [f64; CHANNELS] = current.map(|v| v.unwrap());

    let mut samples = Vec::with_capacity(len);
    let mut iter = rows.into_iter().peekable();
    for t in 0..len as i64 {
        let ts = first + t;
        match iter.peek() {
            Some((row_ts, _)) if *row_ts == ts => {
                let (_, values) = iter.next().unwrap();
                for c in 0..CHANNELS {
                    match values[c] {
                        Some(v) => last_known[c] = v,
                        None => summary.filled_values += 1,
                    }
                }
            }
            _ => {
                summary.filled_samples += 1;
                summary.filled_values += CHANNELS;
            }
        }
        samples.push(Vec6(last_known));
    }
    summary.samples = len;
    summary.filled_percent = 100.0 * summary.filled_values as f64 / (len * CHANNELS) as f64;
    if summary.duplicate_timestamps > 0 {
        log::warn!(
            "{} duplicate timestamps; last row kept",
            summary.duplicate_timestamps
        );
    }
    let series = PowerSeries::new(first, samples)?;
    Ok((series, summary))
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    raw.parse::<i64>().ok().or_else(|| {
        let f: f64 = raw.parse().ok()?;
        (f.is_finite() && f.fract() == 0.0).then_some(f as i64)
    })
}

/// First difference of a power series: `dP(t) = P(t+1) - P(t)` in W/s, plus
/// the total-active channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeSeries {
    pub values: Vec<Vec6>,
    pub total: Vec<f64>,
}

impl DerivativeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn derivative(series: &PowerSeries) -> Result<DerivativeSeries> {
    if series.len() < 2 {
        return arg("derivative needs at least 2 samples");
    }
    let values: Vec<Vec6> = series
        .samples()
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect();
    let total = values.iter().map(Vec6::total_active).collect();
    Ok(DerivativeSeries { values, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<(PowerSeries, GapFillSummary)> {
        read_series(text.as_bytes(), &CsvSchema::default())
    }

    const HEADER: &str = "timestamp,P0,P1,P2,P3,P4,P5\n";

    #[test]
    fn complete_rows_verbatim() {
        let text = format!("{HEADER}0,1,2,3,4,5,6\n1,2,2,3,4,5,6\n2,3,2,3,4,5,6\n");
        let (s, sum) = load(&text).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get(2), Vec6([3.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(sum.filled_samples, 0);
        assert_eq!(sum.filled_percent, 0.0);
    }

    #[test]
    fn missing_second_takes_last_known_value() {
        let text = format!("{HEADER}100,1,2,3,4,5,6\n102,9,9,9,9,9,9\n");
        let (s, sum) = load(&text).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.start_timestamp(), 100);
        assert_eq!(s.get(1), s.get(0));
        assert_eq!(sum.filled_samples, 1);
        assert_eq!(sum.filled_values, 6);
    }

    #[test]
    fn leading_missing_channel_back_filled() {
        let text = format!("{HEADER}0,,2,3,4,5,6\n1,,2,3,4,5,6\n2,7,2,3,4,5,6\n3,8,2,3,4,5,6\n");
        let (s, sum) = load(&text).unwrap();
        let ch0: Vec<f64> = s.samples().iter().map(|v| v[0]).collect();
        assert_eq!(ch0, vec![7.0, 7.0, 7.0, 8.0]);
        assert_eq!(sum.filled_values, 2);
    }

    #[test]
    fn duplicate_timestamp_last_row_wins() {
        let text = format!("{HEADER}0,1,1,1,1,1,1\n0,2,2,2,2,2,2\n1,3,3,3,3,3,3\n");
        let (s, sum) = load(&text).unwrap();
        assert_eq!(s.get(0), Vec6::splat(2.0));
        assert_eq!(sum.duplicate_timestamps, 1);
    }

    #[test]
    fn unparsable_row_reports_line() {
        let text = format!("{HEADER}0,1,1,1,1,1,1\n1,x,1,1,1,1,1\n");
        match load(&text) {
            Err(Error::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_input_error() {
        assert!(matches!(load(HEADER), Err(Error::Input(_))));
        assert!(load("").is_err());
    }

    #[test]
    fn custom_schema_columns() {
        let schema = CsvSchema {
            timestamp: "ts".into(),
            channels: ["a", "b", "c", "d", "e", "f"].map(String::from),
        };
        let text = "f,e,d,c,b,a,ts\n6,5,4,3,2,1,0\n6,5,4,3,2,1,1\n";
        let (s, _) = read_series(text.as_bytes(), &schema).unwrap();
        assert_eq!(s.get(0), Vec6([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn derivative_examples() {
        let s = PowerSeries::constant(0, Vec6::splat(3.0), 5).unwrap();
        let d = derivative(&s).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.total.iter().all(|v| *v == 0.0));

        let s = PowerSeries::new(
            0,
            vec![
                Vec6::ZERO,
                Vec6([5.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
                Vec6([5.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        assert_eq!(derivative(&s).unwrap().total, vec![5.0, 0.0]);
    }
}
