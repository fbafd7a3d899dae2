//! Error metrics on the total active power and persistence baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::model::{PowerSeries, Vec6};

pub const SECONDS_PER_DAY: usize = 86_400;
pub const HORIZON: usize = 900;

/// Measured samples below this total active power (W) are left out of MAPE.
pub const DEFAULT_MAPE_FLOOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent; NaN when every sample fell below the MAPE floor.
    pub mape: f64,
    /// Signed percentage energy difference, predicted relative to measured.
    pub energy_error: f64,
    pub mean_power: f64,
    pub samples: usize,
    pub mape_excluded: usize,
}

impl Metrics {
    /// RMSE as a percentage of the mean measured power.
    pub fn rmse_relative(&self) -> f64 {
        100.0 * self.rmse / self.mean_power
    }
}

pub fn metrics(measured: &[f64], predicted: &[f64], mape_floor: f64) -> Result<Metrics> {
    if measured.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} measured vs {} predicted samples",
            measured.len(),
            predicted.len()
        )));
    }
    if measured.is_empty() {
        return arg("empty evaluation window");
    }
    let n = measured.len() as f64;
    let (mut se, mut ae, mut ape, mut e_meas, mut e_pred) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut mape_n = 0usize;
    for (&m, &p) in measured.iter().zip(predicted) {
        let err = p - m;
        se += err * err;
        ae += err.abs();
        e_meas += m;
        e_pred += p;
        if m.abs() >= mape_floor {
            ape += (err / m).abs();
            mape_n += 1;
        }
    }
    let rmse = (se / n).sqrt();
    let mae = ae / n;
    debug_assert!(rmse >= mae * (1.0 - 1e-12), "RMSE {rmse} < MAE {mae}");
    Ok(Metrics {
        rmse,
        mae,
        mape: if mape_n == 0 { f64::NAN } else { 100.0 * ape / mape_n as f64 },
        energy_error: 100.0 * (e_pred - e_meas) / e_meas,
        mean_power: e_meas / n,
        samples: measured.len(),
        mape_excluded: measured.len() - mape_n,
    })
}

/// Metrics of the total active power of two series over `[start, end)`.
pub fn series_metrics(
    measured: &PowerSeries,
    predicted: &PowerSeries,
    start: usize,
    end: usize,
    mape_floor: f64,
) -> Result<Metrics> {
    if end > measured.len() || end > predicted.len() || start >= end {
        return arg(format!("window [{start}, {end}) outside the series"));
    }
    let m: Vec<f64> = measured.samples()[start..end].iter().map(Vec6::total_active).collect();
    let p: Vec<f64> = predicted.samples()[start..end].iter().map(Vec6::total_active).collect();
    metrics(&m, &p, mape_floor)
}

/// Daily metrics over whole days of the series (a trailing partial day is
/// evaluated as well when it spans at least an hour).
pub fn daily_metrics(measured: &PowerSeries, predicted: &PowerSeries, mape_floor: f64) -> Result<Vec<Metrics>> {
    let len = measured.len().min(predicted.len());
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + SECONDS_PER_DAY).min(len);
        if end - start >= 3600 || out.is_empty() {
            out.push(series_metrics(measured, predicted, start, end, mape_floor)?);
        }
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    /// Standard deviation of the mean.
    pub sem: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let n = v.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN, sem: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, sem: std / (n as f64).sqrt(), n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub rmse: Summary,
    pub mae: Summary,
    pub mape: Summary,
    pub energy_error: Summary,
    pub rmse_relative: Summary,
}

impl MetricsSummary {
    pub fn of(items: &[Metrics]) -> MetricsSummary {
        MetricsSummary {
            rmse: Summary::of(items.iter().map(|m| m.rmse)),
            mae: Summary::of(items.iter().map(|m| m.mae)),
            mape: Summary::of(items.iter().map(|m| m.mape)),
            energy_error: Summary::of(items.iter().map(|m| m.energy_error)),
            rmse_relative: Summary::of(items.iter().map(|m| m.rmse_relative())),
        }
    }
}

/// Which spread to print next to each mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spread {
    /// Standard deviation of the mean (daily disaggregation reports).
    Sem,
    /// Standard deviation (per-window forecast reports).
    Std,
}

/// Writes one row per metric and one `mean`/`spread` column pair per method.
pub fn write_report_csv<W: Write>(rows: &[(String, MetricsSummary)], spread: Spread, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let spread_name = match spread {
        Spread::Sem => "sem",
        Spread::Std => "std",
    };
    let mut header = vec!["metric".to_string()];
    for (name, _) in rows {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_{spread_name}"));
    }
    header.push("n".to_string());
    w.write_record(&header)?;
    let pick = |s: &Summary| match spread {
        Spread::Sem => s.sem,
        Spread::Std => s.std,
    };
    let lines: [(&str, fn(&MetricsSummary) -> Summary); 5] = [
        ("RMSE [W]", |m| m.rmse),
        ("MAE [W]", |m| m.mae),
        ("MAPE [%]", |m| m.mape),
        ("Energy_E [%]", |m| m.energy_error),
        ("RMSE / mean power [%]", |m| m.rmse_relative),
    ];
    for (label, get) in lines {
        let mut rec = vec![label.to_string()];
        for (_, s) in rows {
            let v = get(s);
            rec.push(format!("{:.4}", v.mean));
            rec.push(format!("{:.4}", pick(&v)));
        }
        rec.push(rows.first().map(|r| get(&r.1).n).unwrap_or(0).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Forecast of `[t0, t0 + horizon)` copied from the same slot seven days
/// earlier.
pub fn persistence_7d(history: &PowerSeries, t0: usize, horizon: usize) -> Result<Vec<Vec6>> {
    let lag = 7 * SECONDS_PER_DAY;
    if t0 < lag || t0 - lag + horizon > history.len() {
        return arg(format!("7-day persistence at t0 = {t0} needs history from t0 - {lag}"));
    }
    Ok(history.samples()[t0 - lag..t0 - lag + horizon].to_vec())
}

/// Forecast of `[t0, t0 + horizon)` copied from `[t0 - horizon, t0)`.
pub fn persistence_recent(history: &PowerSeries, t0: usize, horizon: usize) -> Result<Vec<Vec6>> {
    if t0 < horizon || t0 > history.len() {
        return arg(format!("persistence at t0 = {t0} needs {horizon} s of history"));
    }
    Ok(history.samples()[t0 - horizon..t0].to_vec())
}

/// The 15-minute persistence forecast.
pub fn persistence_15min(history: &PowerSeries, t0: usize) -> Result<Vec<Vec6>> {
    persistence_recent(history, t0, HORIZON)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let m = metrics(&[100.0, 200.0, 300.0], &[100.0, 200.0, 300.0], 10.0).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape, m.energy_error), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_offset_hand_values() {
        let m = metrics(&[1000.0; 10], &[1100.0; 10], 10.0).unwrap();
        assert!((m.rmse - 100.0).abs() < 1e-12);
        assert!((m.mae - 100.0).abs() < 1e-12);
        assert!((m.mape - 10.0).abs() < 1e-12);
        assert!((m.energy_error - 10.0).abs() < 1e-12);
    }

    #[test]
    fn signed_energy_underprediction() {
        let m = metrics(&[500.0, 1500.0], &[495.0, 1485.0], 10.0).unwrap();
        assert!((m.energy_error + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mape_floor_excludes_small_samples() {
        let m = metrics(&[5.0, 100.0], &[10.0, 110.0], 10.0).unwrap();
        assert_eq!(m.mape_excluded, 1);
        assert!((m.mape - 10.0).abs() < 1e-12);
        let m = metrics(&[0.0, 1.0], &[1.0, 2.0], 10.0).unwrap();
        assert!(m.mape.is_nan());
    }

    #[test]
    fn empty_window_rejected() {
        assert!(metrics(&[], &[], 10.0).is_err());
        assert!(metrics(&[1.0], &[], 10.0).is_err());
    }

    #[test]
    fn persistence_on_periodic_and_constant_signals() {
        let week = 7 * SECONDS_PER_DAY;
        let samples: Vec<Vec6> = (0..week + 2 * HORIZON)
            .map(|t| Vec6::splat(((t % week) as f64 / 97.0).sin() * 100.0 + 500.0))
            .collect();
        let s = PowerSeries::new(0, samples).unwrap();
        let t0 = week + 100;
        let f = persistence_7d(&s, t0, HORIZON).unwrap();
        assert_eq!(f, s.samples()[t0..t0 + HORIZON].to_vec());

        let c = PowerSeries::constant(0, Vec6::splat(7.0), 3000).unwrap();
        let f = persistence_15min(&c, 1000).unwrap();
        assert!(f.iter().all(|v| *v == Vec6::splat(7.0)));
        assert!(persistence_15min(&c, 100).is_err());
        assert!(persistence_7d(&c, 1000, HORIZON).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.sem - s.std / 2.0).abs() < 1e-12);
    }
}
