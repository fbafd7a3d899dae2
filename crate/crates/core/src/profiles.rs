//! Device profiles from run-time groups by median blending of normalized
//! aggregate windows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::duration::Group;
use crate::error::{Error, Result};
use crate::model::{DeviceProfile, PowerSeries, Vec6, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendOptions {
    /// Total-active power (W) at or below which a sample counts as zero.
    pub zero_tolerance: f64,
    /// Samples before the switch-on whose median is the window baseline.
    pub baseline_samples: usize,
}

impl Default for BlendOptions {
    fn default() -> Self {
        Self {
            zero_tolerance: 1.0,
            baseline_samples: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BlendDiagnostics {
    pub used: usize,
    pub out_of_bounds: usize,
    pub zero_maximum: usize,
    pub stable_state_found: bool,
}

/// Lower median (the `(n-1)/2`-th order statistic).
pub fn lower_median(values: &mut [f64]) -> f64 {
    let mid = (values.len() - 1) / 2;
    *values.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Baseline-corrected windows `P(t_p + t) - baseline`, `t = 1..=d`, of the
/// group members that fit inside the series, each divided by its maximum
/// total active power.
fn normalized_windows(
    group: &Group,
    series: &PowerSeries,
    opts: &BlendOptions,
    diag: &mut BlendDiagnostics,
) -> Vec<Vec<Vec6>> {
    let d = group.duration;
    let samples = series.samples();
    let mut windows = Vec::with_capacity(group.members.len());
    for m in &group.members {
        let on = m.on_time;
        if on + d >= samples.len() {
            diag.out_of_bounds += 1;
            continue;
        }
        let lo = (on + 1).saturating_sub(opts.baseline_samples.max(1));
        let mut baseline = Vec6::ZERO;
        for c in 0..CHANNELS {
            let mut vals: Vec<f64> = samples[lo..=on].iter().map(|s| s[c]).collect();
            baseline[c] = lower_median(&mut vals);
        }
        let window: Vec<Vec6> = samples[on + 1..=on + d].iter().map(|s| *s - baseline).collect();
        let max = window.iter().map(Vec6::total_active).fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            diag.zero_maximum += 1;
            continue;
        }
        windows.push(window.into_iter().map(|v| v * (1.0 / max)).collect());
    }
    diag.used = windows.len();
    windows
}

/// Per-offset, per-channel lower median across windows of equal length.
pub fn blend(windows: &[Vec<Vec6>]) -> Vec<Vec6> {
    let d = windows[0].len();
    let mut scratch = vec![0.0; windows.len()];
    (0..d)
        .map(|t| {
            let mut out = Vec6::ZERO;
            for c in 0..CHANNELS {
                for (s, w) in scratch.iter_mut().zip(windows) {
                    *s = w[t][c];
                }
                out[c] = lower_median(&mut scratch);
            }
            out
        })
        .collect()
}

/// Median-blended normalized shape of a group (before rescaling).
pub fn normalized_median(group: &Group, series: &PowerSeries, opts: &BlendOptions) -> Result<Vec<Vec6>> {
    let mut diag = BlendDiagnostics::default();
    let windows = normalized_windows(group, series, opts, &mut diag);
    if windows.is_empty() {
        return Err(Error::Extraction(format!(
            "group of cluster {} (d = {} s): no usable window",
            group.cluster, group.duration
        )));
    }
    Ok(blend(&windows))
}

/// Builds the profile of a group.
///
/// Each member window starts at the sample after the ON-event, is corrected
/// by the pre-event baseline and normalized by its maximum total active
/// power. The per-offset median shape is rescaled so its first sample carries
/// the cluster's total switch-on step (`center * 1 s`).
pub fn median_blend(
    id: usize,
    group: &Group,
    series: &PowerSeries,
    center: Vec6,
    opts: &BlendOptions,
) -> Result<(DeviceProfile, BlendDiagnostics)> {
    let mut diag = BlendDiagnostics::default();
    let windows = normalized_windows(group, series, opts, &mut diag);
    if windows.is_empty() {
        return Err(Error::Extraction(format!(
            "group of cluster {} (d = {} s): all {} windows unusable",
            group.cluster,
            group.duration,
            group.members.len()
        )));
    }
    let shape = blend(&windows);
    let first = shape[0].total_active();
    let step = center.total_active();
    let scale = if first > 1e-6 && step > 0.0 {
        step / first
    } else {
        // Degenerate first sample: fall back to the median window maximum.
        let mut maxima: Vec<f64> = group
            .members
            .iter()
            .filter(|m| m.on_time + group.duration < series.len())
            .map(|m| {
                series.samples()[m.on_time + 1..=m.on_time + group.duration]
                    .iter()
                    .map(|s| s.total_active() - series.get(m.on_time).total_active())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        lower_median(&mut maxima)
    };
    let dynamic: Vec<Vec6> = shape.into_iter().map(|v| v * scale).collect();
    let (stable, found) = stable_state_of(&dynamic, opts.zero_tolerance);
    diag.stable_state_found = found;
    let profile = DeviceProfile {
        id,
        duration: dynamic.len(),
        cluster_center: center,
        stable_state: stable,
        dynamic,
    };
    Ok((profile, diag))
}

/// Last dynamic sample whose total active power exceeds `zero_tolerance`;
/// the zero vector and `false` when there is none.
pub fn stable_state_of(dynamic: &[Vec6], zero_tolerance: f64) -> (Vec6, bool) {
    match dynamic.iter().rev().find(|v| v.total_active() > zero_tolerance) {
        Some(v) => (*v, true),
        None => {
            log::debug!("profile without a non-zero sample; stable state set to zero");
            (Vec6::ZERO, false)
        }
    }
}

pub fn stable_state(profile: &DeviceProfile, zero_tolerance: f64) -> Vec6 {
    stable_state_of(&profile.dynamic, zero_tolerance).0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub id: usize,
    pub cluster: usize,
    pub duration: usize,
    pub stable_norm: f64,
    pub members: usize,
}

pub fn write_catalog<W: Write>(entries: &[CatalogEntry], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
