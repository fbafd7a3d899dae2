//! State-based short-term load forecasting.
//!
//! Device state changes are integrated into per-device state series, pooled
//! into a fixed feature layout, and mapped by a feed-forward network onto
//! the expected device states of the next 15 minutes. Differentiating those
//! states gives switching probabilities, which are turned back into power
//! with the device profiles.

mod mlp;

pub use mlp::{
    evaluate_loss, msle, msle_gradient, train, write_training_log, Activation, EpochLog, Layer, LossKind, Mlp,
    Optimizer, TrainConfig, TrainOutcome,
};

use std::io::Write;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::metrics::{HORIZON, SECONDS_PER_DAY};
use crate::model::{
    reconstruct_with_threshold, DeviceProfile, Epsilon, PowerSeries, StateChange, StateChangesMatrix, StateKind,
    Vec6, DEFAULT_RECONSTRUCTION_THRESHOLD,
};
use crate::synth::weekday;

const WEEK: usize = 7 * SECONDS_PER_DAY;

/// Per-device cumulative sums of a state-changes matrix (one row per
/// second, one column per device).
pub fn integrate_states(s: &StateChangesMatrix) -> Array2<f64> {
    let mut out = Array2::zeros((s.len(), s.devices()));
    let mut level = vec![0.0; s.devices()];
    let entries = s.entries();
    let mut k = 0;
    for t in 0..s.len() {
        while k < entries.len() && entries[k].t == t {
            level[entries[k].device] += entries[k].value;
            k += 1;
        }
        for (d, v) in level.iter().enumerate() {
            out[[t, d]] = *v;
        }
    }
    out
}

/// Row differences of a state series. The first row is taken relative to
/// `initial` (zeros for a series starting from rest). Probabilistic output
/// is clamped to `[-1, 1]`.
pub fn differentiate_states(states: &Array2<f64>, initial: &[f64], kind: StateKind) -> Result<StateChangesMatrix> {
    let (len, devices) = states.dim();
    if initial.len() != devices {
        return Err(Error::Dimension(format!(
            "{} initial states for {devices} devices",
            initial.len()
        )));
    }
    let mut entries = Vec::new();
    for t in 0..len {
        for d in 0..devices {
            let prev = if t == 0 { initial[d] } else { states[[t - 1, d]] };
            let mut value = states[[t, d]] - prev;
            if kind == StateKind::Probabilistic {
                value = value.clamp(-1.0, 1.0);
            }
            if value != 0.0 {
                entries.push(StateChange { t, device: d, value });
            }
        }
    }
    StateChangesMatrix::new(len, devices, kind, entries)
}

/// Piecewise-constant integrated state of every device, normalized by the
/// per-device maximum absolute state, with exact interval means.
#[derive(Clone, Debug)]
pub struct StateTimeline {
    len: usize,
    /// Per device: change times, state after each change, and the integral
    /// of the state from 0 to each change time.
    devices: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)>,
    scale: Vec<f64>,
}

impl StateTimeline {
    /// Scales are the per-device maximum absolute integrated state (1 for
    /// devices that never change).
    pub fn new(s: &StateChangesMatrix) -> Self {
        let mut devices = vec![(Vec::new(), Vec::new(), Vec::new()); s.devices()];
        let mut level = vec![0.0; s.devices()];
        let mut max = vec![0.0f64; s.devices()];
        for e in s.entries() {
            let (times, values, integrals) = &mut devices[e.device];
            let before = match times.last() {
                Some(&t0) => integrals.last().copied().unwrap_or(0.0) + level[e.device] * (e.t - t0) as f64,
                None => 0.0,
            };
            level[e.device] += e.value;
            max[e.device] = max[e.device].max(level[e.device].abs());
            times.push(e.t);
            values.push(level[e.device]);
            integrals.push(before);
        }
        let scale = max.into_iter().map(|m| if m > 0.0 { m } else { 1.0 }).collect();
        Self { len: s.len(), devices, scale }
    }

    pub fn with_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.devices.len() || scale.iter().any(|s| !(*s > 0.0)) {
            return arg("scale must hold one positive value per device");
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn devices(&self) -> usize {
        self.devices.len()
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Integral of the raw state of device `d` over `[0, t)`.
    fn integral(&self, d: usize, t: usize) -> f64 {
        let (times, values, integrals) = &self.devices[d];
        let k = times.partition_point(|&x| x < t);
        if k == 0 {
            0.0
        } else {
            integrals[k - 1] + values[k - 1] * (t - times[k - 1]) as f64
        }
    }

    /// Normalized state of device `d` at second `t`.
    pub fn value(&self, d: usize, t: usize) -> f64 {
        let (times, values, _) = &self.devices[d];
        let k = times.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            values[k - 1] / self.scale[d]
        }
    }

    /// Mean normalized state of device `d` over `[a, b)`.
    pub fn mean(&self, d: usize, a: usize, b: usize) -> f64 {
        (self.integral(d, b) - self.integral(d, a)) / ((b - a) as f64 * self.scale[d])
    }
}

/// Shape of the flattened network input and output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureLayout {
    pub devices: usize,
    /// Length of the recent-history block before `t0` (s).
    pub past_seconds: usize,
    /// Pooled values per device in the recent-history block.
    pub past_bins: usize,
    /// Length of the block starting at `t0` one week earlier (s).
    pub week_seconds: usize,
    pub week_bins: usize,
    /// Forecast horizon (s).
    pub horizon: usize,
    /// Output steps per device over the horizon.
    pub output_steps: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            devices: 0,
            past_seconds: 3600,
            past_bins: 60,
            week_seconds: 900,
            week_bins: 15,
            horizon: HORIZON,
            output_steps: 60,
        }
    }
}

impl FeatureLayout {
    pub fn for_devices(devices: usize) -> Self {
        Self { devices, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let divides = |len: usize, bins: usize| bins > 0 && len % bins == 0;
        if self.devices == 0
            || !divides(self.past_seconds, self.past_bins)
            || !divides(self.week_seconds, self.week_bins)
            || !divides(self.horizon, self.output_steps)
        {
            return arg(format!("inconsistent feature layout {self:?}"));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.devices * (self.past_bins + self.week_bins) + 3
    }

    pub fn output_len(&self) -> usize {
        self.devices * self.output_steps
    }

    pub fn step(&self) -> usize {
        self.horizon / self.output_steps
    }

    /// Earliest `t0` with a complete history.
    pub fn min_t0(&self) -> usize {
        WEEK.max(self.past_seconds)
    }

    /// Human-readable description of every input and output block.
    pub fn descriptor(&self) -> serde_json::Value {
        let past = self.devices * self.past_bins;
        let week = self.devices * self.week_bins;
        serde_json::json!({
            "inputs": self.input_len(),
            "outputs": self.output_len(),
            "blocks": [
                {
                    "name": "recent_states",
                    "offset": 0,
                    "len": past,
                    "order": "device-major",
                    "window": format!("[t0 - {}, t0)", self.past_seconds),
                    "pooling_seconds": self.past_seconds / self.past_bins,
                },
                {
                    "name": "week_ago_states",
                    "offset": past,
                    "len": week,
                    "order": "device-major",
                    "window": format!("[t0 - {WEEK}, t0 - {WEEK} + {})", self.week_seconds),
                    "pooling_seconds": self.week_seconds / self.week_bins,
                },
                { "name": "time_of_day_sin", "offset": past + week, "len": 1, "formula": "sin(2 pi tau / 86400)" },
                { "name": "time_of_day_cos", "offset": past + week + 1, "len": 1, "formula": "cos(2 pi tau / 86400)" },
                { "name": "weekday", "offset": past + week + 2, "len": 1, "formula": "Mon 0, Tue 0.25, ..., Fri 1; weekend 1" },
            ],
            "output": {
                "order": "device-major",
                "window": format!("[t0, t0 + {})", self.horizon),
                "step_seconds": self.step(),
                "meaning": "mean normalized device state per step",
            },
        })
    }
}

/// Time-of-day and weekday features of a UTC timestamp.
pub fn time_features(timestamp: i64) -> [f64; 3] {
    let tau = timestamp.rem_euclid(SECONDS_PER_DAY as i64) as f64;
    let phase = 2.0 * std::f64::consts::PI * tau / SECONDS_PER_DAY as f64;
    let wd = weekday(timestamp).min(4) as f64 / 4.0;
    [phase.sin(), phase.cos(), wd]
}

/// Input vector for a forecast starting at sample `t0`.
pub fn build_features(timeline: &StateTimeline, start_timestamp: i64, t0: usize, layout: &FeatureLayout) -> Result<Vec<f64>> {
    layout.validate()?;
    if timeline.devices() != layout.devices {
        return Err(Error::Dimension(format!(
            "timeline has {} devices, layout {}",
            timeline.devices(),
            layout.devices
        )));
    }
    if t0 < layout.min_t0() || t0 > timeline.len() {
        return arg(format!(
            "t0 = {t0} needs history over [t0 - {}, t0) inside {} samples",
            layout.min_t0(),
            timeline.len()
        ));
    }
    let mut x = Vec::with_capacity(layout.input_len());
    let pool = layout.past_seconds / layout.past_bins;
    for d in 0..layout.devices {
        let a = t0 - layout.past_seconds;
        x.extend((0..layout.past_bins).map(|k| timeline.mean(d, a + k * pool, a + (k + 1) * pool)));
    }
    let pool = layout.week_seconds / layout.week_bins;
    for d in 0..layout.devices {
        let a = t0 - WEEK;
        x.extend((0..layout.week_bins).map(|k| timeline.mean(d, a + k * pool, a + (k + 1) * pool)));
    }
    x.extend(time_features(start_timestamp + t0 as i64));
    debug_assert!(x.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    Ok(x)
}

/// Training target for a forecast starting at `t0`: mean normalized state
/// per output step and device.
pub fn build_target(timeline: &StateTimeline, t0: usize, layout: &FeatureLayout) -> Result<Vec<f64>> {
    if t0 + layout.horizon > timeline.len() {
        return arg(format!("target window at t0 = {t0} runs past the series end"));
    }
    let step = layout.step();
    let mut y = Vec::with_capacity(layout.output_len());
    for d in 0..layout.devices {
        y.extend((0..layout.output_steps).map(|k| timeline.mean(d, t0 + k * step, t0 + (k + 1) * step)));
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub t0: Vec<usize>,
}

/// Feature/target pairs for every `t0` in `[from, to)` on the given stride;
/// with `workdays_only`, `t0` on Saturdays and Sundays is skipped.
pub fn build_dataset(
    timeline: &StateTimeline,
    start_timestamp: i64,
    layout: &FeatureLayout,
    from: usize,
    to: usize,
    stride: usize,
    workdays_only: bool,
) -> Result<Dataset> {
    if stride == 0 {
        return arg("stride must be positive");
    }
    let from = from.max(layout.min_t0());
    let to = to.min((timeline.len() + 1).saturating_sub(layout.horizon));
    let t0: Vec<usize> = (from..to)
        .step_by(stride)
        .filter(|&t| !workdays_only || weekday(start_timestamp + t as i64) < 5)
        .collect();
    if t0.is_empty() {
        return Err(Error::Training(format!("no training windows in [{from}, {to})")));
    }
    let mut inputs = Array2::zeros((t0.len(), layout.input_len()));
    let mut targets = Array2::zeros((t0.len(), layout.output_len()));
    for (i, &t) in t0.iter().enumerate() {
        inputs.row_mut(i).assign(&Array1::from(build_features(timeline, start_timestamp, t, layout)?));
        targets.row_mut(i).assign(&Array1::from(build_target(timeline, t, layout)?));
    }
    Ok(Dataset { inputs, targets, t0 })
}

/// Trained network together with what is needed to use it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub version: u32,
    pub layout: FeatureLayout,
    /// Per-device state normalization.
    pub scale: Vec<f64>,
    pub network: Mlp,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl ForecastModel {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(reader: R) -> Result<Self> {
        let m: ForecastModel = serde_json::from_reader(reader)?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!("unsupported checkpoint version {}", m.version)));
        }
        m.layout.validate()?;
        m.network.validate()?;
        if m.network.input_len() != m.layout.input_len() || m.network.output_len() != m.layout.output_len() {
            return Err(Error::Input("checkpoint network does not match its feature layout".into()));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct ForecastResult {
    /// Switching probabilities over the horizon (one row per second).
    pub block: StateChangesMatrix,
    pub power: PowerSeries,
    pub epsilon: Vec6,
    /// Network output: mean normalized state per step and device.
    pub states: Array2<f64>,
}

/// Forward pass, differentiation and reconstruction of one horizon.
///
/// `last_state` holds the normalized device states at `t0 - 1`; the first
/// change of every device is taken relative to it. The forecast is the
/// last measured power vector plus the profile contributions of changes
/// above the reconstruction threshold.
pub fn predict_and_reconstruct(
    model: &ForecastModel,
    features: &[f64],
    profiles: &[DeviceProfile],
    last_state: &[f64],
    last_measured: Vec6,
    start_timestamp: i64,
) -> Result<ForecastResult> {
    predict_with_threshold(
        model,
        features,
        profiles,
        last_state,
        last_measured,
        start_timestamp,
        DEFAULT_RECONSTRUCTION_THRESHOLD,
    )
}

/// As [`predict_and_reconstruct`] with an explicit reconstruction threshold.
pub fn predict_with_threshold(
    model: &ForecastModel,
    features: &[f64],
    profiles: &[DeviceProfile],
    last_state: &[f64],
    last_measured: Vec6,
    start_timestamp: i64,
    threshold: f64,
) -> Result<ForecastResult> {
    let layout = &model.layout;
    if profiles.len() != layout.devices || last_state.len() != layout.devices {
        return Err(Error::Dimension(format!(
            "model for {} devices got {} profiles and {} states",
            layout.devices,
            profiles.len(),
            last_state.len()
        )));
    }
    let out = model.network.predict_one(features)?;
    let mut states = Array2::zeros((layout.output_steps, layout.devices));
    for d in 0..layout.devices {
        for k in 0..layout.output_steps {
            states[[k, d]] = out[d * layout.output_steps + k];
        }
    }
    forecast_from_states(&states, layout, &model.scale, profiles, last_state, last_measured, start_timestamp, threshold)
        .map(|(block, power)| ForecastResult {
            block,
            power,
            epsilon: last_measured,
            states,
        })
}

/// Upsamples per-step states to seconds, differentiates them and
/// reconstructs the power over the horizon.
#[allow(clippy::too_many_arguments)]
pub fn forecast_from_states(
    states: &Array2<f64>,
    layout: &FeatureLayout,
    scale: &[f64],
    profiles: &[DeviceProfile],
    last_state: &[f64],
    last_measured: Vec6,
    start_timestamp: i64,
    threshold: f64,
) -> Result<(StateChangesMatrix, PowerSeries)> {
    let step = layout.step();
    let mut per_second = Array2::zeros((layout.horizon, layout.devices));
    for t in 0..layout.horizon {
        for d in 0..layout.devices {
            per_second[[t, d]] = states[[t / step, d]] * scale[d];
        }
    }
    let initial: Vec<f64> = last_state.iter().zip(scale).map(|(s, k)| s * k).collect();
    let block = differentiate_states(&per_second, &initial, StateKind::Probabilistic)?;
    let mut power = reconstruct_with_threshold(
        &block,
        profiles,
        Epsilon::Constant(last_measured),
        layout.horizon,
        threshold,
    )?;
    power = PowerSeries::new(start_timestamp, power.into_samples())?;
    Ok((block, power))
}
