//! Labeled synthetic building scenarios: device fleets with known profiles,
//! weekly schedules, a drifting base load and Gaussian noise.
//!
//! The aggregate is produced by the same forward model used for
//! reconstruction, so generated truth files are exact oracles for the rest of
//! the pipeline.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SECONDS_PER_DAY;
use crate::model::{
    reconstruct, DeviceProfile, Epsilon, PowerSeries, StateChangesMatrix, Vec6, ACTIVE_CHANNELS,
};

/// Monday 2019-01-07 00:00:00 UTC.
pub const DEFAULT_START: i64 = 1_546_819_200;

/// Profile archetypes observed in measured buildings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProfileShape {
    /// Constant level from the first second.
    Step,
    /// Overshoot at switch-on decaying exponentially to the stable level.
    ExpSettle { overshoot: f64, tau: f64 },
    /// Constant level with a superimposed oscillation.
    Oscillating { depth: f64, period: f64 },
    /// Decaying level with short periodic spikes.
    DecayingSpikes {
        overshoot: f64,
        tau: f64,
        every: usize,
        height: f64,
    },
}

impl ProfileShape {
    /// Multiplier of the stable amplitude `k` seconds after switch-on.
    pub fn factor(&self, k: usize) -> f64 {
        let x = k as f64;
        match *self {
            ProfileShape::Step => 1.0,
            ProfileShape::ExpSettle { overshoot, tau } => 1.0 + overshoot * (-x / tau).exp(),
            ProfileShape::Oscillating { depth, period } => 1.0 + depth * (2.0 * PI * x / period).sin(),
            ProfileShape::DecayingSpikes {
                overshoot,
                tau,
                every,
                height,
            } => {
                let spike = if k > 0 && every > 0 && k % every == 0 { height } else { 0.0 };
                1.0 + overshoot * (-x / tau).exp() + spike
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// Fixed switch-on seconds (relative to the scenario start); each run
    /// lasts `run` seconds, or the profile length when absent.
    Explicit { on_times: Vec<usize>, run: Option<usize> },
    /// Weekly-periodic workday activations plus random extra activations.
    Weekly {
        /// Mean activations per workday.
        per_workday: f64,
        /// Share of workday activations that are random instead of periodic.
        random_fraction: f64,
        /// Mean random activations per weekend day.
        per_weekend_day: f64,
        /// Working hours `[start, end)` in hours of the day.
        hours: (f64, f64),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub shape: ProfileShape,
    /// Stable-state level per channel.
    pub amplitude: Vec6,
    /// Profile length in seconds; runs last exactly this long.
    pub duration: usize,
    pub schedule: Schedule,
}

impl DeviceSpec {
    pub fn profile(&self, id: usize) -> Result<DeviceProfile> {
        let dynamic: Vec<Vec6> = (0..self.duration)
            .map(|k| self.amplitude * self.shape.factor(k))
            .collect();
        let first = dynamic.first().copied().unwrap_or(Vec6::ZERO);
        DeviceProfile::from_dynamic(id, first, dynamic, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub start_timestamp: i64,
    /// Length in seconds.
    pub duration: usize,
    pub devices: Vec<DeviceSpec>,
    /// Mean always-on level per channel.
    pub base_load: Vec6,
    /// Relative amplitude of the hourly piecewise-linear base-load drift.
    pub base_variation: f64,
    /// Standard deviation of the i.i.d. Gaussian noise per channel.
    pub noise_sigma: Vec6,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub series: PowerSeries,
    pub truth: StateChangesMatrix,
    pub profiles: Vec<DeviceProfile>,
    /// Always-on component without noise.
    pub base: PowerSeries,
}

/// Day of the week of a UTC timestamp, Monday = 0.
pub fn weekday(timestamp: i64) -> u32 {
    use chrono::{Datelike, TimeZone, Utc};
    Utc.timestamp_opt(timestamp, 0)
        .single()
        .map(|d| d.weekday().num_days_from_monday())
        .unwrap_or(0)
}

pub fn is_workday(timestamp: i64) -> bool {
    weekday(timestamp) < 5
}

fn device_runs(spec: &DeviceSpec, index: usize, sc: &Scenario) -> Result<Vec<(usize, usize)>> {
    let run_len = spec.duration;
    match &spec.schedule {
        Schedule::Explicit { on_times, run } => {
            let run = run.unwrap_or(run_len);
            let mut times = on_times.clone();
            times.sort_unstable();
            let mut runs = Vec::new();
            let mut free_from = 0;
            for t in times {
                if t < free_from {
                    return Err(Error::Generation(format!(
                        "device {index} switched on at {t}s while still running"
                    )));
                }
                if t + 1 >= sc.duration {
                    continue;
                }
                runs.push((t, run));
                free_from = t + run + 1;
            }
            Ok(runs)
        }
        Schedule::Weekly {
            per_workday,
            random_fraction,
            per_weekend_day,
            hours,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ (0xD5A1 + index as u64 * 7919));
            let (h0, h1) = (hours.0 * 3600.0, hours.1 * 3600.0);
            let window = |rng: &mut ChaCha8Rng, whole_day: bool| -> usize {
                if whole_day {
                    rng.random_range(0..SECONDS_PER_DAY)
                } else {
                    rng.random_range(h0..h1.max(h0 + 1.0)) as usize
                }
            };
            // Weekly template: activation offsets per weekday Monday..Friday.
            let periodic = ((1.0 - random_fraction) * per_workday).round() as usize;
            let mut template: Vec<Vec<usize>> = Vec::with_capacity(5);
            for _ in 0..5 {
                let mut day: Vec<usize> = Vec::new();
                let mut tries = 0;
                while day.len() < periodic && tries < 100 * (periodic + 1) {
                    tries += 1;
                    let t = window(&mut rng, false);
                    if t + run_len + 1 < SECONDS_PER_DAY && fits(&day, t, run_len) {
                        day.push(t);
                    }
                }
                day.sort_unstable();
                template.push(day);
            }
            let random_workday = Poisson::new(random_fraction * per_workday).ok();
            let random_weekend = Poisson::new(*per_weekend_day).ok();
            let days = sc.duration.div_ceil(SECONDS_PER_DAY);
            let mut starts: Vec<usize> = Vec::new();
            for d in 0..days {
                let day0 = d * SECONDS_PER_DAY;
                let wd = weekday(sc.start_timestamp + day0 as i64) as usize;
                let mut day: Vec<usize> = if wd < 5 { template[wd].clone() } else { Vec::new() };
                let extra = if wd < 5 { random_workday } else { random_weekend };
                let n = extra.map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
                for _ in 0..n {
                    let t = window(&mut rng, wd >= 5);
                    if t + run_len + 1 < SECONDS_PER_DAY && fits(&day, t, run_len) {
                        day.push(t);
                    }
                }
                day.sort_unstable();
                starts.extend(day.into_iter().map(|t| day0 + t));
            }
            Ok(starts
                .into_iter()
                .filter(|&t| t >= 1 && t + 1 < sc.duration)
                .map(|t| (t, run_len))
                .collect())
        }
    }
}

fn fits(day: &[usize], t: usize, run: usize) -> bool {
    // Keep a quiet second between runs so ON and OFF never share a sample.
    day.iter().all(|&s| t > s + run + 1 || t + run + 1 < s)
}

fn base_series(sc: &Scenario) -> Result<PowerSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0xBA5E);
    let hours = sc.duration / 3600 + 2;
    let knots: Vec<f64> = (0..hours)
        .map(|_| 1.0 + sc.base_variation * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let samples = (0..sc.duration)
        .map(|t| {
            let h = t / 3600;
            let frac = (t % 3600) as f64 / 3600.0;
            sc.base_load * (knots[h] * (1.0 - frac) + knots[h + 1] * frac)
        })
        .collect();
    PowerSeries::new(sc.start_timestamp, samples)
}

pub fn generate(sc: &Scenario) -> Result<Generated> {
    if sc.duration < 2 {
        return Err(Error::Generation("scenario must last at least 2 s".into()));
    }
    for (i, d) in sc.devices.iter().enumerate() {
        if d.duration == 0 {
            return Err(Error::Generation(format!("device {i} has zero duration")));
        }
        if d.amplitude.0[..ACTIVE_CHANNELS].iter().any(|a| *a < 0.0) {
            return Err(Error::Generation(format!("device {i} has negative active amplitude")));
        }
    }
    let profiles: Vec<DeviceProfile> = sc
        .devices
        .iter()
        .enumerate()
        .map(|(i, d)| d.profile(i))
        .collect::<Result<_>>()?;
    let mut triplets = Vec::new();
    for (i, spec) in sc.devices.iter().enumerate() {
        for (on, run) in device_runs(spec, i, sc)? {
            triplets.push((on, i, 1i8));
            if on + run < sc.duration {
                triplets.push((on + run, i, -1i8));
            }
        }
    }
    let truth = StateChangesMatrix::discrete(sc.duration, sc.devices.len(), triplets)?;
    let base = base_series(sc)?;
    let clean = reconstruct(&truth, &profiles, Epsilon::Series(&base), sc.duration)?;

    let series = if sc.noise_sigma.0.iter().all(|s| *s == 0.0) {
        clean
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x0015E);
        let normals: Vec<Option<Normal<f64>>> = sc
            .noise_sigma
            .0
            .iter()
            .map(|&s| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite sigma")))
            .collect();
        let samples = clean
            .into_samples()
            .into_iter()
            .map(|mut v| {
                for (c, n) in normals.iter().enumerate() {
                    if let Some(n) = n {
                        v[c] += n.sample(&mut rng);
                    }
                }
                v
            })
            .collect();
        PowerSeries::new(sc.start_timestamp, samples)?
    };
    Ok(Generated {
        series,
        truth,
        profiles,
        base,
    })
}

/// Summary statistics of the total active power, in kW and kWh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub p_min_kw: f64,
    pub p_max_kw: f64,
    pub p_mean_kw: f64,
    pub energy_per_day_kwh: f64,
}

pub fn series_stats(series: &PowerSeries) -> SeriesStats {
    let total = series.total_active();
    let n = total.len() as f64;
    let mean = total.iter().sum::<f64>() / n;
    SeriesStats {
        p_min_kw: total.iter().copied().fold(f64::INFINITY, f64::min) / 1000.0,
        p_max_kw: total.iter().copied().fold(f64::NEG_INFINITY, f64::max) / 1000.0,
        p_mean_kw: mean / 1000.0,
        energy_per_day_kwh: mean * 24.0 / 1000.0,
    }
}

/// Named scenario families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// About 50 devices calibrated to a mid-sized commercial building
    /// (mean ~22 kW, minimum ~2.3 kW, peaks near 100 kW).
    LargeOffice,
    /// A small workshop with a configurable number of devices.
    Office,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub days: usize,
    /// Device count (`office` preset only).
    pub devices: usize,
    pub random_fraction: f64,
    /// Noise standard deviation per channel (W / var).
    pub noise: f64,
    pub start_timestamp: i64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Office,
            days: 14,
            devices: 10,
            random_fraction: 0.2,
            noise: 10.0,
            start_timestamp: DEFAULT_START,
        }
    }
}

impl ScenarioConfig {
    pub fn build(&self, seed: u64) -> Scenario {
        match self.preset {
            Preset::LargeOffice => large_office(self.days, self.random_fraction, self.noise, self.start_timestamp, seed),
            Preset::Office => office(self.devices, self.days, self.random_fraction, self.noise, self.start_timestamp, seed),
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> ProfileShape {
    match rng.random_range(0..10) {
        0..=3 => ProfileShape::ExpSettle {
            overshoot: rng.random_range(0.3..1.0),
            tau: rng.random_range(5.0..40.0),
        },
        4..=6 => ProfileShape::Step,
        7..=8 => ProfileShape::Oscillating {
            depth: rng.random_range(0.05..0.2),
            period: rng.random_range(20.0..120.0),
        },
        _ => ProfileShape::DecayingSpikes {
            overshoot: rng.random_range(0.2..0.6),
            tau: rng.random_range(50.0..300.0),
            every: rng.random_range(30..90),
            height: rng.random_range(0.1..0.3),
        },
    }
}

/// Random six-channel amplitude with total active power `total` (W):
/// either balanced three-phase or single-phase, with a device-specific
/// reactive share.
fn random_amplitude(rng: &mut ChaCha8Rng, total: f64) -> Vec6 {
    let q = rng.random_range(0.05..0.9);
    if rng.random_bool(0.35) {
        let phase = rng.random_range(0..3);
        let mut a = Vec6::ZERO;
        a[phase] = total;
        a[phase + 3] = total * q;
        a
    } else {
        let w: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
        let s: f64 = w.iter().sum();
        let mut a = Vec6::ZERO;
        for p in 0..3 {
            a[p] = total * w[p] / s;
            a[p + 3] = a[p] * q * rng.random_range(0.9..1.1);
        }
        a
    }
}

/// Small building: `n` devices between 0.8 and 6 kW with run-times from a
/// few minutes to an hour.
pub fn office(n: usize, days: usize, random_fraction: f64, noise: f64, start: i64, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let devices = (0..n)
        .map(|_| {
            let total = rng.random_range(800.0..6000.0);
            let duration = rng.random_range(120..3600);
            DeviceSpec {
                shape: random_shape(&mut rng),
                amplitude: random_amplitude(&mut rng, total),
                duration,
                schedule: Schedule::Weekly {
                    per_workday: rng.random_range(2.0..8.0),
                    random_fraction,
                    per_weekend_day: rng.random_range(0.0..1.0),
                    hours: (6.0, 19.0),
                },
            }
        })
        .collect();
    Scenario {
        start_timestamp: start,
        duration: days * SECONDS_PER_DAY,
        devices,
        base_load: Vec6([400.0, 400.0, 400.0, 120.0, 120.0, 120.0]),
        base_variation: 0.1,
        noise_sigma: Vec6::splat(noise),
        seed,
    }
}

/// Calibration targets of the large-office preset (total active power, W).
pub const LARGE_OFFICE_MEAN: f64 = 22_270.0;
pub const LARGE_OFFICE_MAX: f64 = 98_950.0;

/// About 50 devices calibrated against the statistics of a measured
/// mid-sized commercial building.
///
/// Device amplitudes are scaled so the noise-free mean matches
/// [`LARGE_OFFICE_MEAN`]; among up to 32 fleet variants the first whose
/// noise-free peak lies within 3% of [`LARGE_OFFICE_MAX`] is kept (the closest
/// otherwise).
pub fn large_office(days: usize, random_fraction: f64, noise: f64, start: i64, seed: u64) -> Scenario {
    let mut best: Option<(f64, Scenario)> = None;
    for variant in 0..32u64 {
        let mut sc = large_office_fleet(days, random_fraction, noise, start, seed.wrapping_add(variant << 32));
        let miss = match calibrate(&mut sc) {
            Some(peak) => (peak / LARGE_OFFICE_MAX - 1.0).abs(),
            None => f64::INFINITY,
        };
        if miss <= 0.03 {
            return sc;
        }
        if best.as_ref().is_none_or(|(m, _)| miss < *m) {
            best = Some((miss, sc));
        }
    }
    best.map(|(_, sc)| sc).expect("at least one variant")
}

/// Scales device amplitudes to the target mean; returns the resulting
/// noise-free peak of the total active power.
fn calibrate(sc: &mut Scenario) -> Option<f64> {
    let len = sc.duration;
    let mut devices = vec![0.0; len];
    for (i, spec) in sc.devices.iter().enumerate() {
        let shape: Vec<f64> = (0..spec.duration)
            .map(|k| spec.amplitude.total_active() * spec.shape.factor(k))
            .collect();
        for (on, run) in device_runs(spec, i, sc).ok()? {
            for (k, slot) in devices[on..(on + run).min(len)].iter_mut().enumerate() {
                *slot += shape[k.min(shape.len() - 1)];
            }
        }
    }
    let base = base_series(sc).ok()?.total_active();
    let n = len as f64;
    let dev_mean = devices.iter().sum::<f64>() / n;
    let base_mean = base.iter().sum::<f64>() / n;
    if dev_mean <= 0.0 || base_mean >= LARGE_OFFICE_MEAN {
        return None;
    }
    let scale = (LARGE_OFFICE_MEAN - base_mean) / dev_mean;
    for d in &mut sc.devices {
        d.amplitude = d.amplitude * scale;
    }
    Some(
        base.iter()
            .zip(&devices)
            .map(|(b, d)| b + scale * d)
            .fold(f64::NEG_INFINITY, f64::max),
    )
}

fn large_office_fleet(days: usize, random_fraction: f64, noise: f64, start: i64, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut devices = Vec::new();
    // Long-running single-phase loads (lighting, ventilation).
    for _ in 0..6 {
        let total = rng.random_range(1500.0..3500.0);
        devices.push(DeviceSpec {
            shape: ProfileShape::Oscillating {
                depth: rng.random_range(0.03..0.1),
                period: rng.random_range(60.0..300.0),
            },
            amplitude: random_amplitude(&mut rng, total),
            duration: rng.random_range(10_000..30_000),
            schedule: Schedule::Weekly {
                per_workday: 1.0,
                random_fraction: 0.0,
                per_weekend_day: 0.3,
                hours: (5.0, 8.0),
            },
        });
    }
    // Production machines with pronounced start-up transients.
    for _ in 0..10 {
        let total = rng.random_range(4000.0..12_000.0);
        devices.push(DeviceSpec {
            shape: ProfileShape::ExpSettle {
                overshoot: rng.random_range(0.8..1.8),
                tau: rng.random_range(5.0..30.0),
            },
            amplitude: random_amplitude(&mut rng, total),
            duration: rng.random_range(600..5400),
            schedule: Schedule::Weekly {
                per_workday: rng.random_range(2.0..6.0),
                random_fraction,
                per_weekend_day: 0.1,
                hours: (6.0, 18.0),
            },
        });
    }
    // Workshop tools and auxiliary loads.
    for _ in 0..34 {
        let total = rng.random_range(500.0..5000.0);
        devices.push(DeviceSpec {
            shape: random_shape(&mut rng),
            amplitude: random_amplitude(&mut rng, total),
            duration: rng.random_range(60..2400),
            schedule: Schedule::Weekly {
                per_workday: rng.random_range(3.0..14.0),
                random_fraction,
                per_weekend_day: rng.random_range(0.0..1.5),
                hours: (6.0, 18.0),
            },
        });
    }
    Scenario {
        start_timestamp: start,
        duration: days * SECONDS_PER_DAY,
        devices,
        base_load: Vec6([900.0, 850.0, 900.0, 300.0, 280.0, 300.0]),
        base_variation: 0.12,
        noise_sigma: Vec6::splat(noise),
        seed,
    }
}
