//! Shared data types of the pipeline and the aggregate-signal forward model.
//!
//! The aggregate power at second `t` is modelled as the superposition of
//! device profiles placed at their switch-on times, a stable-state level held
//! until the matching switch-off, and an always-on component `epsilon`.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Number of measured channels: three active phases followed by three
/// reactive phases.
pub const CHANNELS: usize = 6;

/// Number of leading active-power channels.
pub const ACTIVE_CHANNELS: usize = 3;

/// One six-channel power (or power derivative) vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec6(pub [f64; CHANNELS]);

impl Vec6 {
    pub const ZERO: Vec6 = Vec6([0.0; CHANNELS]);

    pub fn splat(v: f64) -> Self {
        Vec6([v; CHANNELS])
    }

    /// Sum of the three active-power phases.
    pub fn total_active(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    /// Sum of the three reactive-power phases.
    pub fn total_reactive(&self) -> f64 {
        self.0[3] + self.0[4] + self.0[5]
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &Vec6) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vec6 {
        Vec6(self.0.map(f))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<[f64; CHANNELS]> for Vec6 {
    fn from(v: [f64; CHANNELS]) -> Self {
        Vec6(v)
    }
}

impl Index<usize> for Vec6 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vec6 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for Vec6 {
    type Output = Vec6;
    fn add(mut self, rhs: Vec6) -> Vec6 {
        self += rhs;
        self
    }
}

impl AddAssign for Vec6 {
    fn add_assign(&mut self, rhs: Vec6) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl Sub for Vec6 {
    type Output = Vec6;
    fn sub(mut self, rhs: Vec6) -> Vec6 {
        self -= rhs;
        self
    }
}

impl SubAssign for Vec6 {
    fn sub_assign(&mut self, rhs: Vec6) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a -= b;
        }
    }
}

impl Neg for Vec6 {
    type Output = Vec6;
    fn neg(self) -> Vec6 {
        self.map(|v| -v)
    }
}

impl Mul<f64> for Vec6 {
    type Output = Vec6;
    fn mul(self, rhs: f64) -> Vec6 {
        self.map(|v| v * rhs)
    }
}

/// A gap-free, uniformly sampled 1 Hz six-channel power record.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSeries {
    start_timestamp: i64,
    samples: Vec<Vec6>,
}

impl PowerSeries {
    pub fn new(start_timestamp: i64, samples: Vec<Vec6>) -> Result<Self> {
        if samples.len() < 2 {
            return arg(format!(
                "a power series needs at least 2 samples, got {}",
                samples.len()
            ));
        }
        if let Some(t) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("non-finite sample at t={t}")));
        }
        Ok(Self {
            start_timestamp,
            samples,
        })
    }

    /// Constant series of length `len`.
    pub fn constant(start_timestamp: i64, value: Vec6, len: usize) -> Result<Self> {
        Self::new(start_timestamp, vec![value; len])
    }

    pub fn start_timestamp(&self) -> i64 {
        self.start_timestamp
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vec6] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Vec6> {
        self.samples
    }

    pub fn get(&self, t: usize) -> Vec6 {
        self.samples[t]
    }

    /// Wall-clock epoch seconds of sample `t`.
    pub fn timestamp(&self, t: usize) -> i64 {
        self.start_timestamp + t as i64
    }

    pub fn total_active(&self) -> Vec<f64> {
        self.samples.iter().map(Vec6::total_active).collect()
    }

    /// Sub-series over `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<PowerSeries> {
        if start >= end || end > self.len() {
            return arg(format!(
                "slice [{start}, {end}) outside series of length {}",
                self.len()
            ));
        }
        PowerSeries::new(
            self.timestamp(start),
            self.samples[start..end].to_vec(),
        )
    }

    /// Writes `timestamp,P0,..,P5` rows with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "P0", "P1", "P2", "P3", "P4", "P5"])?;
        for (t, s) in self.samples.iter().enumerate() {
            let mut rec = Vec::with_capacity(CHANNELS + 1);
            rec.push(self.timestamp(t).to_string());
            rec.extend(s.0.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-device dynamic profile together with its stable operating state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceProfile {
    pub id: usize,
    /// Profile length `d_i` in seconds.
    pub duration: usize,
    /// Six-channel switch-on signature (W/s) of the originating cluster.
    pub cluster_center: Vec6,
    pub stable_state: Vec6,
    pub dynamic: Vec<Vec6>,
}

#[derive(Deserialize)]
struct RawProfile {
    id: usize,
    duration: usize,
    cluster_center: Vec6,
    stable_state: Vec6,
    dynamic: Vec<Vec6>,
}

impl<'de> Deserialize<'de> for DeviceProfile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawProfile::deserialize(d)?;
        if raw.duration == 0 || raw.duration != raw.dynamic.len() {
            return Err(serde::de::Error::custom(format!(
                "profile {}: duration {} does not match dynamic length {}",
                raw.id,
                raw.duration,
                raw.dynamic.len()
            )));
        }
        Ok(DeviceProfile {
            id: raw.id,
            duration: raw.duration,
            cluster_center: raw.cluster_center,
            stable_state: raw.stable_state,
            dynamic: raw.dynamic,
        })
    }
}

impl DeviceProfile {
    /// Builds a profile from its dynamic part; the stable state is the last
    /// sample whose total active power exceeds `zero_tolerance`.
    pub fn from_dynamic(
        id: usize,
        cluster_center: Vec6,
        dynamic: Vec<Vec6>,
        zero_tolerance: f64,
    ) -> Result<Self> {
        if dynamic.is_empty() {
            return arg(format!("profile {id} has an empty dynamic part"));
        }
        if dynamic.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("profile {id} has non-finite samples")));
        }
        let stable_state = crate::profiles::stable_state_of(&dynamic, zero_tolerance).0;
        Ok(Self {
            id,
            duration: dynamic.len(),
            cluster_center,
            stable_state,
            dynamic,
        })
    }

    /// Value contributed `offset` seconds after switch-on while the device
    /// stays on.
    #[inline]
    pub fn value_at(&self, offset: usize) -> Vec6 {
        if offset < self.duration {
            self.dynamic[offset]
        } else {
            self.stable_state
        }
    }
}

pub fn write_profiles_json<W: Write>(profiles: &[DeviceProfile], writer: W) -> Result<()> {
    serde_json::to_writer_pretty(writer, profiles)?;
    Ok(())
}

pub fn read_profiles_json<R: Read>(reader: R) -> Result<Vec<DeviceProfile>> {
    let profiles: Vec<DeviceProfile> = serde_json::from_reader(reader)?;
    for (i, p) in profiles.iter().enumerate() {
        if p.id != i {
            return Err(Error::Input(format!(
                "profile at position {i} has id {}; ids must be 0..M-1 in order",
                p.id
            )));
        }
    }
    Ok(profiles)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateKind {
    /// Entries in {-1, +1}; every device column alternates ON/OFF.
    Discrete,
    /// Entries in [-1, 1], interpreted as switching probabilities.
    Probabilistic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateChange {
    pub t: usize,
    pub device: usize,
    pub value: f64,
}

/// Sparse `T x M` state-changes matrix. Entries are kept sorted by
/// `(t, device)` and never store zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct StateChangesMatrix {
    len: usize,
    devices: usize,
    kind: StateKind,
    entries: Vec<StateChange>,
}

impl StateChangesMatrix {
    pub fn empty(len: usize, devices: usize, kind: StateKind) -> Self {
        Self {
            len,
            devices,
            kind,
            entries: Vec::new(),
        }
    }

    pub fn new(
        len: usize,
        devices: usize,
        kind: StateKind,
        entries: impl IntoIterator<Item = StateChange>,
    ) -> Result<Self> {
        let mut entries: Vec<StateChange> =
            entries.into_iter().filter(|e| e.value != 0.0).collect();
        entries.sort_by_key(|e| (e.t, e.device));
        for w in entries.windows(2) {
            if w[0].t == w[1].t && w[0].device == w[1].device {
                return Err(Error::Input(format!(
                    "duplicate entry at t={}, device={}",
                    w[0].t, w[0].device
                )));
            }
        }
        for e in &entries {
            if e.t >= len || e.device >= devices {
                return Err(Error::Dimension(format!(
                    "entry (t={}, device={}) outside {len}x{devices}",
                    e.t, e.device
                )));
            }
            let ok = match kind {
                StateKind::Discrete => e.value == 1.0 || e.value == -1.0,
                StateKind::Probabilistic => (-1.0..=1.0).contains(&e.value),
            };
            if !ok {
                return Err(Error::Input(format!(
                    "value {} at (t={}, device={}) invalid for {kind:?} matrix",
                    e.value, e.t, e.device
                )));
            }
        }
        let m = Self {
            len,
            devices,
            kind,
            entries,
        };
        if kind == StateKind::Discrete {
            m.check_alternating()?;
        }
        Ok(m)
    }

    /// Discrete matrix from `(t, device, +1/-1)` triplets.
    pub fn discrete(
        len: usize,
        devices: usize,
        entries: impl IntoIterator<Item = (usize, usize, i8)>,
    ) -> Result<Self> {
        Self::new(
            len,
            devices,
            StateKind::Discrete,
            entries.into_iter().map(|(t, device, v)| StateChange {
                t,
                device,
                value: f64::from(v),
            }),
        )
    }

    fn check_alternating(&self) -> Result<()> {
        let mut state = vec![0i32; self.devices];
        for e in &self.entries {
            let s = &mut state[e.device];
            *s += e.value as i32;
            if !(0..=1).contains(s) {
                return Err(Error::Input(format!(
                    "device {} switched {} twice in a row at t={}",
                    e.device,
                    if e.value > 0.0 { "on" } else { "off" },
                    e.t
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    pub fn entries(&self) -> &[StateChange] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Entries of one device column in time order.
    pub fn column(&self, device: usize) -> impl Iterator<Item = &StateChange> + '_ {
        self.entries.iter().filter(move |e| e.device == device)
    }

    /// Dense `(T, M)` array with zeros elsewhere.
    pub fn densify(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.len, self.devices));
        for e in &self.entries {
            dense[[e.t, e.device]] = e.value;
        }
        dense
    }

    pub fn from_dense(dense: &Array2<f64>, kind: StateKind) -> Result<Self> {
        let (len, devices) = dense.dim();
        let entries = dense.indexed_iter().filter_map(|((t, device), &value)| {
            (value != 0.0).then_some(StateChange { t, device, value })
        });
        Self::new(len, devices, kind, entries)
    }

    /// Writes `t,device,value` triplets with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "device", "value"])?;
        for e in &self.entries {
            let value = match self.kind {
                StateKind::Discrete => format!("{}", e.value as i8),
                StateKind::Probabilistic => e.value.to_string(),
            };
            w.write_record([e.t.to_string(), e.device.to_string(), value])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        reader: R,
        len: usize,
        devices: usize,
        kind: StateKind,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k).ok_or_else(|| Error::Row {
                    line,
                    message: format!("expected 3 fields, got {}", rec.len()),
                })
            };
            let bad = |what: &str, v: &str| Error::Row {
                line,
                message: format!("cannot parse {what} `{v}`"),
            };
            let t = field(0)?;
            let d = field(1)?;
            let v = field(2)?;
            entries.push(StateChange {
                t: t.trim().parse().map_err(|_| bad("t", t))?,
                device: d.trim().parse().map_err(|_| bad("device", d))?,
                value: v.trim().parse().map_err(|_| bad("value", v))?,
            });
        }
        Self::new(len, devices, kind, entries)
    }
}

/// The always-on component added to a reconstruction.
#[derive(Clone, Copy, Debug)]
pub enum Epsilon<'a> {
    Constant(Vec6),
    Series(&'a PowerSeries),
}

impl Epsilon<'_> {
    fn at(&self, t: usize) -> Vec6 {
        match self {
            Epsilon::Constant(v) => *v,
            Epsilon::Series(s) => s.get(t),
        }
    }
}

/// Magnitude at or below which probabilistic entries are ignored.
pub const DEFAULT_RECONSTRUCTION_THRESHOLD: f64 = 0.1;

/// Reconstructs the aggregate power of length `len` from a state-changes
/// matrix. Probabilistic entries at or below
/// [`DEFAULT_RECONSTRUCTION_THRESHOLD`] in magnitude are skipped; use
/// [`reconstruct_with_threshold`] to change it.
pub fn reconstruct(
    states: &StateChangesMatrix,
    profiles: &[DeviceProfile],
    epsilon: Epsilon<'_>,
    len: usize,
) -> Result<PowerSeries> {
    reconstruct_with_threshold(
        states,
        profiles,
        epsilon,
        len,
        DEFAULT_RECONSTRUCTION_THRESHOLD,
    )
}

pub fn reconstruct_with_threshold(
    states: &StateChangesMatrix,
    profiles: &[DeviceProfile],
    epsilon: Epsilon<'_>,
    len: usize,
    threshold: f64,
) -> Result<PowerSeries> {
    if profiles.len() != states.devices() {
        return Err(Error::Dimension(format!(
            "{} profiles for {} device columns",
            profiles.len(),
            states.devices()
        )));
    }
    if len < 2 {
        return arg(format!("reconstruction length must be >= 2, got {len}"));
    }
    if let Epsilon::Series(s) = epsilon {
        if s.len() < len {
            return Err(Error::Dimension(format!(
                "epsilon series has {} samples, need {len}",
                s.len()
            )));
        }
    }
    let mut out: Vec<Vec6> = (0..len).map(|t| epsilon.at(t)).collect();
    accumulate(
        states.entries(),
        states.kind(),
        profiles,
        threshold,
        0,
        &mut out,
    );
    PowerSeries::new(0, out).map(|mut s| {
        if let Epsilon::Series(e) = epsilon {
            s.start_timestamp = e.start_timestamp();
        }
        s
    })
}

/// Adds the device contributions of `entries` (sorted by time) to
/// `out`, which covers seconds `[start, start + out.len())`.
///
/// Discrete entries: an ON plays the dynamic profile, then holds the stable
/// state until the device's next OFF, where the contribution drops to zero.
/// An OFF arriving before the dynamic part finished truncates it.
/// Probabilistic entries: a positive value `s` adds `s` times the profile
/// from its time to the end; a negative value adds `s` times the stable
/// state from its time to the end.
pub(crate) fn accumulate(
    entries: &[StateChange],
    kind: StateKind,
    profiles: &[DeviceProfile],
    threshold: f64,
    start: usize,
    out: &mut [Vec6],
) {
    let end = start + out.len();
    // (begin, end, weight) intervals of constant stable-state contribution.
    let mut steps: Vec<(usize, usize, Vec6)> = Vec::new();

    let next_off: Vec<usize> = match kind {
        StateKind::Discrete => {
            let mut next = vec![usize::MAX; entries.len()];
            let mut pending = vec![usize::MAX; profiles.len()];
            for (k, e) in entries.iter().enumerate().rev() {
                if e.value < 0.0 {
                    pending[e.device] = e.t;
                } else {
                    next[k] = pending[e.device];
                }
            }
            next
        }
        StateKind::Probabilistic => vec![usize::MAX; entries.len()],
    };

    for (k, e) in entries.iter().enumerate() {
        let profile = &profiles[e.device];
        match kind {
            StateKind::Discrete => {
                if e.value < 0.0 {
                    continue;
                }
                let stop = next_off[k].min(end);
                add_dynamic(profile, e.t, 1.0, start, stop, out);
                let stable_from = (e.t + profile.duration).max(start);
                if stable_from < stop {
                    steps.push((stable_from, stop, profile.stable_state));
                }
            }
            StateKind::Probabilistic => {
                if e.value > threshold {
                    add_dynamic(profile, e.t, e.value, start, end, out);
                    let stable_from = (e.t + profile.duration).max(start);
                    if stable_from < end {
                        steps.push((stable_from, end, profile.stable_state * e.value));
                    }
                } else if e.value < -threshold {
                    let from = e.t.max(start);
                    if from < end {
                        steps.push((from, end, profile.stable_state * e.value));
                    }
                }
            }
        }
    }
    add_steps(&steps, start, out);
}

fn add_dynamic(
    profile: &DeviceProfile,
    on: usize,
    scale: f64,
    start: usize,
    stop: usize,
    out: &mut [Vec6],
) {
    let from = on.max(start);
    let to = (on + profile.duration).min(stop);
    for t in from..to {
        let v = profile.dynamic[t - on];
        out[t - start] += if scale == 1.0 { v } else { v * scale };
    }
}

/// Sweeps the interval boundaries and re-sums the active set at each one, so
/// long series do not accumulate cancellation drift.
fn add_steps(steps: &[(usize, usize, Vec6)], start: usize, out: &mut [Vec6]) {
    if steps.is_empty() {
        return;
    }
    let mut bounds: Vec<(usize, bool, usize)> = Vec::with_capacity(steps.len() * 2);
    for (i, (b, e, _)) in steps.iter().enumerate() {
        bounds.push((*b, true, i));
        bounds.push((*e, false, i));
    }
    bounds.sort_unstable();
    let mut active: BTreeSet<usize> = BTreeSet::new();
    let mut k = 0;
    while k < bounds.len() {
        let t = bounds[k].0;
        while k < bounds.len() && bounds[k].0 == t {
            let (_, open, i) = bounds[k];
            if open {
                active.insert(i);
            } else {
                active.remove(&i);
            }
            k += 1;
        }
        if active.is_empty() || k == bounds.len() {
            continue;
        }
        let next = bounds[k].0;
        let mut level = Vec6::ZERO;
        for &i in &active {
            level += steps[i].2;
        }
        for v in &mut out[t - start..next - start] {
            *v += level;
        }
    }
}
