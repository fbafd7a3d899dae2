//! ON/OFF event detection as strict local extrema of the total active-power
//! derivative.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::ingest::DerivativeSeries;
use crate::model::Vec6;

pub const DEFAULT_THRESHOLD: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Derivative index: the jump happens between samples `t` and `t + 1`.
    pub t: usize,
    pub kind: EventKind,
    /// Six-channel derivative at the event time (W/s).
    pub signature: Vec6,
}

impl Event {
    /// Index of the first power sample that includes the switching.
    pub fn switch_sample(&self) -> usize {
        self.t + 1
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventSet {
    pub events: Vec<Event>,
    pub threshold: f64,
}

impl EventSet {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> + '_ {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Writes `t,kind,dP0..dP5` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "kind", "dP0", "dP1", "dP2", "dP3", "dP4", "dP5"])?;
        for e in &self.events {
            let mut rec = vec![
                e.t.to_string(),
                match e.kind {
                    EventKind::On => "ON".to_string(),
                    EventKind::Off => "OFF".to_string(),
                },
            ];
            rec.extend(e.signature.0.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Applies the peak criterion to every interior derivative sample.
///
/// `t` is an ON-event iff `d(t-1) < d(t) > d(t+1)` and `d(t) >= threshold`;
/// OFF-events mirror this with reversed signs. Plateaus never qualify.
pub fn detect_events(deriv: &DerivativeSeries, threshold: f64) -> Result<EventSet> {
    if !(threshold > 0.0) {
        return arg(format!("detection threshold must be positive, got {threshold}"));
    }
    let total = &deriv.total;
    if total.len() < 3 {
        return arg(format!(
            "event detection needs at least 3 derivative samples, got {}",
            total.len()
        ));
    }
    let events = total
        .windows(3)
        .enumerate()
        .filter_map(|(i, w)| {
            let t = i + 1;
            let kind = if w[0] < w[1] && w[2] < w[1] && w[1] >= threshold {
                EventKind::On
            } else if w[0] > w[1] && w[2] > w[1] && w[1] <= -threshold {
                EventKind::Off
            } else {
                return None;
            };
            Some(Event {
                t,
                kind,
                signature: deriv.values[t],
            })
        })
        .collect();
    Ok(EventSet { events, threshold })
}
