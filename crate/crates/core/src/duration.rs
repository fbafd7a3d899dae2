//! ON-duration modelling: ON/OFF pairing per cluster, one-dimensional
//! Gaussian mixtures fitted by EM, BIC-driven component selection and the
//! split of clusters into run-time groups.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::events::EventKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationSample {
    /// Derivative index of the ON-event.
    pub on_time: usize,
    /// Seconds until the paired OFF-event.
    pub duration: usize,
}

/// Pairs each ON-event with the earliest later OFF-event of the same
/// cluster that has not been consumed yet. Unpaired events are dropped.
///
/// `events` must be time-ordered `(t, kind)` pairs of a single cluster.
pub fn pair_on_off(events: &[(usize, EventKind)]) -> Vec<DurationSample> {
    let offs: Vec<usize> = events
        .iter()
        .filter(|(_, k)| *k == EventKind::Off)
        .map(|(t, _)| *t)
        .collect();
    let mut next_off = 0;
    let mut out = Vec::new();
    for &(t, kind) in events {
        if kind != EventKind::On {
            continue;
        }
        while next_off < offs.len() && offs[next_off] <= t {
            next_off += 1;
        }
        if next_off == offs.len() {
            break;
        }
        out.push(DurationSample {
            on_time: t,
            duration: offs[next_off] - t,
        });
        next_off += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

impl GmmComponent {
    pub fn density(&self, x: f64) -> f64 {
        (-(x - self.mean).powi(2) / (2.0 * self.variance)).exp() / (2.0 * PI * self.variance).sqrt()
    }

    fn log_weighted_density(&self, x: f64) -> f64 {
        self.weight.ln() - 0.5 * (2.0 * PI * self.variance).ln() - (x - self.mean).powi(2) / (2.0 * self.variance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Number of EM steps whose log-likelihood decreased.
    pub monotonicity_violations: usize,
    /// Number of M-steps where a variance had to be raised to the floor.
    pub variance_clamps: usize,
}

impl GmmModel {
    pub fn m(&self) -> usize {
        self.components.len()
    }

    /// Free parameters of a 1-D mixture: m means, m variances, m - 1 weights.
    pub fn parameter_count(&self) -> usize {
        3 * self.m() - 1
    }

    pub fn bic(&self, n: usize) -> f64 {
        0.5 * self.parameter_count() as f64 * (n as f64).ln() - self.log_likelihood
    }

    /// Index of the component with the largest weighted density at `x`
    /// (lowest index on ties).
    pub fn classify(&self, x: f64) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in self.components.iter().enumerate() {
            let v = c.log_weighted_density(x);
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    }

    pub fn log_likelihood_of(&self, data: &[f64]) -> f64 {
        data.iter().map(|&x| log_sum_exp(self.components.iter().map(|c| c.log_weighted_density(x)))).sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmOptions {
    pub variance_floor: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub restarts: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            variance_floor: 1.0,
            max_iter: 500,
            tolerance: 1e-10,
            restarts: 4,
        }
    }
}

/// EM fit of an `m`-component mixture to `durations`, best of a quantile
/// initialisation and `restarts - 1` seeded random initialisations.
pub fn fit_gmm(durations: &[f64], m: usize, seed: u64, opts: &GmmOptions) -> Result<GmmModel> {
    if m == 0 {
        return arg("a mixture needs at least one component");
    }
    if durations.len() < m {
        return arg(format!("{} samples cannot support {m} components", durations.len()));
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<GmmModel> = None;
    let mut violations = 0;
    for r in 0..opts.restarts.max(1) {
        let means: Vec<f64> = if r == 0 {
            (0..m)
                .map(|i| sorted[((2 * i + 1) * sorted.len() / (2 * m)).min(sorted.len() - 1)])
                .collect()
        } else {
            let mut picks: Vec<f64> = (0..m).map(|_| sorted[rng.random_range(0..sorted.len())]).collect();
            picks.sort_by(f64::total_cmp);
            picks
        };
        let fit = em(durations, means, opts);
        violations += fit.monotonicity_violations;
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    let mut best = best.expect("at least one restart");
    best.monotonicity_violations = violations;
    Ok(best)
}

fn em(data: &[f64], means: Vec<f64>, opts: &GmmOptions) -> GmmModel {
    let n = data.len() as f64;
    let m = means.len();
    let mean = data.iter().sum::<f64>() / n;
    let var = (data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(opts.variance_floor);
    let mut comps: Vec<GmmComponent> = means
        .into_iter()
        .map(|mu| GmmComponent {
            weight: 1.0 / m as f64,
            mean: mu,
            variance: var,
        })
        .collect();

    let mut model = GmmModel {
        components: comps.clone(),
        log_likelihood: f64::NEG_INFINITY,
        iterations: 0,
        monotonicity_violations: 0,
        variance_clamps: 0,
    };
    let mut resp = vec![0.0; data.len() * m];
    let mut previous = f64::NEG_INFINITY;
    for it in 0..opts.max_iter {
        // E-step; the log-likelihood belongs to the current parameters.
        let mut ll = 0.0;
        for (i, &x) in data.iter().enumerate() {
            let row = &mut resp[i * m..(i + 1) * m];
            for (r, c) in row.iter_mut().zip(&comps) {
                *r = c.log_weighted_density(x);
            }
            let lse = log_sum_exp(row.iter().copied());
            ll += lse;
            for r in row.iter_mut() {
                *r = (*r - lse).exp();
            }
        }
        if ll < previous - 1e-9 * previous.abs().max(1.0) {
            model.monotonicity_violations += 1;
        }
        debug_assert!(model.monotonicity_violations == 0, "EM log-likelihood decreased");
        model.components = comps.clone();
        model.log_likelihood = ll;
        model.iterations = it + 1;
        if it > 0 && (ll - previous).abs() <= opts.tolerance * ll.abs().max(1.0) {
            break;
        }
        previous = ll;

        // M-step.
        for (j, c) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..data.len()).map(|i| resp[i * m + j]).sum();
            if nk <= f64::MIN_POSITIVE {
                // Dead component: keep its parameters with zero weight floor.
                c.weight = f64::MIN_POSITIVE;
                continue;
            }
            let mu = data.iter().enumerate().map(|(i, x)| resp[i * m + j] * x).sum::<f64>() / nk;
            let var = data
                .iter()
                .enumerate()
                .map(|(i, x)| resp[i * m + j] * (x - mu).powi(2))
                .sum::<f64>()
                / nk;
            c.weight = nk / n;
            c.mean = mu;
            if var < opts.variance_floor {
                model.variance_clamps += 1;
                c.variance = opts.variance_floor;
            } else {
                c.variance = var;
            }
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }
    }
    if model.variance_clamps > 0 {
        log::debug!("GMM variance clamped {} times", model.variance_clamps);
    }
    model
}

#[derive(Clone, Debug)]
pub struct BicSelection {
    pub m_opt: usize,
    pub model: GmmModel,
    /// `(m, BIC)` for every fitted model, in scan order.
    pub curve: Vec<(usize, f64)>,
}

/// Grows the component count while each step improves BIC by more than
/// `delta_threshold`; the last improving model is selected.
pub fn select_m_bic(
    durations: &[f64],
    m_max: usize,
    delta_threshold: f64,
    seed: u64,
    opts: &GmmOptions,
) -> Result<BicSelection> {
    if m_max < 1 {
        return arg("m_max must be >= 1");
    }
    if durations.is_empty() {
        return arg("no durations to model");
    }
    let n = durations.len();
    let mut model = fit_gmm(durations, 1, seed, opts)?;
    let mut bic = model.bic(n);
    let mut curve = vec![(1, bic)];
    let mut m = 1;
    while m < m_max && m < n {
        let next = fit_gmm(durations, m + 1, seed.wrapping_add(m as u64), opts)?;
        let next_bic = next.bic(n);
        curve.push((m + 1, next_bic));
        if bic - next_bic > delta_threshold {
            m += 1;
            model = next;
            bic = next_bic;
        } else {
            break;
        }
    }
    Ok(BicSelection { m_opt: m, model, curve })
}

/// A run-time group split off a cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub cluster: usize,
    /// Mean ON-duration in whole seconds.
    pub duration: usize,
    /// Mixture component that produced the group.
    pub component: usize,
    pub members: Vec<DurationSample>,
}

/// Assigns each sample to its most responsible component and returns the
/// non-empty groups in component order.
pub fn split_groups(cluster: usize, samples: &[DurationSample], gmm: &GmmModel) -> Vec<Group> {
    let mut groups: Vec<Group> = gmm
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| Group {
            cluster,
            duration: (c.mean.round() as i64).max(1) as usize,
            component: i,
            members: Vec::new(),
        })
        .collect();
    for s in samples {
        groups[gmm.classify(s.duration as f64)].members.push(*s);
    }
    groups.retain(|g| !g.members.is_empty());
    groups
}

/// Writes a binned histogram `bin_start count` of durations.
pub fn write_histogram<W: Write>(durations: &[f64], bin_width: f64, mut writer: W) -> Result<()> {
    writeln!(writer, "# bin_start_s count")?;
    if durations.is_empty() {
        return Ok(());
    }
    let max = durations.iter().copied().fold(0.0, f64::max);
    let bins = (max / bin_width).floor() as usize + 1;
    let mut counts = vec![0usize; bins];
    for &d in durations {
        counts[((d / bin_width).floor() as usize).min(bins - 1)] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        writeln!(writer, "{} {c}", b as f64 * bin_width)?;
    }
    Ok(())
}
