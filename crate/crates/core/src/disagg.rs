//! Disaggregation: the state-changes matrix that best explains a measured
//! series, found by a particle swarm over detected events.
//!
//! Each particle holds one score per (event, device) pair plus a "no device"
//! score per event. Decoding walks the events in time order and gives each
//! event the highest-scoring device that may legally switch in that
//! direction (ON-events only to devices that are off, OFF-events only to
//! devices that are on), or no device. The series is solved in overlapping
//! windows; decisions before the next window's start are committed and
//! devices left on are carried over as fixed context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::events::{EventKind, EventSet};
use crate::model::{
    accumulate, reconstruct, DeviceProfile, Epsilon, PowerSeries, StateChange, StateChangesMatrix,
    StateKind, Vec6, ACTIVE_CHANNELS, CHANNELS, DEFAULT_RECONSTRUCTION_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisaggConfig {
    /// Weight of the power term; `alpha + beta` must equal 1.
    pub alpha: f64,
    /// Weight of the derivative term.
    pub beta: f64,
    /// Window length in seconds.
    pub window: usize,
    /// Overlap between consecutive windows in seconds.
    pub overlap: usize,
    pub particles: usize,
    pub iterations: usize,
    /// Stop a window early after this many iterations without improvement
    /// (0 disables).
    pub stall_iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub max_velocity: f64,
    /// Quantile of the window residual used as the always-on level.
    pub epsilon_quantile: f64,
    /// Relative signature mismatch up to which the greedy seed particle
    /// accepts a device.
    pub greedy_tolerance: f64,
    /// Coordinate-descent sweeps over the best particle after the swarm.
    pub polish_sweeps: usize,
    /// Taken from the run seed when driven by a configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DisaggConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            window: 3600,
            overlap: 300,
            particles: 40,
            iterations: 200,
            stall_iterations: 60,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            max_velocity: 0.5,
            epsilon_quantile: 0.01,
            greedy_tolerance: 0.5,
            polish_sweeps: 3,
            seed: 0,
        }
    }
}

impl DisaggConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return arg(format!(
                "alpha ({}) and beta ({}) must be non-negative and sum to 1",
                self.alpha, self.beta
            ));
        }
        if self.window < 3 {
            return arg(format!("window of {} s is shorter than 3 samples", self.window));
        }
        if self.overlap >= self.window {
            return arg(format!("overlap {} must be shorter than the window {}", self.overlap, self.window));
        }
        if self.particles == 0 {
            return arg("at least one particle is required");
        }
        if !(0.0..1.0).contains(&self.epsilon_quantile) {
            return arg("epsilon_quantile must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Weighted squared error between a measured and a reconstructed series over
/// `[a, b)`: power differences over all samples plus derivative differences
/// over `a..b-1`, both as squared Euclidean norms over the six channels.
pub fn disagg_error(p: &PowerSeries, p_s: &PowerSeries, alpha: f64, beta: f64, a: usize, b: usize) -> Result<f64> {
    if a >= b || b > p.len() || b > p_s.len() {
        return arg(format!(
            "window [{a}, {b}) outside series of {} and {} samples",
            p.len(),
            p_s.len()
        ));
    }
    Ok(window_error(&p.samples()[a..b], &p_s.samples()[a..b], alpha, beta))
}

fn window_error(measured: &[Vec6], recon: &[Vec6], alpha: f64, beta: f64) -> f64 {
    let mut power = 0.0;
    for (m, r) in measured.iter().zip(recon) {
        power += r.dist_sq(m);
    }
    let mut deriv = 0.0;
    if beta != 0.0 {
        for t in 0..measured.len().saturating_sub(1) {
            let dm = measured[t + 1] - measured[t];
            let dr = recon[t + 1] - recon[t];
            deriv += dr.dist_sq(&dm);
        }
    }
    alpha * power + beta * deriv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start: usize,
    pub end: usize,
    /// End of the committed region.
    pub commit_end: usize,
    pub events: usize,
    pub epsilon: Vec6,
    pub best_error: f64,
    pub empty_error: f64,
    pub greedy_error: f64,
    pub iterations: usize,
    pub gbest_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisaggReport {
    pub windows: Vec<WindowReport>,
    /// Error of the returned matrix over the whole series.
    pub total_error: f64,
    /// Error of the empty matrix with the same always-on series.
    pub empty_error: f64,
    /// True when the swarm result was discarded for the empty matrix.
    pub fell_back_to_empty: bool,
    pub gbest_violations: usize,
}

#[derive(Clone, Debug)]
pub struct Disaggregation {
    pub states: StateChangesMatrix,
    pub reconstruction: PowerSeries,
    /// Always-on level per sample.
    pub epsilon: PowerSeries,
    pub report: DisaggReport,
}

/// Everything the swarm needs to score a candidate assignment in one window.
struct WindowProblem<'a> {
    start: usize,
    measured: &'a [Vec6],
    profiles: &'a [DeviceProfile],
    epsilon: Vec6,
    /// Devices on at the window start, with their switch-on sample.
    context: Vec<Option<usize>>,
    /// `(switch sample, kind, signature)` of the events to assign.
    events: Vec<(usize, EventKind, Vec6)>,
    alpha: f64,
    beta: f64,
}

impl WindowProblem<'_> {
    fn devices(&self) -> usize {
        self.profiles.len()
    }

    fn dim(&self) -> usize {
        self.events.len() * (self.devices() + 1)
    }

    /// Device per event (or none) under the legality rules.
    fn decode(&self, x: &[f64]) -> Vec<Option<usize>> {
        let m = self.devices();
        let mut on: Vec<bool> = self.context.iter().map(Option::is_some).collect();
        self.events
            .iter()
            .enumerate()
            .map(|(e, (_, kind, _))| {
                let row = &x[e * (m + 1)..(e + 1) * (m + 1)];
                let mut best = (row[m], None);
                for (d, &score) in row[..m].iter().enumerate() {
                    let legal = match kind {
                        EventKind::On => !on[d],
                        EventKind::Off => on[d],
                    };
                    if legal && score > best.0 {
                        best = (score, Some(d));
                    }
                }
                if let Some(d) = best.1 {
                    on[d] = *kind == EventKind::On;
                }
                best.1
            })
            .collect()
    }

    fn entries(&self, assignment: &[Option<usize>]) -> Vec<StateChange> {
        let mut entries: Vec<StateChange> = self
            .context
            .iter()
            .enumerate()
            .filter_map(|(d, on)| on.map(|t| StateChange { t, device: d, value: 1.0 }))
            .collect();
        entries.sort_by_key(|e| (e.t, e.device));
        for ((t, kind, _), a) in self.events.iter().zip(assignment) {
            if let Some(d) = a {
                let value = if *kind == EventKind::On { 1.0 } else { -1.0 };
                entries.push(StateChange { t: *t, device: *d, value });
            }
        }
        entries
    }

    fn reconstruct_into(&self, assignment: &[Option<usize>], out: &mut Vec<Vec6>) {
        out.clear();
        out.resize(self.measured.len(), self.epsilon);
        let entries = self.entries(assignment);
        accumulate(
            &entries,
            StateKind::Discrete,
            self.profiles,
            DEFAULT_RECONSTRUCTION_THRESHOLD,
            self.start,
            out,
        );
    }

    fn error_of(&self, assignment: &[Option<usize>], buf: &mut Vec<Vec6>) -> f64 {
        self.reconstruct_into(assignment, buf);
        window_error(self.measured, buf, self.alpha, self.beta)
    }

    /// Position that decodes to `assignment`.
    fn encode(&self, assignment: &[Option<usize>]) -> Vec<f64> {
        let m = self.devices();
        let mut x = vec![0.0; self.dim()];
        for (e, a) in assignment.iter().enumerate() {
            x[e * (m + 1) + a.unwrap_or(m)] = 1.0;
        }
        x
    }

    /// Signature matching: each event takes the legal device whose expected
    /// jump is closest, if within `tolerance` relative mismatch.
    fn greedy(&self, tolerance: f64) -> Vec<Option<usize>> {
        let mut on_since = self.context.clone();
        self.events
            .iter()
            .map(|(t, kind, sig)| {
                let mut best: Option<(f64, usize)> = None;
                for (d, p) in self.profiles.iter().enumerate() {
                    let expected = match (kind, on_since[d]) {
                        (EventKind::On, None) => p.dynamic[0],
                        (EventKind::Off, Some(since)) => -p.value_at(t - since),
                        _ => continue,
                    };
                    let miss = sig.dist_sq(&expected).sqrt() / expected.norm().max(1e-9);
                    if miss <= tolerance && best.is_none_or(|(b, _)| miss < b) {
                        best = Some((miss, d));
                    }
                }
                let choice = best.map(|(_, d)| d);
                if let Some(d) = choice {
                    on_since[d] = (*kind == EventKind::On).then_some(*t);
                }
                choice
            })
            .collect()
    }
}

struct SwarmOutcome {
    assignment: Vec<Option<usize>>,
    error: f64,
    empty_error: f64,
    greedy_error: f64,
    iterations: usize,
    violations: usize,
}

struct Particle {
    x: Vec<f64>,
    v: Vec<f64>,
    best_x: Vec<f64>,
    best_err: f64,
    rng: ChaCha8Rng,
}

fn solve_window(
    problem: &WindowProblem<'_>,
    cfg: &DisaggConfig,
    window_seed: u64,
    injected: Option<Vec<Option<usize>>>,
) -> SwarmOutcome {
    let n_events = problem.events.len();
    let mut buf = Vec::with_capacity(problem.measured.len());
    let empty = vec![None; n_events];
    let empty_error = problem.error_of(&empty, &mut buf);
    if n_events == 0 {
        return SwarmOutcome {
            assignment: empty,
            error: empty_error,
            empty_error,
            greedy_error: empty_error,
            iterations: 0,
            violations: 0,
        };
    }
    let greedy = problem.greedy(cfg.greedy_tolerance);
    let greedy_error = problem.error_of(&greedy, &mut buf);
    let dim = problem.dim();

    let mut seeds: Vec<Vec<f64>> = vec![problem.encode(&greedy), problem.encode(&empty)];
    if let Some(inj) = injected {
        seeds.push(problem.encode(&inj));
    }
    let mut swarm: Vec<Particle> = (0..cfg.particles.max(seeds.len()))
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(window_seed);
            rng.set_stream(i as u64);
            let x = match seeds.get(i) {
                Some(s) => s.clone(),
                None => (0..dim).map(|_| rng.random::<f64>()).collect(),
            };
            let v = (0..dim)
                .map(|_| cfg.max_velocity * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            Particle {
                best_x: x.clone(),
                x,
                v,
                best_err: f64::INFINITY,
                rng,
            }
        })
        .collect();

    let evaluate = |swarm: &mut Vec<Particle>| {
        swarm.par_iter_mut().for_each_init(
            || Vec::with_capacity(problem.measured.len()),
            |buf, p| {
                let err = problem.error_of(&problem.decode(&p.x), buf);
                if err < p.best_err {
                    p.best_err = err;
                    p.best_x.clone_from(&p.x);
                }
            },
        );
    };
    let leader = |swarm: &[Particle]| -> (usize, f64) {
        swarm
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, p)| if p.best_err < acc.1 { (i, p.best_err) } else { acc })
    };

    evaluate(&mut swarm);
    let (mut g, mut g_err) = leader(&swarm);
    let mut g_x = swarm[g].best_x.clone();
    let mut violations = 0;
    let mut stall = 0;
    let mut iterations = 0;
    for _ in 0..cfg.iterations {
        iterations += 1;
        swarm.par_iter_mut().for_each(|p| {
            for k in 0..dim {
                let r1: f64 = p.rng.random();
                let r2: f64 = p.rng.random();
                let v = cfg.inertia * p.v[k]
                    + cfg.cognitive * r1 * (p.best_x[k] - p.x[k])
                    + cfg.social * r2 * (g_x[k] - p.x[k]);
                p.v[k] = v.clamp(-cfg.max_velocity, cfg.max_velocity);
                p.x[k] = (p.x[k] + p.v[k]).clamp(0.0, 1.0);
            }
        });
        evaluate(&mut swarm);
        let (ng, ng_err) = leader(&swarm);
        if ng_err > g_err {
            violations += 1;
            debug_assert!(false, "global best rose from {g_err} to {ng_err}");
        }
        if ng_err < g_err {
            g = ng;
            g_err = ng_err;
            g_x.clone_from(&swarm[g].best_x);
            stall = 0;
        } else {
            stall += 1;
            if cfg.stall_iterations > 0 && stall >= cfg.stall_iterations {
                break;
            }
        }
    }

    let mut best = problem.decode(&g_x);
    let mut best_err = g_err;
    for _ in 0..cfg.polish_sweeps {
        let mut improved = false;
        for e in 0..n_events {
            for choice in (0..problem.devices()).map(Some).chain([None]) {
                if best[e] == choice {
                    continue;
                }
                let mut x = problem.encode(&best);
                let m = problem.devices();
                x[e * (m + 1)..(e + 1) * (m + 1)].fill(0.0);
                x[e * (m + 1) + choice.unwrap_or(m)] = 2.0;
                let cand = problem.decode(&x);
                if cand[e] != choice {
                    continue;
                }
                let err = problem.error_of(&cand, &mut buf);
                if err < best_err {
                    best = cand;
                    best_err = err;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    SwarmOutcome {
        assignment: best,
        error: best_err,
        empty_error,
        greedy_error,
        iterations,
        violations,
    }
}

/// Per-channel always-on level of a window: the chosen low quantile of the
/// residual per channel; the active channels are rescaled so they sum to the
/// same quantile of the total active residual.
fn window_epsilon(residual: &[Vec6], q: f64) -> Vec6 {
    let quantile = |mut v: Vec<f64>| -> f64 {
        let k = ((v.len() - 1) as f64 * q).floor() as usize;
        *v.select_nth_unstable_by(k, f64::total_cmp).1
    };
    let mut eps = Vec6::ZERO;
    for c in 0..CHANNELS {
        eps[c] = quantile(residual.iter().map(|r| r[c]).collect());
    }
    let total = quantile(residual.iter().map(Vec6::total_active).collect());
    let sum: f64 = eps.0[..ACTIVE_CHANNELS].iter().sum();
    if sum.abs() > 1e-9 {
        for c in 0..ACTIVE_CHANNELS {
            eps[c] *= total / sum;
        }
    } else {
        for c in 0..ACTIVE_CHANNELS {
            eps[c] = total / ACTIVE_CHANNELS as f64;
        }
    }
    eps
}

/// Disaggregates `series` into a discrete state-changes matrix over the
/// given profiles.
pub fn pso_disaggregate(
    series: &PowerSeries,
    profiles: &[DeviceProfile],
    events: &EventSet,
    cfg: &DisaggConfig,
) -> Result<Disaggregation> {
    pso_disaggregate_with(series, profiles, events, cfg, None)
}

/// As [`pso_disaggregate`]; `injected` is translated to one initial particle
/// per window (its entries at detected event times).
pub fn pso_disaggregate_with(
    series: &PowerSeries,
    profiles: &[DeviceProfile],
    events: &EventSet,
    cfg: &DisaggConfig,
    injected: Option<&StateChangesMatrix>,
) -> Result<Disaggregation> {
    cfg.validate()?;
    if profiles.is_empty() {
        return arg("disaggregation needs at least one profile");
    }
    if let Some(inj) = injected {
        if inj.devices() != profiles.len() || inj.kind() != StateKind::Discrete {
            return Err(Error::Dimension("injected matrix must be discrete with one column per profile".into()));
        }
    }
    let len = series.len();
    let m = profiles.len();
    let samples = series.samples();
    let all: Vec<(usize, EventKind, Vec6)> = events
        .events
        .iter()
        .filter(|e| e.switch_sample() < len)
        .map(|e| (e.switch_sample(), e.kind, e.signature))
        .collect();

    let mut context: Vec<Option<usize>> = vec![None; m];
    let mut committed: Vec<(usize, usize, i8)> = Vec::new();
    let mut eps_samples: Vec<Vec6> = Vec::with_capacity(len);
    let mut windows = Vec::new();
    let mut violations = 0;
    let step = cfg.window - cfg.overlap;
    let mut a = 0;
    let mut w_idx = 0u64;
    while a < len {
        let b = (a + cfg.window).min(len);
        let commit_end = if b == len { len } else { a + step };
        let lo = all.partition_point(|e| e.0 < a);
        let hi = all.partition_point(|e| e.0 < b);
        let mut problem = WindowProblem {
            start: a,
            measured: &samples[a..b],
            profiles,
            epsilon: Vec6::ZERO,
            context: context.clone(),
            events: all[lo..hi].to_vec(),
            alpha: cfg.alpha,
            beta: cfg.beta,
        };
        // Always-on level from the residual under the greedy assignment.
        let greedy = problem.greedy(cfg.greedy_tolerance);
        let mut buf = Vec::new();
        problem.reconstruct_into(&greedy, &mut buf);
        let residual: Vec<Vec6> = problem.measured.iter().zip(&buf).map(|(p, r)| *p - *r).collect();
        problem.epsilon = window_epsilon(&residual, cfg.epsilon_quantile);

        let inj = injected.map(|s| {
            problem
                .events
                .iter()
                .map(|(t, kind, _)| {
                    let want = if *kind == EventKind::On { 1.0 } else { -1.0 };
                    s.entries()
                        .iter()
                        .skip_while(|e| e.t < *t)
                        .take_while(|e| e.t == *t)
                        .find(|e| e.value == want)
                        .map(|e| e.device)
                })
                .collect()
        });
        let window_seed = cfg.seed.wrapping_add(w_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let out = solve_window(&problem, cfg, window_seed, inj);
        violations += out.violations;

        for ((t, kind, _), a_dev) in problem.events.iter().zip(&out.assignment) {
            if *t >= commit_end {
                break;
            }
            if let Some(d) = a_dev {
                let on = *kind == EventKind::On;
                committed.push((*t, *d, if on { 1 } else { -1 }));
                context[*d] = on.then_some(*t);
            }
        }
        eps_samples.extend(std::iter::repeat_n(problem.epsilon, commit_end - a));
        windows.push(WindowReport {
            start: a,
            end: b,
            commit_end,
            events: problem.events.len(),
            epsilon: problem.epsilon,
            best_error: out.error,
            empty_error: out.empty_error,
            greedy_error: out.greedy_error,
            iterations: out.iterations,
            gbest_violations: out.violations,
        });
        log::debug!(
            "window [{a}, {b}): {} events, error {:.4e} (empty {:.4e})",
            problem.events.len(),
            out.error,
            out.empty_error
        );
        a = commit_end;
        w_idx += 1;
    }

    let epsilon = PowerSeries::new(series.start_timestamp(), eps_samples)?;
    let mut states = StateChangesMatrix::discrete(len, m, committed)?;
    let mut reconstruction = reconstruct(&states, profiles, Epsilon::Series(&epsilon), len)?;
    let total_error = disagg_error(series, &reconstruction, cfg.alpha, cfg.beta, 0, len)?;
    let empty_recon = epsilon.clone();
    let empty_error = disagg_error(series, &empty_recon, cfg.alpha, cfg.beta, 0, len)?;
    let fell_back = total_error > empty_error;
    if fell_back {
        log::warn!("swarm result ({total_error:.4e}) worse than the empty matrix ({empty_error:.4e})");
        states = StateChangesMatrix::empty(len, m, StateKind::Discrete);
        reconstruction = empty_recon;
    }
    Ok(Disaggregation {
        states,
        reconstruction,
        epsilon,
        report: DisaggReport {
            windows,
            total_error: total_error.min(empty_error),
            empty_error,
            fell_back_to_empty: fell_back,
            gbest_violations: violations,
        },
    })
}
