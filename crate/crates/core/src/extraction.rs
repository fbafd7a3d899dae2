//! Unsupervised profile extraction: events, clusters, run-time groups and
//! median-blended profiles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    assign_off_events, clean_outliers, merge_clusters, select_k, Clustering, KMeansOptions,
    KSelection, MergeRecord,
};
use crate::duration::{pair_on_off, select_m_bic, split_groups, DurationSample, GmmOptions, Group};
use crate::error::{Error, Result};
use crate::events::{detect_events, EventKind, EventSet, DEFAULT_THRESHOLD};
use crate::ingest::derivative;
use crate::model::{DeviceProfile, PowerSeries, Vec6};
use crate::profiles::{median_blend, BlendOptions, CatalogEntry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    /// Event threshold on the total active-power derivative (W/s).
    pub threshold: f64,
    pub k_max: usize,
    pub kmeans: KMeansOptions,
    pub clean_outliers: bool,
    pub sigma_factor: f64,
    pub k_outlier: usize,
    pub rho_min: f64,
    pub ape_max: f64,
    pub m_max: usize,
    pub delta_bic: f64,
    pub gmm: GmmOptions,
    /// ON-durations above this many seconds are treated as pairing artifacts.
    pub max_duration: usize,
    /// Smallest group that yields a profile.
    pub min_group_size: usize,
    pub blend: BlendOptions,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            k_max: 50,
            kmeans: KMeansOptions::default(),
            clean_outliers: true,
            sigma_factor: 2.0,
            k_outlier: 10,
            rho_min: 0.9,
            ape_max: 0.1,
            m_max: 5,
            delta_bic: 2.0,
            gmm: GmmOptions::default(),
            max_duration: 86_400,
            min_group_size: 5,
            blend: BlendOptions::default(),
        }
    }
}

/// Everything the extraction produced, kept for diagnostics and export.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub events: EventSet,
    pub selection: KSelection,
    /// Clustering after cleaning, merging and OFF assignment.
    pub clustering: Clustering,
    pub merges: Vec<MergeRecord>,
    /// Paired ON-durations per final cluster.
    pub durations: Vec<Vec<DurationSample>>,
    /// BIC curve per cluster that had durations.
    pub bic_curves: Vec<(usize, Vec<(usize, f64)>)>,
    pub groups: Vec<Group>,
    pub profiles: Vec<DeviceProfile>,
    pub catalog: Vec<CatalogEntry>,
    pub em_violations: usize,
}

pub fn extract_profiles(series: &PowerSeries, cfg: &ExtractionConfig, seed: u64) -> Result<Extraction> {
    let deriv = derivative(series)?;
    let events = detect_events(&deriv, cfg.threshold)?;
    let on: Vec<Vec6> = events.of_kind(EventKind::On).map(|e| e.signature).collect();
    let on_times: Vec<usize> = events.of_kind(EventKind::On).map(|e| e.t).collect();
    let off: Vec<Vec6> = events.of_kind(EventKind::Off).map(|e| e.signature).collect();
    let off_times: Vec<usize> = events.of_kind(EventKind::Off).map(|e| e.t).collect();
    if on.len() < 2 {
        return Err(Error::Extraction(format!(
            "{} ON-events found at threshold {} W/s; need at least 2",
            on.len(),
            cfg.threshold
        )));
    }

    let selection = select_k(&on, cfg.k_max, seed, &cfg.kmeans)?;
    let mut clustering = selection.clustering.clone();
    if cfg.clean_outliers {
        clustering = clean_outliers(&clustering, &on, cfg.sigma_factor, cfg.k_outlier, seed ^ 0xC1EA)?;
    }
    let mut merges = Vec::new();
    if clustering.k() >= 2 {
        let outcome = merge_clusters(&clustering, cfg.rho_min, cfg.ape_max)?;
        merges = outcome.merges;
        clustering = outcome.clustering;
    }
    let clustering = assign_off_events(&clustering, &off)?;

    let k = clustering.k();
    let per_cluster: Vec<(Vec<DurationSample>, Option<(Vec<(usize, f64)>, Vec<Group>, usize)>)> = (0..k)
        .into_par_iter()
        .map(|c| -> Result<_> {
            let mut seq: Vec<(usize, EventKind)> = on_times
                .iter()
                .zip(&clustering.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(&t, _)| (t, EventKind::On))
                .chain(
                    off_times
                        .iter()
                        .zip(&clustering.off_assignments)
                        .filter(|(_, &a)| a == c)
                        .map(|(&t, _)| (t, EventKind::Off)),
                )
                .collect();
            seq.sort();
            let samples: Vec<DurationSample> = pair_on_off(&seq)
                .into_iter()
                .filter(|s| s.duration <= cfg.max_duration)
                .collect();
            if samples.is_empty() {
                return Ok((samples, None));
            }
            let data: Vec<f64> = samples.iter().map(|s| s.duration as f64).collect();
            let sel = select_m_bic(&data, cfg.m_max, cfg.delta_bic, seed.wrapping_add(c as u64), &cfg.gmm)?;
            let groups = split_groups(c, &samples, &sel.model);
            Ok((samples, Some((sel.curve, groups, sel.model.monotonicity_violations))))
        })
        .collect::<Result<_>>()?;

    let mut durations = Vec::with_capacity(k);
    let mut bic_curves = Vec::new();
    let mut groups = Vec::new();
    let mut em_violations = 0;
    for (c, (samples, fit)) in per_cluster.into_iter().enumerate() {
        durations.push(samples);
        if let Some((curve, g, v)) = fit {
            bic_curves.push((c, curve));
            groups.extend(g);
            em_violations += v;
        }
    }

    let mut profiles = Vec::new();
    let mut catalog = Vec::new();
    for g in &groups {
        if g.members.len() < cfg.min_group_size {
            continue;
        }
        match median_blend(profiles.len(), g, series, clustering.centers[g.cluster], &cfg.blend) {
            Ok((p, diag)) => {
                catalog.push(CatalogEntry {
                    id: p.id,
                    cluster: g.cluster,
                    duration: p.duration,
                    stable_norm: p.stable_state.norm(),
                    members: diag.used,
                });
                profiles.push(p);
            }
            Err(e) => log::warn!("skipping group: {e}"),
        }
    }
    log::info!(
        "{} events, K = {} (CH pick {}), {} groups, {} profiles",
        events.len(),
        k,
        selection.best_k,
        groups.len(),
        profiles.len()
    );
    Ok(Extraction {
        events,
        selection,
        clustering,
        merges,
        durations,
        bic_curves,
        groups,
        profiles,
        catalog,
        em_violations,
    })
}
