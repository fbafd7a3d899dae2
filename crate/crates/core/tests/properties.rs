use ndarray::Array2;
use proptest::prelude::*;

use nilm_core::config::Config;
use nilm_core::events::{detect_events, EventKind};
use nilm_core::forecast::{differentiate_states, integrate_states};
use nilm_core::ingest::DerivativeSeries;
use nilm_core::metrics::metrics;
use nilm_core::model::DeviceProfile;
use nilm_core::{reconstruct, Epsilon, StateChangesMatrix, StateKind, Vec6};

/// Alternating ON/OFF toggles per device at the given offsets.
fn toggles(len: usize, devices: usize, marks: &[(usize, usize)]) -> StateChangesMatrix {
    let mut on = vec![false; devices];
    let mut seen = std::collections::BTreeSet::new();
    let mut sorted: Vec<(usize, usize)> = marks
        .iter()
        .map(|&(t, d)| (t % len, d % devices))
        .filter(|m| seen.insert(*m))
        .collect();
    sorted.sort_unstable();
    let entries: Vec<(usize, usize, i8)> = sorted
        .into_iter()
        .map(|(t, d)| {
            on[d] = !on[d];
            (t, d, if on[d] { 1 } else { -1 })
        })
        .collect();
    StateChangesMatrix::discrete(len, devices, entries).unwrap()
}

proptest! {
    #[test]
    fn integrate_differentiate_round_trip(
        len in 2usize..300,
        devices in 1usize..6,
        marks in prop::collection::vec((0usize..300, 0usize..6), 0..40),
    ) {
        let s = toggles(len, devices, &marks);
        let x = integrate_states(&s);
        prop_assert!(x.iter().all(|v| *v == 0.0 || *v == 1.0));
        let back = differentiate_states(&x, &vec![0.0; devices], StateKind::Discrete).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn probabilistic_round_trip(
        values in prop::collection::vec(0.0f64..1.0, 2..200),
        initial in 0.0f64..1.0,
    ) {
        let x = Array2::from_shape_vec((values.len(), 1), values.clone()).unwrap();
        let s = differentiate_states(&x, &[initial], StateKind::Probabilistic).unwrap();
        prop_assert!(s.entries().iter().all(|e| (-1.0..=1.0).contains(&e.value)));
        let mut level = initial;
        let mut k = 0;
        for (t, v) in values.iter().enumerate() {
            if let Some(e) = s.entries().get(k).filter(|e| e.t == t) {
                level += e.value;
                k += 1;
            }
            prop_assert!((level - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_dominates_mae(
        pairs in prop::collection::vec((0.0f64..1e5, -1e4f64..1e5), 1..300),
    ) {
        let (m, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = metrics(&m, &p, 10.0).unwrap();
        prop_assert!(r.rmse >= r.mae - 1e-9 * r.mae.abs());
        prop_assert!(r.mae >= 0.0);
        let same = metrics(&m, &m, 10.0).unwrap();
        prop_assert_eq!(same.rmse, 0.0);
        prop_assert_eq!(same.mae, 0.0);
    }

    #[test]
    fn events_match_peak_criterion(
        total in prop::collection::vec(-3000.0f64..3000.0, 3..400),
        threshold in 1.0f64..2000.0,
    ) {
        let values: Vec<Vec6> = total.iter().map(|&v| Vec6([v, 0.0, 0.0, 0.0, 0.0, 0.0])).collect();
        let set = detect_events(&DerivativeSeries { values, total: total.clone() }, threshold).unwrap();
        let mut want = Vec::new();
        for t in 1..total.len() - 1 {
            let (a, b, c) = (total[t - 1], total[t], total[t + 1]);
            if b > a && b > c && b >= threshold {
                want.push((t, EventKind::On));
            } else if b < a && b < c && b <= -threshold {
                want.push((t, EventKind::Off));
            }
        }
        let got: Vec<_> = set.events.iter().map(|e| (e.t, e.kind)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn reconstruction_is_additive_over_devices(
        len in 10usize..200,
        marks in prop::collection::vec((0usize..200, 0usize..2), 0..20),
        amp in (100.0f64..3000.0, 100.0f64..3000.0),
        dur in (1usize..30, 1usize..30),
    ) {
        let profile = |id: usize, a: f64, d: usize| {
            let dynamic = (0..d).map(|k| Vec6::splat(a * (1.0 + 1.0 / (k as f64 + 1.0)))).collect();
            DeviceProfile::from_dynamic(id, Vec6::splat(a), dynamic, 1.0).unwrap()
        };
        let profiles = [profile(0, amp.0, dur.0), profile(1, amp.1, dur.1)];
        let both = toggles(len, 2, &marks);
        let eps = Vec6::splat(50.0);
        let full = reconstruct(&both, &profiles, Epsilon::Constant(eps), len).unwrap();
        let mut sum = vec![eps; len];
        for d in 0..2 {
            let only: Vec<(usize, usize, i8)> = both
                .column(d)
                .map(|e| (e.t, 0, e.value as i8))
                .collect();
            let single = StateChangesMatrix::discrete(len, 1, only).unwrap();
            let part = reconstruct(&single, &profiles[d..=d], Epsilon::Constant(Vec6::ZERO), len).unwrap();
            for (acc, v) in sum.iter_mut().zip(part.samples()) {
                *acc = *acc + *v;
            }
        }
        for (a, b) in full.samples().iter().zip(&sum) {
            prop_assert!((*a - *b).norm() < 1e-6);
        }
    }

    #[test]
    fn config_overrides_round_trip(seed in 0..=i64::MAX as u64, particles in 1usize..500, threshold in 1.0f64..5000.0) {
        let cfg = Config::from_toml(
            "",
            &[
                format!("seed={seed}"),
                format!("disaggregation.particles={particles}"),
                format!("extraction.threshold={threshold:?}"),
            ],
        )
        .unwrap();
        prop_assert_eq!(cfg.seed, seed);
        let again = Config::from_toml(&cfg.to_toml(), &[]).unwrap();
        prop_assert_eq!(again.hash(), cfg.hash());
        prop_assert_eq!(again.disaggregation.particles, particles);
    }
}

#[test]
fn seeds_beyond_toml_integers_are_rejected() {
    match Config::from_toml("", &[format!("seed={}", u64::MAX)]) {
        Err(nilm_core::Error::Config { path, .. }) => assert_eq!(path, "seed"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_matrix_reconstructs_epsilon() {
    let s = StateChangesMatrix::empty(5, 1, StateKind::Discrete);
    let p = DeviceProfile::from_dynamic(0, Vec6::splat(1.0), vec![Vec6::splat(1.0)], 1.0).unwrap();
    let eps = Vec6([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = reconstruct(&s, &[p], Epsilon::Constant(eps), 5).unwrap();
    assert!(out.samples().iter().all(|v| *v == eps));
}
