//! Clustering of switching signatures: k-means with Calinski-Harabasz model
//! selection, outlier cleaning, OFF-event assignment by sign reversal and
//! similarity-based merging of clusters.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::model::Vec6;

/// Partition of ON-event signatures, optionally with OFF-event assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec6>,
    /// Cluster index of each ON-event signature.
    pub assignments: Vec<usize>,
    /// Cluster index of each OFF-event signature, once assigned.
    pub off_assignments: Vec<usize>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == k)
            .map(|(i, _)| i)
    }

    /// k-means objective: summed squared distance of points to their center.
    pub fn objective(&self, points: &[Vec6]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| p.dist_sq(&self.centers[a]))
            .sum()
    }

    /// Member means, one per cluster (zero for an empty cluster).
    pub fn member_means(&self, points: &[Vec6]) -> Vec<Vec6> {
        means(points, &self.assignments, self.k())
    }

    /// Writes `cluster,size,c0..c5`.
    pub fn write_centers_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cluster", "size", "c0", "c1", "c2", "c3", "c4", "c5"])?;
        for (k, (c, n)) in self.centers.iter().zip(self.sizes()).enumerate() {
            let mut rec = vec![k.to_string(), n.to_string()];
            rec.extend(c.0.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn means(points: &[Vec6], assignments: &[usize], k: usize) -> Vec<Vec6> {
    let mut sums = vec![Vec6::ZERO; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sums[a] += *p;
        counts[a] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| if n == 0 { s } else { s * (1.0 / n as f64) })
        .collect()
}

fn nearest(p: &Vec6, centers: &[Vec6]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = p.dist_sq(c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
        }
    }
}

/// Result of one k-means run, with the Lloyd iteration audit.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub clustering: Clustering,
    pub objective: f64,
    pub iterations: usize,
    /// Number of Lloyd steps where the objective increased. Always zero for a
    /// correct implementation.
    pub monotonicity_violations: usize,
}

/// Best-of-restarts k-means with default options.
pub fn kmeans(points: &[Vec6], k: usize, seed: u64) -> Result<Clustering> {
    kmeans_with(points, k, seed, &KMeansOptions::default()).map(|f| f.clustering)
}

pub fn kmeans_with(points: &[Vec6], k: usize, seed: u64, opts: &KMeansOptions) -> Result<KMeansFit> {
    if k == 0 {
        return arg("k-means needs K >= 1");
    }
    if k > points.len() {
        return arg(format!("K = {k} exceeds the number of points {}", points.len()));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..opts.restarts.max(1)).map(|_| seeder.random()).collect();
    let fits: Vec<KMeansFit> = seeds
        .par_iter()
        .map(|&s| lloyd(points, k, s, opts.max_iter))
        .collect();
    let violations: usize = fits.iter().map(|f| f.monotonicity_violations).sum();
    let mut best = fits
        .into_iter()
        .reduce(|a, b| if b.objective < a.objective { b } else { a })
        .expect("at least one restart");
    best.monotonicity_violations = violations;
    Ok(best)
}

fn plus_plus_init(points: &[Vec6], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec6> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| p.dist_sq(&points[first])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // Only duplicates of existing centers remain.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(p.dist_sq(&points[pick]));
        }
    }
    centers
}

fn lloyd(points: &[Vec6], k: usize, seed: u64, max_iter: usize) -> KMeansFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut previous = f64::INFINITY;
    let mut violations = 0;
    let mut iterations = 0;
    let slack = |v: f64| v.abs() * 1e-12 + 1e-9;

    loop {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (a, d) = nearest(p, &centers);
            if assignments[i] != a {
                assignments[i] = a;
                changed = true;
            }
            dists[i] = d;
        }
        let assigned: f64 = dists.iter().sum();
        if assigned > previous + slack(previous) {
            violations += 1;
        }

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // Reseed empty clusters with the point farthest from its center.
        for e in 0..k {
            if counts[e] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[assignments[i]] > 1 && dists[i] > 0.0)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]));
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = e;
                counts[e] = 1;
                dists[i] = 0.0;
                changed = true;
            }
        }

        let new_centers = means(points, &assignments, k);
        for (c, (n, m)) in centers.iter_mut().zip(counts.iter().zip(new_centers)) {
            if *n > 0 {
                *c = m;
            }
        }
        let updated: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| p.dist_sq(&centers[a]))
            .sum();
        if updated > assigned + slack(assigned) {
            violations += 1;
        }
        debug_assert!(violations == 0, "k-means objective increased");
        previous = updated;
        if !changed || iterations >= max_iter {
            break;
        }
    }

    let clustering = drop_empty(Clustering {
        centers,
        assignments,
        off_assignments: Vec::new(),
    });
    let objective = clustering.objective(points);
    KMeansFit {
        clustering,
        objective,
        iterations,
        monotonicity_violations: violations,
    }
}

fn drop_empty(c: Clustering) -> Clustering {
    let sizes = c.sizes();
    if sizes.iter().all(|&n| n > 0) {
        return c;
    }
    let mut remap = vec![usize::MAX; c.k()];
    let mut centers = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        if n > 0 {
            remap[k] = centers.len();
            centers.push(c.centers[k]);
        }
    }
    Clustering {
        centers,
        assignments: c.assignments.iter().map(|&a| remap[a]).collect(),
        off_assignments: c.off_assignments,
    }
}

/// Calinski-Harabasz score, computed from the member means of each cluster.
///
/// Returns `+inf` when the within-cluster scatter is zero.
pub fn calinski_harabasz(clustering: &Clustering, points: &[Vec6]) -> Result<f64> {
    if clustering.assignments.len() != points.len() {
        return Err(Error::Dimension(format!(
            "{} assignments for {} points",
            clustering.assignments.len(),
            points.len()
        )));
    }
    let k = clustering.k();
    if k < 2 {
        return Err(Error::UndefinedScore(format!(
            "Calinski-Harabasz needs K >= 2, got {k}"
        )));
    }
    let n = points.len();
    let means = clustering.member_means(points);
    let sizes = clustering.sizes();
    let global = points.iter().fold(Vec6::ZERO, |acc, p| acc + *p) * (1.0 / n as f64);
    let between: f64 = means
        .iter()
        .zip(&sizes)
        .map(|(m, &s)| s as f64 * m.dist_sq(&global))
        .sum();
    let within: f64 = points
        .iter()
        .zip(&clustering.assignments)
        .map(|(p, &a)| p.dist_sq(&means[a]))
        .sum();
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((n - k) as f64 / (k - 1) as f64 * between / within)
}

/// Outcome of the K scan.
#[derive(Clone, Debug)]
pub struct KSelection {
    pub clustering: Clustering,
    pub best_k: usize,
    /// `(K, CH)` for every scanned K that produced a defined score.
    pub curve: Vec<(usize, f64)>,
    /// Relative gap between the best and the runner-up score; small values
    /// mean the data has no clear cluster structure.
    pub margin: f64,
    pub ambiguous: bool,
    pub monotonicity_violations: usize,
}

impl KSelection {
    pub fn write_curve<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "# K CH")?;
        for (k, ch) in &self.curve {
            writeln!(writer, "{k} {ch}")?;
        }
        Ok(())
    }
}

/// Relative CH margin below which a selection is flagged as ambiguous.
pub const AMBIGUOUS_MARGIN: f64 = 0.1;

/// Runs k-means for K = 2..=min(k_max, N) and keeps the clustering with the
/// highest Calinski-Harabasz score (lowest K on ties).
pub fn select_k(points: &[Vec6], k_max: usize, seed: u64, opts: &KMeansOptions) -> Result<KSelection> {
    if points.len() < 2 {
        return arg(format!("K selection needs at least 2 points, got {}", points.len()));
    }
    let upper = k_max.min(points.len());
    if upper < 2 {
        return arg(format!("k_max must be >= 2, got {k_max}"));
    }
    let runs: Vec<(usize, Result<KMeansFit>)> = (2..=upper)
        .into_par_iter()
        .map(|k| {
            let s = seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (k, kmeans_with(points, k, s, opts))
        })
        .collect();

    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, Clustering)> = None;
    let mut violations = 0;
    for (k, fit) in runs {
        let fit = fit?;
        violations += fit.monotonicity_violations;
        let ch = match calinski_harabasz(&fit.clustering, points) {
            Ok(v) => v,
            Err(Error::UndefinedScore(_)) => continue,
            Err(e) => return Err(e),
        };
        curve.push((k, ch));
        if best.as_ref().is_none_or(|(_, b, _)| ch > *b) {
            best = Some((k, ch, fit.clustering));
        }
    }
    let (best_k, best_ch, clustering) =
        best.ok_or_else(|| Error::State("no K produced a defined CH score".into()))?;
    let runner_up = curve
        .iter()
        .filter(|(k, _)| *k != best_k)
        .map(|(_, c)| *c)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = if best_ch.is_infinite() {
        if runner_up.is_infinite() { 0.0 } else { 1.0 }
    } else if runner_up.is_finite() && best_ch > 0.0 {
        (best_ch - runner_up) / best_ch
    } else {
        1.0
    };
    let ambiguous = margin < AMBIGUOUS_MARGIN;
    if ambiguous {
        log::info!("CH selection K={best_k} is ambiguous (margin {margin:.3})");
    }
    Ok(KSelection {
        clustering,
        best_k,
        curve,
        margin,
        ambiguous,
        monotonicity_violations: violations,
    })
}

/// Removes members farther than `sigma_factor` RMS radii from their cluster
/// mean and re-clusters them among themselves with `k_outlier` clusters (or
/// fewer when there are fewer outliers). New clusters are appended.
pub fn clean_outliers(
    clustering: &Clustering,
    points: &[Vec6],
    sigma_factor: f64,
    k_outlier: usize,
    seed: u64,
) -> Result<Clustering> {
    let k = clustering.k();
    let means = clustering.member_means(points);
    let sizes = clustering.sizes();
    let mut sq = vec![0.0; k];
    let dists: Vec<f64> = points
        .iter()
        .zip(&clustering.assignments)
        .map(|(p, &a)| {
            let d = p.dist_sq(&means[a]);
            sq[a] += d;
            d
        })
        .collect();
    let sigma: Vec<f64> = sq
        .iter()
        .zip(&sizes)
        .map(|(s, &n)| if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
        .collect();
    let outliers: Vec<usize> = (0..points.len())
        .filter(|&i| dists[i].sqrt() > sigma_factor * sigma[clustering.assignments[i]])
        .collect();
    if outliers.is_empty() || k_outlier == 0 {
        return Ok(clustering.clone());
    }

    let mut assignments = clustering.assignments.clone();
    let outlier_points: Vec<Vec6> = outliers.iter().map(|&i| points[i]).collect();
    let k_new = k_outlier.min(outlier_points.len());
    let sub = kmeans(&outlier_points, k_new, seed)?;
    for (&i, &a) in outliers.iter().zip(&sub.assignments) {
        assignments[i] = k + a;
    }
    let mut centers = clustering.centers.clone();
    centers.extend(sub.centers);
    let mut cleaned = Clustering {
        centers,
        assignments,
        off_assignments: Vec::new(),
    };
    let means = cleaned.member_means(points);
    for (c, m) in cleaned.centers.iter_mut().zip(means).take(k) {
        *c = m;
    }
    Ok(drop_empty(cleaned))
}

/// Assigns each OFF signature to the cluster whose negated center is
/// nearest (lowest index on ties).
pub fn assign_off_events(clustering: &Clustering, off_signatures: &[Vec6]) -> Result<Clustering> {
    if clustering.k() == 0 {
        return Err(Error::State("cannot assign OFF-events to an empty clustering".into()));
    }
    let negated: Vec<Vec6> = clustering.centers.iter().map(|c| -*c).collect();
    let off_assignments = off_signatures.iter().map(|s| nearest(s, &negated).0).collect();
    Ok(Clustering {
        off_assignments,
        ..clustering.clone()
    })
}

/// Pearson correlation over the six components; `None` when either vector
/// is constant.
pub fn pearson(a: &Vec6, b: &Vec6) -> Option<f64> {
    let n = a.0.len() as f64;
    let ma = a.0.iter().sum::<f64>() / n;
    let mb = b.0.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Absolute percentage error `|a - b| / |a|`.
pub fn ape(a: &Vec6, b: &Vec6) -> f64 {
    (*a - *b).norm() / a.norm()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MergeRecord {
    pub first: usize,
    pub second: usize,
    pub rho: f64,
    /// APE with the lower-index cluster in the denominator.
    pub ape: f64,
    /// Index of the merged cluster in the output clustering.
    pub merged_into: usize,
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub clustering: Clustering,
    pub merges: Vec<MergeRecord>,
    /// Clusters whose center is constant across channels, for which the
    /// correlation is undefined.
    pub skipped: Vec<usize>,
}

/// One merging pass. Pairs with `rho > rho_min` and `APE < ape_max` (in at
/// least one order) are candidates; candidates are taken greedily by
/// decreasing correlation, then increasing APE, then index, and each cluster
/// takes part in at most one merge. Merged clusters are appended with the
/// midpoint of the two centers.
pub fn merge_clusters(clustering: &Clustering, rho_min: f64, ape_max: f64) -> Result<MergeOutcome> {
    let k = clustering.k();
    if k < 2 {
        return arg(format!("merging needs K >= 2, got {k}"));
    }
    let c = &clustering.centers;
    let skipped: Vec<usize> = (0..k).filter(|&i| pearson(&c[i], &c[i]).is_none()).collect();
    if !skipped.is_empty() {
        log::info!("clusters {skipped:?} have constant centers; excluded from merging");
    }
    let mut candidates = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let Some(rho) = pearson(&c[i], &c[j]) else { continue };
            let forward = ape(&c[i], &c[j]);
            let backward = ape(&c[j], &c[i]);
            if rho > rho_min && (forward < ape_max || backward < ape_max) {
                candidates.push((rho, forward.min(backward), i, j, forward));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut used = vec![false; k];
    let mut pairs = Vec::new();
    for (rho, _, i, j, forward) in candidates {
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        pairs.push((i, j, rho, forward));
    }

    let mut remap = vec![usize::MAX; k];
    let mut centers = Vec::new();
    for i in 0..k {
        if !used[i] {
            remap[i] = centers.len();
            centers.push(c[i]);
        }
    }
    let mut merges = Vec::new();
    for (i, j, rho, ape) in pairs {
        let idx = centers.len();
        remap[i] = idx;
        remap[j] = idx;
        centers.push((c[i] + c[j]) * 0.5);
        merges.push(MergeRecord {
            first: i,
            second: j,
            rho,
            ape,
            merged_into: idx,
        });
    }
    Ok(MergeOutcome {
        clustering: Clustering {
            centers,
            assignments: clustering.assignments.iter().map(|&a| remap[a]).collect(),
            off_assignments: clustering.off_assignments.iter().map(|&a| remap[a]).collect(),
        },
        merges,
        skipped,
    })
}
