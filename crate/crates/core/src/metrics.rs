//! Track-oriented OSPA evaluation (position only) and extent-error
//! summaries.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::assignment::hungarian;

/// OSPA-T parameters: order `p`, cut-off `c` and the labeling penalty
/// `alpha`. `alpha = 0` degenerates to plain OSPA.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OspatConfig {
    pub p: f64,
    pub cutoff: f64,
    pub alpha: f64,
}

impl Default for OspatConfig {
    fn default() -> Self {
        OspatConfig { p: 1.0, cutoff: 300.0, alpha: 300.0 }
    }
}

impl OspatConfig {
    pub fn plain_ospa(p: f64, cutoff: f64) -> Self {
        OspatConfig { p, cutoff, alpha: 0.0 }
    }
}

/// One labeled object snapshot at one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSnapshot {
    pub label: u64,
    pub x: f64,
    pub y: f64,
    /// Estimated or true object length; ignored by the distance metric.
    pub length: f64,
}

impl TrackSnapshot {
    pub fn new(label: u64, x: f64, y: f64, length: f64) -> Self {
        TrackSnapshot { label, x, y, length }
    }

    fn distance(&self, other: &TrackSnapshot) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Global truth-to-estimate label correspondence established over a whole
/// scenario: per step, positions are matched optimally, matches below the
/// cut-off vote, and the majority pairing wins (injective both ways).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelCorrespondence {
    map: BTreeMap<u64, u64>,
}

impl LabelCorrespondence {
    pub fn establish(
        truth: &[Vec<TrackSnapshot>],
        estimate: &[Vec<TrackSnapshot>],
        cfg: &OspatConfig,
    ) -> Self {
        let mut votes: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        for (t_step, e_step) in truth.iter().zip(estimate.iter()) {
            for (ti, ei) in optimal_position_matching(t_step, e_step, cfg.cutoff) {
                *votes.entry((t_step[ti].label, e_step[ei].label)).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<((u64, u64), usize)> = votes.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut map = BTreeMap::new();
        let mut used_estimates = std::collections::BTreeSet::new();
        for ((t, e), _) in ranked {
            if !map.contains_key(&t) && used_estimates.insert(e) {
                map.insert(t, e);
            }
        }
        LabelCorrespondence { map }
    }

    pub fn partner_of_truth(&self, truth_label: u64) -> Option<u64> {
        self.map.get(&truth_label).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.map.iter().map(|(&t, &e)| (t, e))
    }
}

/// Positional optimal matching used for vote collection; pairs at or beyond
/// the cut-off are discarded.
fn optimal_position_matching(
    truth: &[TrackSnapshot],
    estimate: &[TrackSnapshot],
    cutoff: f64,
) -> Vec<(usize, usize)> {
    if truth.is_empty() || estimate.is_empty() {
        return vec![];
    }
    let swap = truth.len() > estimate.len();
    let (rows, cols): (&[TrackSnapshot], &[TrackSnapshot]) =
        if swap { (estimate, truth) } else { (truth, estimate) };
    let cost = DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        rows[i].distance(&cols[j]).min(cutoff)
    });
    let Some(sol) = hungarian(&cost) else { return vec![] };
    sol.assignment
        .iter()
        .enumerate()
        .filter(|(i, &j)| rows[*i].distance(&cols[j]) < cutoff)
        .map(|(i, &j)| if swap { (j, i) } else { (i, j) })
        .collect()
}

/// OSPA-T at one time step under an established correspondence.
///
/// The base distance is the Euclidean position distance plus `alpha`
/// whenever the pairing disagrees with the correspondence, saturated at the
/// cut-off; cardinality mismatches pay the full cut-off. Symmetric in the
/// two sets.
pub fn ospat_step(
    truth: &[TrackSnapshot],
    estimate: &[TrackSnapshot],
    corr: &LabelCorrespondence,
    cfg: &OspatConfig,
) -> f64 {
    let n = truth.len();
    let m = estimate.len();
    let n_max = n.max(m);
    if n_max == 0 {
        return 0.0;
    }
    let n_min = n.min(m);
    let total = if n_min == 0 {
        0.0
    } else {
        let swap = n > m;
        let (rows, cols): (&[TrackSnapshot], &[TrackSnapshot]) =
            if swap { (estimate, truth) } else { (truth, estimate) };
        let cost = DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            let (t, e) = if swap { (&cols[j], &rows[i]) } else { (&rows[i], &cols[j]) };
            let mismatch = corr.partner_of_truth(t.label) != Some(e.label);
            let base = t.distance(e) + if mismatch { cfg.alpha } else { 0.0 };
            base.min(cfg.cutoff).powf(cfg.p)
        });
        hungarian(&cost).expect("finite cost matrix").cost
    };
    let with_cardinality = total + cfg.cutoff.powf(cfg.p) * (n_max - n_min) as f64;
    (with_cardinality / n_max as f64).powf(1.0 / cfg.p)
}

/// OSPA-T of two single snapshots, establishing the correspondence from the
/// snapshots themselves.
pub fn ospat(truth: &[TrackSnapshot], estimate: &[TrackSnapshot], cfg: &OspatConfig) -> f64 {
    let corr = LabelCorrespondence::establish(
        std::slice::from_ref(&truth.to_vec()),
        std::slice::from_ref(&estimate.to_vec()),
        cfg,
    );
    ospat_step(truth, estimate, &corr, cfg)
}

/// Per-step OSPA-T over a whole scenario, plus the correspondence that was
/// used.
pub fn ospat_curve(
    truth: &[Vec<TrackSnapshot>],
    estimate: &[Vec<TrackSnapshot>],
    cfg: &OspatConfig,
) -> (Vec<f64>, LabelCorrespondence) {
    assert_eq!(truth.len(), estimate.len(), "step counts must match");
    let corr = LabelCorrespondence::establish(truth, estimate, cfg);
    let curve = truth
        .iter()
        .zip(estimate.iter())
        .map(|(t, e)| ospat_step(t, e, &corr, cfg))
        .collect();
    (curve, corr)
}

/// Plain OSPA on unlabeled positions (equivalent to `alpha = 0`).
pub fn ospa(truth: &[[f64; 2]], estimate: &[[f64; 2]], p: f64, cutoff: f64) -> f64 {
    let to_snap = |pts: &[[f64; 2]]| {
        pts.iter()
            .enumerate()
            .map(|(i, q)| TrackSnapshot::new(i as u64, q[0], q[1], 0.0))
            .collect::<Vec<_>>()
    };
    ospat_step(
        &to_snap(truth),
        &to_snap(estimate),
        &LabelCorrespondence::default(),
        &OspatConfig::plain_ospa(p, cutoff),
    )
}

/// Squared-error summary of the estimated length of one true object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthError {
    pub mse: f64,
    /// Number of correctly associated steps that contributed.
    pub steps: usize,
}

impl LengthError {
    pub fn rmse(&self) -> f64 {
        self.mse.sqrt()
    }
}

/// Length MSE per true object over correctly associated steps.
///
/// Correct association means: the step-wise optimal position matching pairs
/// the truth with exactly the estimate that the scenario-wide correspondence
/// assigns to it. Objects that are never associated are absent from the
/// result.
pub fn length_mse(
    truth: &[Vec<TrackSnapshot>],
    estimate: &[Vec<TrackSnapshot>],
    cfg: &OspatConfig,
) -> BTreeMap<u64, LengthError> {
    let corr = LabelCorrespondence::establish(truth, estimate, cfg);
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (t_step, e_step) in truth.iter().zip(estimate.iter()) {
        for (ti, ei) in optimal_position_matching(t_step, e_step, cfg.cutoff) {
            let t = &t_step[ti];
            let e = &e_step[ei];
            if corr.partner_of_truth(t.label) == Some(e.label) {
                let entry = acc.entry(t.label).or_insert((0.0, 0));
                entry.0 += (e.length - t.length).powi(2);
                entry.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(label, (sum, steps))| (label, LengthError { mse: sum / steps as f64, steps }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn snap(label: u64, x: f64, y: f64) -> TrackSnapshot {
        TrackSnapshot::new(label, x, y, 0.0)
    }

    #[test]
    fn identical_sets_score_zero() {
        let cfg = OspatConfig::default();
        let set = vec![snap(1, 0.0, 0.0), snap(2, 10.0, 5.0)];
        assert_relative_eq!(ospat(&set, &set, &cfg), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_estimate_costs_the_cutoff() {
        let cfg = OspatConfig::default();
        let truth = vec![snap(1, 0.0, 0.0)];
        assert_relative_eq!(ospat(&truth, &[], &cfg), 300.0, epsilon = 1e-12);
        // Symmetric.
        assert_relative_eq!(ospat(&[], &truth, &cfg), 300.0, epsilon = 1e-12);
    }

    #[test]
    fn two_vs_two_with_unit_offsets() {
        let cfg = OspatConfig::default();
        let truth = vec![snap(1, 0.0, 0.0), snap(2, 20.0, 0.0)];
        let est = vec![snap(11, 1.0, 0.0), snap(12, 21.0, 0.0)];
        // Brute force over both assignments: matched pairing costs 1 each,
        // crossed pairing is far worse; p = 1 average = 1.
        assert_relative_eq!(ospat(&truth, &est, &cfg), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn value_never_exceeds_cutoff_and_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let cfg = OspatConfig::default();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mk = |rng: &mut rand_chacha::ChaCha12Rng, base: u64| {
                (0..rng.random_range(0..5))
                    .map(|i| {
                        snap(base + i, rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0))
                    })
                    .collect::<Vec<_>>()
            };
            let a = mk(&mut rng, 0);
            let b = mk(&mut rng, 100);
            let ab = ospat(&a, &b, &cfg);
            let ba = ospat(&b, &a, &cfg);
            assert!(ab <= 300.0 + 1e-9);
            assert_relative_eq!(ab, ba, epsilon = 1e-9);
        }
    }

    /// Brute-force plain OSPA over all injections of the smaller set.
    fn ospa_brute(a: &[[f64; 2]], b: &[[f64; 2]], p: f64, c: f64) -> f64 {
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let n_max = large.len();
        if n_max == 0 {
            return 0.0;
        }
        fn perms(k: usize, n: usize) -> Vec<Vec<usize>> {
            fn rec(n: usize, cur: &mut Vec<usize>, used: &mut Vec<bool>, k: usize, out: &mut Vec<Vec<usize>>) {
                if cur.len() == k {
                    out.push(cur.clone());
                    return;
                }
                for j in 0..n {
                    if !used[j] {
                        used[j] = true;
                        cur.push(j);
                        rec(n, cur, used, k, out);
                        cur.pop();
                        used[j] = false;
                    }
                }
            }
            let mut out = Vec::new();
            rec(n, &mut Vec::new(), &mut vec![false; n], k, &mut out);
            out
        }
        let mut best = f64::INFINITY;
        for perm in perms(small.len(), large.len()) {
            let mut total = 0.0;
            for (i, &j) in perm.iter().enumerate() {
                let d = ((small[i][0] - large[j][0]).powi(2)
                    + (small[i][1] - large[j][1]).powi(2))
                .sqrt();
                total += d.min(c).powf(p);
            }
            total += c.powf(p) * (n_max - small.len()) as f64;
            best = best.min(total);
        }
        (best / n_max as f64).powf(1.0 / p)
    }

    #[test]
    fn alpha_zero_reduces_to_plain_ospa() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        for p in [1.0, 2.0] {
            for _ in 0..30 {
                let mk = |rng: &mut rand_chacha::ChaCha12Rng| {
                    (0..rng.random_range(0..6))
                        .map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)])
                        .collect::<Vec<[f64; 2]>>()
                };
                let a = mk(&mut rng);
                let b = mk(&mut rng);
                let fast = ospa(&a, &b, p, 30.0);
                let brute = ospa_brute(&a, &b, p, 30.0);
                assert_relative_eq!(fast, brute, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn label_switches_are_penalized() {
        let cfg = OspatConfig::default();
        // Two objects tracked for ten steps; estimate labels swap halfway.
        let mut truth = Vec::new();
        let mut est = Vec::new();
        for k in 0..10 {
            truth.push(vec![snap(1, k as f64, 0.0), snap(2, k as f64, 50.0)]);
            let (a, b) = if k < 7 { (11, 12) } else { (12, 11) };
            est.push(vec![snap(a, k as f64, 0.0), snap(b, k as f64, 50.0)]);
        }
        let (curve, _) = ospat_curve(&truth, &est, &cfg);
        for k in 0..7 {
            assert_relative_eq!(curve[k], 0.0, epsilon = 1e-12);
        }
        for k in 7..10 {
            // Pairing by position would pay the labeling penalty (capped at
            // 300); the optimal assignment prefers the label-consistent
            // partner 50 meters away.
            assert_relative_eq!(curve[k], 50.0, epsilon = 1e-12);
        }
        // Without a labeling penalty the swap is invisible.
        let plain = OspatConfig::plain_ospa(1.0, 300.0);
        let (curve, _) = ospat_curve(&truth, &est, &plain);
        for v in curve {
            assert_relative_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn length_mse_perfect_and_biased() {
        let cfg = OspatConfig::default();
        let mut truth = Vec::new();
        let mut exact = Vec::new();
        let mut biased = Vec::new();
        for k in 0..20 {
            let x = k as f64;
            truth.push(vec![TrackSnapshot::new(1, x, 0.0, 4.8)]);
            exact.push(vec![TrackSnapshot::new(7, x, 0.0, 4.8)]);
            biased.push(vec![TrackSnapshot::new(7, x, 0.0, 5.3)]);
        }
        let perfect = length_mse(&truth, &exact, &cfg);
        assert_relative_eq!(perfect[&1].mse, 0.0, epsilon = 1e-12);
        assert_eq!(perfect[&1].steps, 20);

        let off = length_mse(&truth, &biased, &cfg);
        assert_relative_eq!(off[&1].mse, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn never_associated_objects_are_absent() {
        let cfg = OspatConfig::default();
        let truth = vec![vec![TrackSnapshot::new(1, 0.0, 0.0, 4.8)]; 5];
        let est = vec![vec![]; 5];
        let errors = length_mse(&truth, &est, &cfg);
        assert!(errors.is_empty());
    }
}
