//! The multi-sensor labeled multi-Bernoulli recursion: prediction,
//! per-sensor measurement update with association-hypothesis enumeration,
//! adaptive birth from unexplained detections, pruning and track extraction.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::assignment::k_best_assignments;
use crate::error::{Error, Result};
use crate::geometry::{candidate_reference_points, corner_offset, Point};
use crate::interface::SensorProfile;
use crate::measurement::{
    clutter_intensity, complete_update, detection_probability, measurement_stats,
    DetectionModel, MeasurementFunction, ObservableSubset, UpdateOutcome,
};
use crate::motion::{
    sigma_points, state_residual, unscented_predict, ProcessNoise, SigmaPoints, UnscentedParams,
};
use crate::types::{
    wrap_angle, BernoulliTrack, ClassPosterior, ClassRegistry, Detection, Feature, Label,
    LmbDensity, StateCov, StateGaussian, StateVec, FILTER_FEATURES,
};

/// Floor on the clutter density so detections outside the observable subset
/// keep finite association weights.
pub const CLUTTER_FLOOR: f64 = 1e-12;

/// Largest cluster updated by exhaustive hypothesis enumeration; beyond this
/// the ranked-assignment path takes over.
pub const EXHAUSTIVE_LIMIT: usize = 5;

/// Priors applied to state components that a birth detection does not
/// measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirthPrior {
    pub heading: f64,
    pub heading_var: f64,
    pub yaw_rate_var: f64,
    pub speed_var: f64,
    pub accel_var: f64,
    /// Variance assigned to class-default extents.
    pub extent_var: f64,
}

impl Default for BirthPrior {
    fn default() -> Self {
        BirthPrior {
            heading: 0.0,
            // Uniform over the circle.
            heading_var: std::f64::consts::PI * std::f64::consts::PI / 3.0,
            yaw_rate_var: 1.0,
            speed_var: 100.0,
            accel_var: 4.0,
            extent_var: 1.0,
        }
    }
}

/// Filter parameters. Everything is tunable; the defaults are the ones the
/// simulation scenarios are calibrated against.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    /// Per-cycle survival probability.
    pub survival_probability: f64,
    /// Tracks below this existence are removed.
    pub r_prune: f64,
    /// Tracks at or above this existence are published.
    pub r_extract: f64,
    /// Existence assigned to newborn tracks.
    pub r_birth: f64,
    /// Ranked-assignment depth per cluster.
    pub max_hypotheses: usize,
    /// Chi-square gating quantile; `>= 1.0` disables gating.
    pub gate_quantile: f64,
    /// Default clutter rate used when building sensor profiles.
    pub lambda_c: f64,
    pub detection_model: DetectionModel,
    /// Detections whose total association probability stays below this value
    /// seed the adaptive birth.
    pub birth_assoc_threshold: f64,
    /// Minimum class confidence for a birth from an incomplete detection.
    pub birth_class_confidence: f64,
    /// Birth candidates closer than this collapse into one track.
    pub birth_merge_radius: f64,
    pub process_noise: ProcessNoise,
    pub ut_params: UnscentedParams,
    pub birth_prior: BirthPrior,
    pub classes: ClassRegistry,
    pub observable: ObservableSubset,
}

impl Default for FilterConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        let observable = ObservableSubset::new([
            (Feature::PosX, (-500.0, 500.0)),
            (Feature::PosY, (-500.0, 500.0)),
            (Feature::Heading, (-PI, PI)),
            (Feature::YawRate, (-2.0, 2.0)),
            (Feature::Speed, (-60.0, 60.0)),
            (Feature::Accel, (-10.0, 10.0)),
            (Feature::Width, (0.3, 30.0)),
            (Feature::Length, (0.3, 30.0)),
        ])
        .expect("default observable subset");
        FilterConfig {
            survival_probability: 0.99,
            r_prune: 1e-3,
            r_extract: 0.5,
            r_birth: 0.3,
            max_hypotheses: 100,
            gate_quantile: 0.999,
            lambda_c: 0.1,
            detection_model: DetectionModel::default(),
            birth_assoc_threshold: 0.1,
            birth_class_confidence: 0.9,
            birth_merge_radius: 2.0,
            process_noise: ProcessNoise::default(),
            ut_params: UnscentedParams::default(),
            birth_prior: BirthPrior::default(),
            classes: ClassRegistry::default(),
            observable,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.survival_probability && self.survival_probability <= 1.0) {
            return Err(Error::Config("survival probability must be in (0, 1]".into()));
        }
        if !(0.0 < self.r_prune && self.r_prune < self.r_extract && self.r_extract <= 1.0) {
            return Err(Error::Config("thresholds must satisfy 0 < r_prune < r_extract <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.r_birth) {
            return Err(Error::Config("birth existence must be in [0, 1]".into()));
        }
        if self.max_hypotheses == 0 {
            return Err(Error::Config("at least one hypothesis is required".into()));
        }
        Ok(())
    }
}

/// Chi-square gate threshold for a `d`-dimensional innovation.
fn gate_threshold(d: usize, quantile: f64) -> f64 {
    if quantile >= 1.0 {
        f64::INFINITY
    } else {
        ChiSquared::new(d as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(quantile)
    }
}

/// Expected detection probability of a track under a sensor, evaluated at
/// the predicted mean.
pub fn expected_detection_probability(
    track: &BernoulliTrack,
    sensor: &SensorProfile,
    dm: &DetectionModel,
) -> f64 {
    detection_probability(&track.state.mean, &sensor.covered_area, dm).clamp(1e-9, 1.0 - 1e-9)
}

/// Effective clutter density of a detection under a sensor, floored to keep
/// log-weights finite.
pub fn effective_clutter_density(
    det: &Detection,
    sensor: &SensorProfile,
    cfg: &FilterConfig,
) -> Result<f64> {
    let mf = MeasurementFunction::for_detection(det, crate::types::ReferencePoint::Center);
    let (z, _) = mf.slice_detection(det);
    let kappa = clutter_intensity(&z, mf.measured(), &cfg.observable, sensor.clutter_rate)?;
    Ok(kappa.max(CLUTTER_FLOOR))
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// LMB prediction: existence scaled by the survival probability, each state
/// propagated through the unscented CTRA model. Tracks whose propagation
/// fails numerically are dropped with a diagnostic.
pub fn predict_density(density: &LmbDensity, dt: f64, cfg: &FilterConfig) -> (LmbDensity, u64) {
    let mut dropped = 0;
    let tracks = density
        .tracks
        .iter()
        .filter_map(|t| {
            match unscented_predict(&t.state, dt, &cfg.process_noise, &cfg.ut_params) {
                Ok(state) => {
                    let mut t = t.clone();
                    t.existence *= cfg.survival_probability;
                    t.state = state;
                    Some(t)
                }
                Err(e) => {
                    log::warn!("dropping track {} during prediction: {e}", t.label);
                    dropped += 1;
                    None
                }
            }
        })
        .collect();
    (LmbDensity { tracks, cycle: density.cycle }, dropped)
}

// ---------------------------------------------------------------------------
// Measurement update
// ---------------------------------------------------------------------------

/// Per-cluster association summary produced by the update.
#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub track_labels: Vec<Label>,
    /// Indices into the input detection list.
    pub detection_indices: Vec<usize>,
    pub hypothesis_count: usize,
    /// Sum of normalized hypothesis weights (1 up to rounding).
    pub weight_sum: f64,
    /// `association[i][j]`: probability that cluster track `i` generated
    /// cluster detection `j`; the final column is the missed probability.
    pub association: Vec<Vec<f64>>,
    /// True when the ranked-assignment path truncated the hypothesis set.
    pub truncated: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SensorUpdateReport {
    pub clusters: Vec<ClusterReport>,
    /// Total association probability per input detection.
    pub detection_association: Vec<f64>,
    /// Detections below the birth threshold, by input index.
    pub unused: Vec<usize>,
    /// Ranked-assignment fallbacks to the best single hypothesis.
    pub fallbacks: u64,
}

/// Everything the update needs about one track/detection pair.
struct PairData {
    log_eta: f64,
    outcome: UpdateOutcome,
}

struct TrackData {
    prior: StateGaussian,
    existence: f64,
    p_detect: f64,
    log_miss: f64,
    /// Gated pairs keyed by detection index.
    pairs: BTreeMap<usize, PairData>,
}

fn build_track_data(
    track: &BernoulliTrack,
    dets: &[Detection],
    kappas: &[f64],
    sensor: &SensorProfile,
    cfg: &FilterConfig,
) -> Result<TrackData> {
    let sp: SigmaPoints = sigma_points(&track.state, &cfg.ut_params)?;
    let p_detect = expected_detection_probability(track, sensor, &cfg.detection_model);
    let r = track.existence.clamp(0.0, 1.0);
    let log_miss = (1.0 - r * p_detect).max(1e-300).ln();

    let mut pairs = BTreeMap::new();
    for (j, det) in dets.iter().enumerate() {
        // Reference point: transmitted, or the best of the three closest
        // corners by Mahalanobis distance.
        let candidates: Vec<_> = match det.reference_point {
            Some(zeta) => vec![zeta],
            None => candidate_reference_points(sensor.position, &track.state.mean).to_vec(),
        };
        let mut best: Option<(f64, MeasurementFunction, crate::measurement::MeasurementStats)> =
            None;
        for zeta in candidates {
            let mf = MeasurementFunction::for_detection(det, zeta);
            let (z, r_cov) = mf.slice_detection(det);
            let stats = measurement_stats(&sp, &track.state.mean, &mf, &r_cov);
            let m2 = match stats.mahalanobis_sq(&z, &mf) {
                Ok(m2) => m2,
                Err(_) => continue,
            };
            if best.as_ref().map_or(true, |(b, _, _)| m2 < *b) {
                best = Some((m2, mf, stats));
            }
        }
        let Some((m2, mf, stats)) = best else { continue };
        if m2 > gate_threshold(mf.dim(), cfg.gate_quantile) {
            continue;
        }
        let (z, _) = mf.slice_detection(det);
        let outcome = complete_update(&track.state, &stats, &z, &mf)?;
        let log_eta =
            r.max(1e-300).ln() + p_detect.ln() + outcome.log_likelihood - kappas[j].ln();
        pairs.insert(j, PairData { log_eta, outcome });
    }

    Ok(TrackData {
        prior: track.state.clone(),
        existence: r,
        p_detect,
        log_miss,
        pairs,
    })
}

/// Association map of one hypothesis: per cluster track, the local detection
/// index or `None` for missed.
type Hypothesis = Vec<Option<usize>>;

/// All association hypotheses of a cluster with their log weights.
fn enumerate_exhaustive(
    tracks: &[&TrackData],
    detections: &[usize],
) -> Vec<(Hypothesis, f64)> {
    fn recurse(
        tracks: &[&TrackData],
        detections: &[usize],
        idx: usize,
        used: &mut Vec<bool>,
        current: &mut Hypothesis,
        log_w: f64,
        out: &mut Vec<(Hypothesis, f64)>,
    ) {
        if idx == tracks.len() {
            out.push((current.clone(), log_w));
            return;
        }
        let td = tracks[idx];
        current.push(None);
        recurse(tracks, detections, idx + 1, used, current, log_w + td.log_miss, out);
        current.pop();
        for (local, det_idx) in detections.iter().enumerate() {
            if used[local] {
                continue;
            }
            if let Some(pair) = td.pairs.get(det_idx) {
                used[local] = true;
                current.push(Some(local));
                recurse(tracks, detections, idx + 1, used, current, log_w + pair.log_eta, out);
                current.pop();
                used[local] = false;
            }
        }
    }
    let mut out = Vec::new();
    recurse(
        tracks,
        detections,
        0,
        &mut vec![false; detections.len()],
        &mut Vec::new(),
        0.0,
        &mut out,
    );
    out
}

/// K-best hypotheses via ranked assignment over the negative log weights.
/// Column layout: one column per cluster detection, then one missed column
/// per track.
fn enumerate_ranked(
    tracks: &[&TrackData],
    detections: &[usize],
    k: usize,
) -> Option<Vec<(Hypothesis, f64)>> {
    let n = tracks.len();
    let m = detections.len();
    let mut cost = DMatrix::from_element(n, m + n, f64::INFINITY);
    for (i, td) in tracks.iter().enumerate() {
        cost[(i, m + i)] = -td.log_miss;
        for (local, det_idx) in detections.iter().enumerate() {
            if let Some(pair) = td.pairs.get(det_idx) {
                cost[(i, local)] = -pair.log_eta;
            }
        }
    }
    let solutions = k_best_assignments(&cost, k);
    if solutions.is_empty() {
        return None;
    }
    Some(
        solutions
            .into_iter()
            .map(|sol| {
                let hyp: Hypothesis = sol
                    .assignment
                    .iter()
                    .map(|&col| if col < m { Some(col) } else { None })
                    .collect();
                (hyp, -sol.cost)
            })
            .collect(),
    )
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct ClusterResult {
    tracks: Vec<BernoulliTrack>,
    report: ClusterReport,
    fallback: bool,
}

#[allow(clippy::too_many_arguments)]
fn update_cluster(
    track_indices: &[usize],
    detection_indices: &[usize],
    data: &[TrackData],
    prior_tracks: &[BernoulliTrack],
    dets: &[Detection],
    cfg: &FilterConfig,
    cycle: u64,
) -> ClusterResult {
    let cluster_data: Vec<&TrackData> = track_indices.iter().map(|&i| &data[i]).collect();
    let exhaustive = cluster_data.len() <= EXHAUSTIVE_LIMIT
        && detection_indices.len() <= EXHAUSTIVE_LIMIT;

    let mut fallback = false;
    let (hypotheses, truncated) = if exhaustive {
        (enumerate_exhaustive(&cluster_data, detection_indices), false)
    } else {
        match enumerate_ranked(&cluster_data, detection_indices, cfg.max_hypotheses) {
            Some(h) => {
                let truncated = h.len() == cfg.max_hypotheses;
                (h, truncated)
            }
            None => {
                // Degenerate ranked assignment: keep the all-missed
                // hypothesis so the update stays well defined.
                fallback = true;
                let log_w: f64 = cluster_data.iter().map(|td| td.log_miss).sum();
                (vec![(vec![None; cluster_data.len()], log_w)], true)
            }
        }
    };

    // Normalize hypothesis weights in the log domain.
    let log_norm = log_sum_exp(hypotheses.iter().map(|(_, w)| *w));
    let weights: Vec<f64> = hypotheses.iter().map(|(_, w)| (w - log_norm).exp()).collect();
    let weight_sum: f64 = weights.iter().sum();

    // Marginal association probabilities: rows are cluster tracks, columns
    // cluster detections plus a trailing missed column.
    let m = detection_indices.len();
    let mut association = vec![vec![0.0f64; m + 1]; cluster_data.len()];
    for ((hyp, _), w) in hypotheses.iter().zip(&weights) {
        for (i, assignment) in hyp.iter().enumerate() {
            match assignment {
                Some(local) => association[i][*local] += w,
                None => association[i][m] += w,
            }
        }
    }

    // Collapse per track: existence and moment-matched state posterior.
    let mut out_tracks = Vec::with_capacity(track_indices.len());
    for (row, &track_idx) in track_indices.iter().enumerate() {
        let td = &data[track_idx];
        let prior_track = &prior_tracks[track_idx];
        let beta_miss = association[row][m];
        let r_miss_denom = (1.0 - td.existence * td.p_detect).max(1e-12);
        let r_miss = td.existence * (1.0 - td.p_detect) / r_miss_denom;

        let mut components: Vec<(f64, &StateGaussian, Option<usize>)> = Vec::new();
        let mut r_post = beta_miss * r_miss;
        components.push((beta_miss * r_miss, &td.prior, None));
        for (local, &det_idx) in detection_indices.iter().enumerate() {
            let beta = association[row][local];
            if beta <= 0.0 {
                continue;
            }
            let pair = td.pairs.get(&det_idx).expect("gated pair");
            r_post += beta;
            components.push((beta, &pair.outcome.posterior, Some(det_idx)));
        }
        let r_post = r_post.clamp(0.0, 1.0);

        let total: f64 = components.iter().map(|(w, _, _)| *w).sum();
        let state = if total > 1e-300 {
            moment_match(
                &components
                    .iter()
                    .map(|(w, g, _)| (*w / total, *g))
                    .collect::<Vec<_>>(),
            )
        } else {
            td.prior.clone()
        };

        // Class posterior: assigned components fold in the detections' class
        // measurements.
        let class_posterior = if total > 1e-300 {
            let mixed: Vec<(f64, ClassPosterior)> = components
                .iter()
                .map(|(w, _, det_idx)| {
                    let mut post = prior_track.class_posterior.clone();
                    if let Some(det_idx) = det_idx {
                        if let Some(cm) = &dets[*det_idx].object_class {
                            post.update(cm);
                        }
                    }
                    (*w / total, post)
                })
                .collect();
            ClassPosterior::mix(
                &mixed.iter().map(|(w, p)| (*w, p)).collect::<Vec<_>>(),
            )
        } else {
            prior_track.class_posterior.clone()
        };

        let mut updated = prior_track.clone();
        updated.existence = r_post;
        updated.state = state;
        updated.class_posterior = class_posterior;

        // Most probable component drives the bookkeeping attributes.
        let map_component = components
            .iter()
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .expect("at least the missed component");
        if let Some(det_idx) = map_component.2 {
            updated.last_update_cycle = cycle;
            if let Some(h) = dets[det_idx].value_of(Feature::Height) {
                updated.observe_height(h);
            }
        }
        out_tracks.push(updated);
    }

    ClusterResult {
        tracks: out_tracks,
        report: ClusterReport {
            track_labels: track_indices.iter().map(|&i| prior_tracks[i].label).collect(),
            detection_indices: detection_indices.to_vec(),
            hypothesis_count: hypotheses.len(),
            weight_sum,
            association,
            truncated,
        },
        fallback,
    }
}

/// Moment-matches a Gaussian mixture to a single Gaussian; weights must sum
/// to one. The heading component is averaged circularly.
fn moment_match(components: &[(f64, &StateGaussian)]) -> StateGaussian {
    let mut mean = StateVec::zeros();
    let (mut sin_sum, mut cos_sum) = (0.0, 0.0);
    for (w, g) in components {
        mean += *w * g.mean;
        sin_sum += w * g.mean[2].sin();
        cos_sum += w * g.mean[2].cos();
    }
    mean[2] = sin_sum.atan2(cos_sum);
    let mut cov = StateCov::zeros();
    for (w, g) in components {
        let r = state_residual(&g.mean, &mean);
        cov += *w * (g.cov + r * r.transpose());
    }
    StateGaussian::new(mean, crate::motion::ensure_psd(&cov, 0.0))
}

/// Connected components of the gating graph: tracks sharing a gated
/// detection land in one cluster.
fn partition_clusters(data: &[TrackData], n_dets: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = data.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    let mut det_owner: Vec<Option<usize>> = vec![None; n_dets];
    for (i, td) in data.iter().enumerate() {
        for (&j, _) in &td.pairs {
            match det_owner[j] {
                Some(first) => {
                    let a = find(&mut parent, first);
                    let b = find(&mut parent, i);
                    parent[a.max(b)] = a.min(b);
                }
                None => det_owner[j] = Some(i),
            }
        }
    }

    let mut clusters: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().0.push(i);
    }
    for (j, owner) in det_owner.iter().enumerate() {
        if let Some(first) = owner {
            let root = find(&mut parent, *first);
            clusters.entry(root).or_default().1.push(j);
        }
    }
    clusters.into_values().collect()
}

/// Single-sensor LMB update; returns the posterior density and the detections
/// left unexplained (birth candidates).
pub fn update_one_sensor(
    density: &LmbDensity,
    dets: &[Detection],
    sensor: &SensorProfile,
    cfg: &FilterConfig,
) -> Result<(LmbDensity, Vec<Detection>)> {
    let (updated, report) = update_one_sensor_with_report(density, dets, sensor, cfg)?;
    let unused = report.unused.iter().map(|&j| dets[j].clone()).collect();
    Ok((updated, unused))
}

/// Single-sensor LMB update with the full association report.
pub fn update_one_sensor_with_report(
    density: &LmbDensity,
    dets: &[Detection],
    sensor: &SensorProfile,
    cfg: &FilterConfig,
) -> Result<(LmbDensity, SensorUpdateReport)> {
    for det in dets {
        det.validate()?;
        if det.sensor_id != sensor.sensor_id {
            return Err(Error::Validation(format!(
                "detection from {} in a batch for {}",
                det.sensor_id, sensor.sensor_id
            )));
        }
    }

    let kappas = dets
        .iter()
        .map(|det| effective_clutter_density(det, sensor, cfg))
        .collect::<Result<Vec<_>>>()?;

    let data = density
        .tracks
        .par_iter()
        .map(|track| build_track_data(track, dets, &kappas, sensor, cfg))
        .collect::<Result<Vec<_>>>()?;

    let clusters = partition_clusters(&data, dets.len());
    let results: Vec<ClusterResult> = clusters
        .par_iter()
        .map(|(tracks, cluster_dets)| {
            update_cluster(tracks, cluster_dets, &data, &density.tracks, dets, cfg, density.cycle)
        })
        .collect();

    let mut report = SensorUpdateReport {
        detection_association: vec![0.0; dets.len()],
        ..SensorUpdateReport::default()
    };
    let mut out_tracks = Vec::with_capacity(density.tracks.len());
    for result in results {
        for (row, track) in result.tracks.into_iter().enumerate() {
            for (local, &det_idx) in result.report.detection_indices.iter().enumerate() {
                report.detection_association[det_idx] += result.report.association[row][local];
            }
            out_tracks.push(track);
        }
        if result.fallback {
            report.fallbacks += 1;
        }
        report.clusters.push(result.report);
    }
    out_tracks.sort_by_key(|t| t.label);

    report.unused = report
        .detection_association
        .iter()
        .enumerate()
        .filter(|(_, &p)| p < cfg.birth_assoc_threshold)
        .map(|(j, _)| j)
        .collect();

    Ok((
        LmbDensity { tracks: out_tracks, cycle: density.cycle },
        report,
    ))
}

// ---------------------------------------------------------------------------
// Adaptive birth
// ---------------------------------------------------------------------------

/// Rectangle vertex whose corner offset points most towards the sensor; the
/// corner a sensor sees best for an object at the detection position.
fn likely_reference_point(
    det_pos: Point,
    sensor_pos: Point,
    heading: f64,
    width: f64,
    length: f64,
) -> crate::types::ReferencePoint {
    let towards = sensor_pos - det_pos;
    crate::types::CORNERS
        .into_iter()
        .map(|zeta| {
            let off = corner_offset(zeta, heading, width, length).expect("corner");
            (off.dot(&towards), zeta)
        })
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|(_, zeta)| zeta)
        .expect("four corners")
}

struct BirthCandidate {
    mean: StateVec,
    cov: StateCov,
    class_posterior: ClassPosterior,
    height: f64,
    measured_count: usize,
}

fn birth_candidate(
    det: &Detection,
    cfg: &FilterConfig,
    sensors: &[SensorProfile],
) -> Option<BirthCandidate> {
    let full_state = FILTER_FEATURES.iter().all(|f| det.measured.contains(f));
    let confident_class = det
        .object_class
        .as_ref()
        .filter(|cm| cm.confidence >= cfg.birth_class_confidence);
    if !full_state && confident_class.is_none() {
        return None;
    }

    let class = confident_class
        .map(|cm| cm.class.clone())
        .unwrap_or_else(crate::types::ObjectClass::unknown);
    let Ok((def_w, def_l, def_h)) = cfg.classes.class_defaults(&class) else {
        log::warn!("birth candidate with unregistered class {class}; skipping");
        return None;
    };

    let sensor = sensors.iter().find(|s| s.sensor_id == det.sensor_id)?;
    let prior = &cfg.birth_prior;
    let heading = det.value_of(Feature::Heading).unwrap_or(prior.heading);
    let width = det.value_of(Feature::Width).unwrap_or(def_w);
    let length = det.value_of(Feature::Length).unwrap_or(def_l);
    let det_pos = Point::new(
        det.value_of(Feature::PosX).expect("validated"),
        det.value_of(Feature::PosY).expect("validated"),
    );
    let zeta = det.reference_point.unwrap_or_else(|| {
        likely_reference_point(det_pos, sensor.position, heading, width, length)
    });
    let offset = corner_offset(zeta, heading, width, length).expect("corner");
    let center = det_pos - offset;

    // Reject candidates outside every registered field of view.
    if !sensors.iter().any(|s| s.covered_area.contains(center)) {
        return None;
    }

    let mut mean = StateVec::zeros();
    mean[0] = center.x;
    mean[1] = center.y;
    mean[2] = wrap_angle(heading);
    mean[3] = det.value_of(Feature::YawRate).unwrap_or(0.0);
    mean[4] = det.value_of(Feature::Speed).unwrap_or(0.0);
    mean[5] = det.value_of(Feature::Accel).unwrap_or(0.0);
    mean[6] = width;
    mean[7] = length;

    let mut cov = StateCov::zeros();
    let row_of = |f: Feature| det.measured.iter().position(|&m| m == f);
    let (px, py) = (row_of(Feature::PosX).unwrap(), row_of(Feature::PosY).unwrap());
    cov[(0, 0)] = det.covariance[(px, px)];
    cov[(1, 1)] = det.covariance[(py, py)];
    cov[(0, 1)] = det.covariance[(px, py)];
    cov[(1, 0)] = det.covariance[(py, px)];
    // Corner-to-center conversion is exact only when both the heading and
    // the reference point are known; otherwise inflate by the offset scale.
    if det.value_of(Feature::Heading).is_none() || det.reference_point.is_none() {
        let inflation = offset.norm_squared();
        cov[(0, 0)] += inflation;
        cov[(1, 1)] += inflation;
    }
    let variance_or = |f: Feature, fallback: f64| {
        row_of(f).map(|r| det.covariance[(r, r)]).unwrap_or(fallback)
    };
    cov[(2, 2)] = variance_or(Feature::Heading, prior.heading_var);
    cov[(3, 3)] = variance_or(Feature::YawRate, prior.yaw_rate_var);
    cov[(4, 4)] = variance_or(Feature::Speed, prior.speed_var);
    cov[(5, 5)] = variance_or(Feature::Accel, prior.accel_var);
    cov[(6, 6)] = variance_or(Feature::Width, prior.extent_var);
    cov[(7, 7)] = variance_or(Feature::Length, prior.extent_var);

    let class_posterior = match &det.object_class {
        Some(cm) if cfg.classes.spec(&cm.class).is_ok() => {
            ClassPosterior::from_measurement(&cfg.classes, cm)
        }
        _ => ClassPosterior::uniform(&cfg.classes),
    };

    let mut candidate = BirthCandidate {
        mean,
        cov,
        class_posterior,
        height: def_h,
        measured_count: det.measured.len(),
    };
    if let Some(h) = det.value_of(Feature::Height) {
        candidate.height = h;
    }
    Some(candidate)
}

/// Builds newborn tracks from unexplained detections.
///
/// A birth requires either the full filter feature vector or a class
/// measurement above the confidence threshold; class defaults fill in the
/// unmeasured extent. Candidates closer than the merge radius collapse into
/// one track (the one measuring the most features wins), and candidates
/// outside every covered area are rejected.
pub fn birth_from_detections(
    unused: &[Detection],
    cfg: &FilterConfig,
    sensors: &[SensorProfile],
    cycle: u64,
    next_label: &mut u64,
) -> Vec<BernoulliTrack> {
    let mut accepted: Vec<BirthCandidate> = Vec::new();
    for det in unused {
        let Some(candidate) = birth_candidate(det, cfg, sensors) else { continue };
        let pos = Point::new(candidate.mean[0], candidate.mean[1]);
        let duplicate = accepted.iter_mut().find(|c| {
            (Point::new(c.mean[0], c.mean[1]) - pos).norm() < cfg.birth_merge_radius
        });
        match duplicate {
            Some(existing) => {
                if candidate.measured_count > existing.measured_count {
                    *existing = candidate;
                }
            }
            None => accepted.push(candidate),
        }
    }

    accepted
        .into_iter()
        .map(|c| {
            let label = Label(*next_label);
            *next_label += 1;
            BernoulliTrack {
                label,
                existence: cfg.r_birth,
                state: StateGaussian::new(c.mean, c.cov),
                class_posterior: c.class_posterior,
                height: c.height,
                height_samples: 0,
                birth_cycle: cycle,
                last_update_cycle: cycle,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lifecycle
// ---------------------------------------------------------------------------

/// Removes tracks below the prune threshold and returns the extractable set.
pub fn prune_and_extract(
    density: &LmbDensity,
    cfg: &FilterConfig,
) -> (LmbDensity, Vec<BernoulliTrack>) {
    let kept: Vec<BernoulliTrack> = density
        .tracks
        .iter()
        .filter(|t| t.existence >= cfg.r_prune)
        .cloned()
        .collect();
    let extracted = kept
        .iter()
        .filter(|t| t.existence >= cfg.r_extract)
        .cloned()
        .collect();
    (LmbDensity { tracks: kept, cycle: density.cycle }, extracted)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FilterDiagnostics {
    pub dropped_tracks: u64,
    pub ranked_fallbacks: u64,
    pub births: u64,
    pub pruned: u64,
}

/// Stateful filter front end: owns the density, the label allocator and the
/// cycle counter.
#[derive(Debug, Clone)]
pub struct LmbFilter {
    pub cfg: FilterConfig,
    density: LmbDensity,
    next_label: u64,
    pub diagnostics: FilterDiagnostics,
}

impl LmbFilter {
    pub fn new(cfg: FilterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LmbFilter {
            cfg,
            density: LmbDensity::default(),
            next_label: 1,
            diagnostics: FilterDiagnostics::default(),
        })
    }

    pub fn density(&self) -> &LmbDensity {
        &self.density
    }

    pub fn cycle(&self) -> u64 {
        self.density.cycle
    }

    /// Predicts all tracks forward by `dt` seconds.
    pub fn predict(&mut self, dt: f64) {
        let (density, dropped) = predict_density(&self.density, dt, &self.cfg);
        self.density = density;
        self.diagnostics.dropped_tracks += dropped;
    }

    /// One fusion cycle: sequential per-sensor updates in batch order, then
    /// adaptive birth from the detections no sensor update explained.
    pub fn update_cycle(&mut self, batches: &[(SensorProfile, Vec<Detection>)]) -> Result<()> {
        self.density.cycle += 1;
        let mut unused_all: Vec<Detection> = Vec::new();
        let mut profiles: Vec<SensorProfile> = Vec::new();
        for (profile, dets) in batches {
            let (density, report) =
                update_one_sensor_with_report(&self.density, dets, profile, &self.cfg)?;
            self.density = density;
            self.diagnostics.ranked_fallbacks += report.fallbacks;
            unused_all.extend(report.unused.iter().map(|&j| dets[j].clone()));
            profiles.push(profile.clone());
        }
        let births = birth_from_detections(
            &unused_all,
            &self.cfg,
            &profiles,
            self.density.cycle,
            &mut self.next_label,
        );
        self.diagnostics.births += births.len() as u64;
        self.density.tracks.extend(births);
        self.density.sort_by_label();
        Ok(())
    }

    /// Prunes low-existence tracks and returns the extractable set.
    pub fn prune_and_extract(&mut self) -> Vec<BernoulliTrack> {
        let before = self.density.tracks.len();
        let (density, extracted) = prune_and_extract(&self.density, &self.cfg);
        self.diagnostics.pruned += (before - density.tracks.len()) as u64;
        self.density = density;
        extracted
    }
}
