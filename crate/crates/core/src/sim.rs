//! Simulation harness: T-junction scenarios with three distributed sensors
//! and three vehicles, noisy corner-referenced detections, missed detections
//! and Poisson clutter, plus seeded Monte Carlo batches through the filter.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{candidate_reference_points, corner_offset};
use crate::interface::{CycleBuffer, DownlinkMessage, Registry, SensorProfile, UplinkMessage};
use crate::lmb::{FilterConfig, FilterDiagnostics, LmbFilter};
use crate::measurement::ObservableSubset;
use crate::metrics::{
    length_mse, ospat_curve, LabelCorrespondence, LengthError, OspatConfig, TrackSnapshot,
};
use crate::motion::ctra_transition;
use crate::types::{
    ClassMeasurement, Detection, Feature, ObjectClass, SensorId, StateVec,
};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_DT: f64 = 0.1;
pub const SIGMA_GRID: [f64; 3] = [0.5, 1.0, 1.5];

/// One simulated sensor site.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SensorPlacement {
    pub id: u32,
    pub name: String,
    pub position: [f64; 2],
    pub orientation: f64,
}

/// Piecewise-constant CTRA segment: the yaw rate and acceleration driving a
/// number of simulation steps.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Segment {
    pub steps: usize,
    pub yaw_rate: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VehicleSpec {
    pub name: String,
    pub width: f64,
    pub length: f64,
    pub height: f64,
    /// Initial `[x, y, heading, speed]`.
    pub start: [f64; 4],
    pub segments: Vec<Segment>,
}

/// Full description of one simulated experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioConfig {
    /// 1: all sensors measure position only. 2: A and B add width, C adds
    /// length.
    pub scenario: u8,
    /// Longitudinal position noise; lateral and extent noise are half of it.
    pub sigma: f64,
    pub trials: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub p_detect: f64,
    pub clutter_rate: f64,
    /// Whether sensors transmit the reference point or leave the selection
    /// to the filter.
    pub transmit_reference_points: bool,
    /// Class-confidence draw for real detections, uniform in this range.
    pub class_confidence_range: [f64; 2],
    pub scene_min: [f64; 2],
    pub scene_max: [f64; 2],
    /// Covered areas extend the scene box by this margin.
    pub fov_margin: f64,
    pub sensors: Vec<SensorPlacement>,
    pub vehicles: Vec<VehicleSpec>,
}

impl ScenarioConfig {
    /// The T-junction setup: two vehicles passing in opposite directions on
    /// the major road, a third merging in front of the eastbound one, three
    /// sensors in the scene corners covering everything.
    pub fn for_scenario(scenario: u8, sigma: f64) -> Result<Self> {
        if !(scenario == 1 || scenario == 2) {
            return Err(Error::Config(format!("scenario must be 1 or 2, got {scenario}")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        let aim = |from: [f64; 2]| (20.0 - from[1]).atan2(50.0 - from[0]);
        let turn_steps = 13usize;
        let turn_rate = -(std::f64::consts::FRAC_PI_2) / (turn_steps as f64 * DEFAULT_DT);
        Ok(ScenarioConfig {
            scenario,
            sigma,
            trials: 100,
            steps: DEFAULT_STEPS,
            dt: DEFAULT_DT,
            seed: 1,
            p_detect: 0.95,
            clutter_rate: 0.1,
            transmit_reference_points: false,
            class_confidence_range: [0.3, 1.0],
            scene_min: [0.0, 0.0],
            scene_max: [100.0, 40.0],
            fov_margin: 5.0,
            sensors: vec![
                SensorPlacement {
                    id: 1,
                    name: "A".into(),
                    position: [0.0, 40.0],
                    orientation: aim([0.0, 40.0]),
                },
                SensorPlacement {
                    id: 2,
                    name: "B".into(),
                    position: [0.0, 0.0],
                    orientation: aim([0.0, 0.0]),
                },
                SensorPlacement {
                    id: 3,
                    name: "C".into(),
                    position: [100.0, 0.0],
                    orientation: aim([100.0, 0.0]),
                },
            ],
            vehicles: vec![
                VehicleSpec {
                    name: "east".into(),
                    width: 1.8,
                    length: 4.8,
                    height: 1.5,
                    start: [6.0, 19.0, 0.0, 12.0],
                    segments: vec![Segment { steps: 60, yaw_rate: 0.0, accel: 0.0 }],
                },
                VehicleSpec {
                    name: "west".into(),
                    width: 1.9,
                    length: 5.2,
                    height: 1.5,
                    start: [71.0, 21.0, std::f64::consts::PI, 13.0],
                    segments: vec![Segment { steps: 60, yaw_rate: 0.0, accel: 0.0 }],
                },
                VehicleSpec {
                    name: "merge".into(),
                    width: 1.75,
                    length: 4.5,
                    height: 1.5,
                    start: [41.0, 8.0, std::f64::consts::FRAC_PI_2, 7.0],
                    segments: vec![
                        Segment { steps: 7, yaw_rate: 0.0, accel: 0.0 },
                        Segment { steps: turn_steps, yaw_rate: turn_rate, accel: 0.0 },
                        Segment { steps: 60, yaw_rate: 0.0, accel: 2.0 },
                    ],
                },
            ],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scenario == 1 || self.scenario == 2) {
            return Err(Error::Config("scenario must be 1 or 2".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config("at least two steps are required".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_detect) {
            return Err(Error::Config("p_detect must be in [0, 1]".into()));
        }
        let [lo, hi] = self.class_confidence_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("class confidence range must be ordered within [0, 1]".into()));
        }
        if self.scene_max[0] <= self.scene_min[0] || self.scene_max[1] <= self.scene_min[1] {
            return Err(Error::Config("scene box must have positive area".into()));
        }
        for v in &self.vehicles {
            if v.width <= 0.0 || v.length <= 0.0 {
                return Err(Error::Config(format!("vehicle {} has non-positive extent", v.name)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)
            .map_err(|e| Error::schema("scenario", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Measured feature set of the sensor at `index` under this scenario.
    pub fn measured_features(&self, index: usize) -> Vec<Feature> {
        let mut features = vec![Feature::PosX, Feature::PosY];
        if self.scenario == 2 {
            // Sensors A and B measure the width, C the length.
            if index <= 1 {
                features.push(Feature::Width);
            } else {
                features.push(Feature::Length);
            }
        }
        features
    }

    fn fov_polygon(&self) -> Vec<[f64; 2]> {
        let m = self.fov_margin;
        vec![
            [self.scene_min[0] - m, self.scene_min[1] - m],
            [self.scene_max[0] + m, self.scene_min[1] - m],
            [self.scene_max[0] + m, self.scene_max[1] + m],
            [self.scene_min[0] - m, self.scene_max[1] + m],
        ]
    }

    pub fn sensor_profiles(&self) -> Result<Vec<SensorProfile>> {
        self.sensors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                SensorProfile::new(
                    SensorId(s.id),
                    "simulated",
                    s.position,
                    s.orientation,
                    self.fov_polygon(),
                    self.measured_features(i),
                    self.clutter_rate,
                )
            })
            .collect()
    }

    /// Observable subset shared by the clutter generator and the filter's
    /// clutter intensity: scene box for positions, car bounds for extents.
    pub fn observable_subset(&self) -> Result<ObservableSubset> {
        let classes = crate::types::ClassRegistry::default();
        let car = classes.spec(&ObjectClass::car())?.clone();
        ObservableSubset::new([
            (Feature::PosX, (self.scene_min[0], self.scene_max[0])),
            (Feature::PosY, (self.scene_min[1], self.scene_max[1])),
            (Feature::Width, car.width_bounds),
            (Feature::Length, car.length_bounds),
        ])
    }

    /// Filter configuration calibrated for these scenarios.
    pub fn filter_config(&self) -> Result<FilterConfig> {
        let mut cfg = FilterConfig::default();
        cfg.detection_model.lambda_d = self.p_detect;
        cfg.lambda_c = self.clutter_rate;
        cfg.observable = self.observable_subset()?;
        Ok(cfg)
    }
}

/// Ground-truth states of all objects over all steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub objects: Vec<TruthObject>,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthObject {
    pub label: u64,
    pub name: String,
    pub width: f64,
    pub length: f64,
    pub height: f64,
    /// Full filter state per step; yaw rate and acceleration hold the values
    /// driving the step that follows.
    pub states: Vec<StateVec>,
}

impl GroundTruth {
    /// Snapshots of all objects at one step.
    pub fn snapshots(&self, step: usize) -> Vec<TrackSnapshot> {
        self.objects
            .iter()
            .map(|o| TrackSnapshot::new(o.label, o.states[step][0], o.states[step][1], o.length))
            .collect()
    }

    pub fn steps(&self) -> usize {
        self.objects.first().map_or(0, |o| o.states.len())
    }
}

/// Expands a vehicle's segment list into per-step (yaw rate, acceleration)
/// pairs; the last segment is extended to cover the configured horizon.
fn per_step_params(segments: &[Segment], steps: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(steps);
    for seg in segments {
        for _ in 0..seg.steps {
            if out.len() == steps {
                return out;
            }
            out.push((seg.yaw_rate, seg.accel));
        }
    }
    let last = out.last().copied().unwrap_or((0.0, 0.0));
    while out.len() < steps {
        out.push(last);
    }
    out
}

/// Generates deterministic CTRA-consistent trajectories from the vehicle
/// specs. Trial-independent: the truth depends only on the configuration.
pub fn generate_truth(cfg: &ScenarioConfig) -> GroundTruth {
    let objects = cfg
        .vehicles
        .iter()
        .enumerate()
        .map(|(idx, v)| {
            let params = per_step_params(&v.segments, cfg.steps);
            let mut states = Vec::with_capacity(cfg.steps);
            let mut state = StateVec::from_row_slice(&[
                v.start[0], v.start[1], v.start[2], params[0].0, v.start[3], params[0].1,
                v.width, v.length,
            ]);
            states.push(state);
            for k in 1..cfg.steps {
                state = ctra_transition(&state, cfg.dt);
                state[3] = params[k].0;
                state[5] = params[k].1;
                states.push(state);
            }
            TruthObject {
                label: idx as u64 + 1,
                name: v.name.clone(),
                width: v.width,
                length: v.length,
                height: v.height,
                states,
            }
        })
        .collect();
    GroundTruth { objects, dt: cfg.dt }
}

/// Simulates one sensor's uplink message for one truth step: per visible
/// object a detection at the nearest rectangle corner with probability
/// `p_detect`, noise drawn in sensor coordinates and rotated into the global
/// frame, plus Poisson clutter uniform over the observable subset.
pub fn simulate_sensor(
    truth: &GroundTruth,
    step: usize,
    profile: &SensorProfile,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha12Rng,
) -> Result<UplinkMessage> {
    let timestamp = step as f64 * cfg.dt;
    let sigma = cfg.sigma;
    let longitudinal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let lateral = Normal::new(0.0, sigma / 2.0).map_err(|e| Error::Config(e.to_string()))?;
    let extent_noise = Normal::new(0.0, sigma / 2.0).map_err(|e| Error::Config(e.to_string()))?;
    let (sin_o, cos_o) = profile.orientation.sin_cos();

    // Global-frame position covariance: R rotated by the sensor orientation.
    let var_l = sigma * sigma;
    let var_t = sigma * sigma / 4.0;
    let cov_xx = cos_o * cos_o * var_l + sin_o * sin_o * var_t;
    let cov_yy = sin_o * sin_o * var_l + cos_o * cos_o * var_t;
    let cov_xy = sin_o * cos_o * (var_l - var_t);

    let subset = cfg.observable_subset()?;
    let mut objects = Vec::new();
    for obj in &truth.objects {
        let state = &obj.states[step];
        if !profile
            .covered_area
            .contains(crate::geometry::Point::new(state[0], state[1]))
        {
            continue;
        }
        if !rng.random_bool(cfg.p_detect) {
            continue;
        }
        let zeta = candidate_reference_points(profile.position, state)[0];
        let offset = corner_offset(zeta, state[2], state[6], state[7]).expect("corner");
        let n_l = longitudinal.sample(rng);
        let n_t = lateral.sample(rng);
        let mut measured = vec![Feature::PosX, Feature::PosY];
        let mut values = vec![
            state[0] + offset.x + cos_o * n_l - sin_o * n_t,
            state[1] + offset.y + sin_o * n_l + cos_o * n_t,
        ];
        let mut cov = vec![cov_xx, cov_xy, cov_yy];
        for f in &profile.measured {
            match f {
                Feature::Width => {
                    measured.push(Feature::Width);
                    values.push((obj.width + extent_noise.sample(rng)).max(0.1));
                    cov.extend([0.0, 0.0, var_t]);
                }
                Feature::Length => {
                    measured.push(Feature::Length);
                    values.push((obj.length + extent_noise.sample(rng)).max(0.1));
                    cov.extend([0.0, 0.0, var_t]);
                }
                _ => {}
            }
        }
        let d = measured.len();
        let confidence =
            rng.random_range(cfg.class_confidence_range[0]..=cfg.class_confidence_range[1]);
        objects.push(Detection {
            sensor_id: profile.sensor_id,
            timestamp,
            measured,
            values: nalgebra::DVector::from_vec(values),
            covariance: lower_to_full(&cov, d),
            reference_point: cfg.transmit_reference_points.then_some(zeta),
            object_class: Some(ClassMeasurement { class: ObjectClass::car(), confidence }),
            label: None,
        });
    }

    // Clutter: Poisson count, uniform over the observable subset.
    let clutter_count = if cfg.clutter_rate > 0.0 {
        let poisson =
            Poisson::new(cfg.clutter_rate).map_err(|e| Error::Config(e.to_string()))?;
        poisson.sample(rng) as usize
    } else {
        0
    };
    for _ in 0..clutter_count {
        let mut values = Vec::with_capacity(profile.measured.len());
        let mut cov = Vec::new();
        for (i, f) in profile.measured.iter().enumerate() {
            let (lo, hi) = subset
                .interval(*f)
                .ok_or_else(|| Error::Config(format!("no observable interval for {f}")))?;
            values.push(rng.random_range(lo..hi));
            match f {
                Feature::PosX => cov.push(cov_xx),
                Feature::PosY => {
                    cov.push(cov_xy);
                    cov.push(cov_yy);
                }
                _ => {
                    cov.extend(std::iter::repeat(0.0).take(i));
                    cov.push(var_t);
                }
            }
        }
        let d = profile.measured.len();
        objects.push(Detection {
            sensor_id: profile.sensor_id,
            timestamp,
            measured: profile.measured.clone(),
            values: nalgebra::DVector::from_vec(values),
            covariance: lower_to_full(&cov, d),
            reference_point: None,
            object_class: None,
            label: None,
        });
    }

    Ok(UplinkMessage::new(timestamp, profile.sensor_id, objects))
}

fn lower_to_full(lower: &[f64], d: usize) -> nalgebra::DMatrix<f64> {
    let mut m = nalgebra::DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            m[(i, j)] = lower[idx];
            m[(j, i)] = lower[idx];
            idx += 1;
        }
    }
    m
}

/// SplitMix64 step; decorrelates per-trial seeds from the master seed.
fn trial_seed(master: u64, trial: u64) -> u64 {
    let mut z = master
        .wrapping_add(trial.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outputs of one simulated trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    /// Downlink message per step (extracted tracks).
    pub downlink: Vec<DownlinkMessage>,
    pub ospat: Vec<f64>,
    pub correspondence: LabelCorrespondence,
    pub length_errors: BTreeMap<u64, LengthError>,
    pub diagnostics: FilterDiagnostics,
    pub wall_seconds: f64,
}

impl TrialResult {
    /// Estimated-track snapshots per step (label, position, length).
    pub fn snapshots(&self) -> Vec<Vec<TrackSnapshot>> {
        self.downlink
            .iter()
            .map(|msg| {
                msg.tracks
                    .iter()
                    .map(|t| TrackSnapshot::new(t.label.0, t.state[0], t.state[1], t.state[7]))
                    .collect()
            })
            .collect()
    }
}

/// Runs one seeded trial: truth generation, sensor simulation, ingestion
/// through the cycle buffer and the filter recursion, returning per-step
/// extracted tracks and evaluation curves.
pub fn run_trial(cfg: &ScenarioConfig, trial: usize) -> Result<TrialResult> {
    cfg.validate()?;
    let started = Instant::now();
    let truth = generate_truth(cfg);
    let profiles = cfg.sensor_profiles()?;

    let mut registry = Registry::new();
    for p in &profiles {
        registry.register(p.clone())?;
    }
    let mut buffer = CycleBuffer::new(cfg.dt)?;
    let mut filter = LmbFilter::new(cfg.filter_config()?)?;
    let mut rng = ChaCha12Rng::seed_from_u64(trial_seed(cfg.seed, trial as u64));

    let mut downlink = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        for profile in &profiles {
            let msg = simulate_sensor(&truth, k, profile, cfg, &mut rng)?;
            buffer.ingest(msg, &registry)?;
        }
        let batches = buffer.flush_cycle(k as i64, &registry)?;
        if k > 0 {
            filter.predict(cfg.dt);
        }
        filter.update_cycle(&batches)?;
        let extracted = filter.prune_and_extract();
        downlink.push(DownlinkMessage::from_tracks(
            k as f64 * cfg.dt,
            crate::pipeline::DEFAULT_PRODUCER,
            filter.cycle(),
            &extracted,
        ));
    }

    let truth_snaps: Vec<Vec<TrackSnapshot>> =
        (0..cfg.steps).map(|k| truth.snapshots(k)).collect();
    let est_snaps: Vec<Vec<TrackSnapshot>> = downlink
        .iter()
        .map(|msg| {
            msg.tracks
                .iter()
                .map(|t| TrackSnapshot::new(t.label.0, t.state[0], t.state[1], t.state[7]))
                .collect()
        })
        .collect();
    let ospat_cfg = OspatConfig::default();
    let (ospat, correspondence) = ospat_curve(&truth_snaps, &est_snaps, &ospat_cfg);
    let length_errors = length_mse(&truth_snaps, &est_snaps, &ospat_cfg);

    Ok(TrialResult {
        trial,
        downlink,
        ospat,
        correspondence,
        length_errors,
        diagnostics: filter.diagnostics,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Monte Carlo batch: per-step mean OSPA-T over all trials plus per-trial
/// curves and length-error summaries.
#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub config: ScenarioConfig,
    pub truth: GroundTruth,
    pub mean_ospat: Vec<f64>,
    pub trials: Vec<TrialResult>,
}

impl MonteCarloResult {
    pub fn trial_count(&self) -> usize {
        self.trials.len()
    }
}

/// Runs all configured trials (in parallel) and aggregates the OSPA-T curve.
pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<MonteCarloResult> {
    cfg.validate()?;
    if cfg.trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<Vec<_>>>()?;

    let mut mean_ospat = vec![0.0; cfg.steps];
    for trial in &trials {
        for (k, v) in trial.ospat.iter().enumerate() {
            mean_ospat[k] += v / cfg.trials as f64;
        }
    }
    Ok(MonteCarloResult {
        config: cfg.clone(),
        truth: generate_truth(cfg),
        mean_ospat,
        trials,
    })
}

impl MonteCarloResult {
    /// Writes the batch outputs: OSPA-T curve, length-error summary, config
    /// echo, ground truth and per-trial downlink logs and track CSVs.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;

        let mut ospat_csv = String::from("k,mean_ospat\n");
        for (k, v) in self.mean_ospat.iter().enumerate() {
            ospat_csv.push_str(&format!("{},{}\n", k + 1, v));
        }
        std::fs::write(dir.join("ospat_curve.csv"), ospat_csv)?;

        let mut lengths_csv = String::from("trial,object,true_length,steps,mse,rmse\n");
        for trial in &self.trials {
            for obj in &self.truth.objects {
                match trial.length_errors.get(&obj.label) {
                    Some(err) => lengths_csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        trial.trial,
                        obj.name,
                        obj.length,
                        err.steps,
                        err.mse,
                        err.rmse()
                    )),
                    None => lengths_csv.push_str(&format!(
                        "{},{},{},0,,\n",
                        trial.trial, obj.name, obj.length
                    )),
                }
            }
        }
        std::fs::write(dir.join("lengths.csv"), lengths_csv)?;

        std::fs::write(dir.join("config.json"), self.config.to_json())?;
        std::fs::write(dir.join("truth.csv"), truth_to_csv(&self.truth))?;

        for trial in &self.trials {
            let mut log = String::new();
            for msg in &trial.downlink {
                log.push_str(&msg.to_line());
                log.push('\n');
            }
            std::fs::write(dir.join(format!("downlink_{:03}.jsonl", trial.trial)), log)?;
            std::fs::write(
                dir.join(format!("tracks_{:03}.csv", trial.trial)),
                snapshots_to_csv(&trial.snapshots()),
            )?;
        }
        Ok(())
    }
}

/// Track-log CSV: `k,label,x,y,length`, steps 1-based.
pub fn snapshots_to_csv(steps: &[Vec<TrackSnapshot>]) -> String {
    let mut out = String::from("k,label,x,y,length\n");
    for (k, snaps) in steps.iter().enumerate() {
        for s in snaps {
            out.push_str(&format!("{},{},{},{},{}\n", k + 1, s.label, s.x, s.y, s.length));
        }
    }
    out
}

pub fn truth_to_csv(truth: &GroundTruth) -> String {
    let steps: Vec<Vec<TrackSnapshot>> =
        (0..truth.steps()).map(|k| truth.snapshots(k)).collect();
    snapshots_to_csv(&steps)
}

/// Parses a track-log CSV back into per-step snapshots, keyed by the 1-based
/// step index.
pub fn parse_track_csv(text: &str) -> Result<BTreeMap<u64, Vec<TrackSnapshot>>> {
    let mut out: BTreeMap<u64, Vec<TrackSnapshot>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            if line != "k,label,x,y,length" {
                return Err(Error::schema(
                    "line 1",
                    format!("expected header k,label,x,y,length, got {line}"),
                ));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::schema(
                format!("line {}", idx + 1),
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let parse_f = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::schema(format!("line {}: {name}", idx + 1), format!("invalid number {s}"))
            })
        };
        let k: u64 = fields[0].parse().map_err(|_| {
            Error::schema(format!("line {}: k", idx + 1), format!("invalid step {}", fields[0]))
        })?;
        let label: u64 = fields[1].parse().map_err(|_| {
            Error::schema(
                format!("line {}: label", idx + 1),
                format!("invalid label {}", fields[1]),
            )
        })?;
        out.entry(k).or_default().push(TrackSnapshot::new(
            label,
            parse_f(fields[2], "x")?,
            parse_f(fields[3], "y")?,
            parse_f(fields[4], "length")?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn truth_object_lengths_match_the_reported_set() {
        let cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        let truth = generate_truth(&cfg);
        let mut lengths: Vec<f64> = truth.objects.iter().map(|o| o.length).collect();
        lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(lengths, vec![4.5, 4.8, 5.2]);
    }

    #[test]
    fn truth_is_ctra_consistent_within_segments() {
        let cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        let truth = generate_truth(&cfg);
        for obj in &truth.objects {
            for k in 0..obj.states.len() - 1 {
                let a = obj.states[k];
                let b = obj.states[k + 1];
                let prop = ctra_transition(&a, cfg.dt);
                // Position, heading, speed and extent always follow the CTRA
                // propagation; yaw rate and acceleration may step at segment
                // boundaries.
                for i in [0usize, 1, 2, 4, 6, 7] {
                    assert_relative_eq!(prop[i], b[i], epsilon = 1e-6);
                }
                if (a[3], a[5]) == (b[3], b[5]) {
                    for i in 0..8 {
                        assert_relative_eq!(prop[i], b[i], epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn truth_stays_inside_the_scene() {
        let cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        let truth = generate_truth(&cfg);
        for obj in &truth.objects {
            for s in &obj.states {
                assert!(s[0] >= cfg.scene_min[0] && s[0] <= cfg.scene_max[0], "{} x={}", obj.name, s[0]);
                assert!(s[1] >= cfg.scene_min[1] && s[1] <= cfg.scene_max[1], "{} y={}", obj.name, s[1]);
            }
        }
    }

    #[test]
    fn truth_is_trial_independent_and_deterministic() {
        let cfg = ScenarioConfig::for_scenario(2, 1.0).unwrap();
        assert_eq!(generate_truth(&cfg), generate_truth(&cfg));
    }

    #[test]
    fn vehicles_keep_a_safe_distance() {
        // The scenario is designed for ambiguity, not collisions: the
        // opposing vehicles pass at exactly two meters center distance.
        let cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        let truth = generate_truth(&cfg);
        let mut min_passing = f64::INFINITY;
        for k in 0..cfg.steps {
            for i in 0..truth.objects.len() {
                for j in (i + 1)..truth.objects.len() {
                    let a = truth.objects[i].states[k];
                    let b = truth.objects[j].states[k];
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    assert!(d >= 1.99, "objects {i} and {j} at distance {d} in step {k}");
                    if (i, j) == (0, 1) {
                        min_passing = min_passing.min(d);
                    }
                }
            }
        }
        assert!(min_passing < 2.5, "passing distance should be tight, got {min_passing}");
    }

    #[test]
    fn noise_free_detections_sit_on_true_corners() {
        let mut cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        cfg.sigma = 1e-12;
        cfg.clutter_rate = 0.0;
        cfg.p_detect = 1.0;
        cfg.transmit_reference_points = true;
        let truth = generate_truth(&cfg);
        let profiles = cfg.sensor_profiles().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for profile in &profiles {
            let msg = simulate_sensor(&truth, 10, profile, &cfg, &mut rng).unwrap();
            assert_eq!(msg.objects.len(), truth.objects.len());
            for (det, obj) in msg.objects.iter().zip(&truth.objects) {
                let s = obj.states[10];
                let zeta = det.reference_point.unwrap();
                let corner = crate::geometry::Point::new(s[0], s[1])
                    + corner_offset(zeta, s[2], s[6], s[7]).unwrap();
                assert_relative_eq!(det.values[0], corner.x, epsilon = 1e-9);
                assert_relative_eq!(det.values[1], corner.y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn scenario_two_sensors_measure_the_extra_extent() {
        let cfg = ScenarioConfig::for_scenario(2, 0.5).unwrap();
        assert_eq!(cfg.measured_features(0), vec![Feature::PosX, Feature::PosY, Feature::Width]);
        assert_eq!(cfg.measured_features(1), vec![Feature::PosX, Feature::PosY, Feature::Width]);
        assert_eq!(cfg.measured_features(2), vec![Feature::PosX, Feature::PosY, Feature::Length]);
    }

    #[test]
    fn detection_and_clutter_rates_match_configuration() {
        let cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        let truth = generate_truth(&cfg);
        let profile = &cfg.sensor_profiles().unwrap()[0];
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        let rounds = 100_000usize;
        let mut detections = 0usize;
        let mut clutter = 0usize;
        for _ in 0..rounds {
            let msg = simulate_sensor(&truth, 20, profile, &cfg, &mut rng).unwrap();
            let real = msg.objects.iter().filter(|d| d.object_class.is_some()).count();
            detections += real;
            clutter += msg.objects.len() - real;
        }
        let per_object = detections as f64 / (rounds * truth.objects.len()) as f64;
        let clutter_rate = clutter as f64 / rounds as f64;
        assert!((per_object - cfg.p_detect).abs() < 0.01, "p_detect {per_object}");
        assert!((clutter_rate - cfg.clutter_rate).abs() < 0.01, "clutter {clutter_rate}");
    }

    #[test]
    fn rotated_noise_reproduces_the_declared_covariance() {
        let mut cfg = ScenarioConfig::for_scenario(1, 1.0).unwrap();
        cfg.clutter_rate = 0.0;
        cfg.p_detect = 1.0;
        cfg.transmit_reference_points = true;
        let truth = generate_truth(&cfg);
        let profile = &cfg.sensor_profiles().unwrap()[0];
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let s = truth.objects[0].states[0];

        let mut sum = [0.0f64; 2];
        let mut sumsq = [[0.0f64; 2]; 2];
        let n = 100_000usize;
        let mut declared = None;
        for _ in 0..n {
            let msg = simulate_sensor(&truth, 0, profile, &cfg, &mut rng).unwrap();
            let det = &msg.objects[0];
            let zeta = det.reference_point.unwrap();
            let corner = crate::geometry::Point::new(s[0], s[1])
                + corner_offset(zeta, s[2], s[6], s[7]).unwrap();
            let e = [det.values[0] - corner.x, det.values[1] - corner.y];
            sum[0] += e[0];
            sum[1] += e[1];
            for i in 0..2 {
                for j in 0..2 {
                    sumsq[i][j] += e[i] * e[j];
                }
            }
            declared = Some(det.covariance.clone());
        }
        let declared = declared.unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let sample = sumsq[i][j] / n as f64 - sum[i] * sum[j] / (n * n) as f64;
                let expect = declared[(i, j)];
                assert!(
                    (sample - expect).abs() <= 0.02 * declared[(0, 0)].max(declared[(1, 1)]),
                    "cov[{i}][{j}] sample {sample} declared {expect}"
                );
            }
        }
    }

    #[test]
    fn trials_are_bitwise_reproducible() {
        let mut cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        cfg.trials = 1;
        cfg.steps = 12;
        let a = run_trial(&cfg, 0).unwrap();
        let b = run_trial(&cfg, 0).unwrap();
        let log = |r: &TrialResult| {
            r.downlink.iter().map(|m| m.to_line()).collect::<Vec<_>>().join("\n")
        };
        assert_eq!(log(&a), log(&b));
        assert_eq!(a.ospat, b.ospat);
    }

    #[test]
    fn empty_sensor_config_births_nothing() {
        let mut cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        cfg.sensors.clear();
        cfg.steps = 10;
        let result = run_trial(&cfg, 0).unwrap();
        assert!(result.downlink.iter().all(|m| m.tracks.is_empty()));
    }

    #[test]
    fn three_tracks_confirmed_by_mid_scenario() {
        let mut cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        cfg.trials = 30;
        let confirmed = (0..cfg.trials)
            .map(|t| run_trial(&cfg, t).unwrap())
            .filter(|r| r.downlink[14].tracks.len() == 3)
            .count();
        assert!(
            confirmed as f64 >= 0.9 * cfg.trials as f64,
            "only {confirmed}/{} trials had three tracks at k = 15",
            cfg.trials
        );
    }

    #[test]
    fn single_trial_curve_equals_monte_carlo_mean() {
        let mut cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        cfg.trials = 1;
        cfg.steps = 15;
        let mc = run_monte_carlo(&cfg).unwrap();
        assert_eq!(mc.mean_ospat, mc.trials[0].ospat);
    }

    #[test]
    fn first_step_sits_at_the_cutoff() {
        let mut cfg = ScenarioConfig::for_scenario(1, 0.5).unwrap();
        cfg.trials = 3;
        cfg.steps = 10;
        let mc = run_monte_carlo(&cfg).unwrap();
        assert_relative_eq!(mc.mean_ospat[0], 300.0, epsilon = 1e-9);
    }

    #[test]
    fn scenario_config_round_trips_as_json() {
        let cfg = ScenarioConfig::for_scenario(2, 1.5).unwrap();
        let text = cfg.to_json();
        let parsed = ScenarioConfig::from_json(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn track_csv_round_trips() {
        let steps = vec![
            vec![TrackSnapshot::new(1, 1.5, 2.5, 4.8)],
            vec![],
            vec![TrackSnapshot::new(1, 2.5, 2.5, 4.9), TrackSnapshot::new(2, 8.0, 1.0, 5.2)],
        ];
        let csv = snapshots_to_csv(&steps);
        let parsed = parse_track_csv(&csv).unwrap();
        assert_eq!(parsed[&1], steps[0]);
        assert!(!parsed.contains_key(&2));
        assert_eq!(parsed[&3], steps[2]);
        assert!(parse_track_csv("bogus header\n1,2,3,4,5\n").is_err());
        assert!(parse_track_csv("k,label,x,y,length\n1,2,3,nope,5\n").is_err());
    }
}
