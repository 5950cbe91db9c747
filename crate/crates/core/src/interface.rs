//! Generic feature-level message layer: sensor registration, uplink
//! detection lists, downlink track lists, cycle buffering and the canonical
//! line-delimited text encoding.
//!
//! Every message is one self-describing JSON object per line. Unknown fields
//! are ignored on parse; symmetric covariances travel as their row-major
//! lower triangle.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CoveredArea, Point};
use crate::types::{
    BernoulliTrack, ClassMeasurement, Detection, Feature, Label, ObjectClass, ReferencePoint,
    SensorId, StateCov, StateVec, STATE_DIM,
};

pub const PROTOCOL_VERSION: u32 = 1;

/// A registered sensor: identity, pose, field of view, measured features and
/// clutter rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorProfile {
    pub sensor_id: SensorId,
    pub sensor_type: String,
    pub position: Point,
    pub orientation: f64,
    pub covered_area: CoveredArea,
    pub measured: Vec<Feature>,
    pub clutter_rate: f64,
}

impl SensorProfile {
    pub fn new(
        sensor_id: SensorId,
        sensor_type: impl Into<String>,
        position: [f64; 2],
        orientation: f64,
        covered_area: Vec<[f64; 2]>,
        measured: Vec<Feature>,
        clutter_rate: f64,
    ) -> Result<Self> {
        let covered_area = CoveredArea::new(covered_area)
            .map_err(|e| Error::Validation(format!("covered area: {e}")))?;
        if clutter_rate < 0.0 {
            return Err(Error::Validation("clutter rate must be non-negative".into()));
        }
        if !measured.contains(&Feature::PosX) || !measured.contains(&Feature::PosY) {
            return Err(Error::Validation(
                "sensor must declare pos_x and pos_y as measured".into(),
            ));
        }
        Ok(SensorProfile {
            sensor_id,
            sensor_type: sensor_type.into(),
            position: Point::new(position[0], position[1]),
            orientation,
            covered_area,
            measured,
            clutter_rate,
        })
    }
}

/// Uplink message: one header plus a list of object detections.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMessage {
    pub timestamp: f64,
    pub sensor_id: SensorId,
    pub objects: Vec<Detection>,
}

impl UplinkMessage {
    /// Builds the message and stamps every detection with the header
    /// timestamp and sensor id.
    pub fn new(timestamp: f64, sensor_id: SensorId, mut objects: Vec<Detection>) -> Self {
        for det in &mut objects {
            det.timestamp = timestamp;
            det.sensor_id = sensor_id;
        }
        UplinkMessage { timestamp, sensor_id, objects }
    }
}

/// Complete track record as published in the downlink.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub label: Label,
    pub existence: f64,
    pub reference_point: ReferencePoint,
    pub state: StateVec,
    pub covariance: StateCov,
    pub height: f64,
    pub class: ObjectClass,
    pub class_confidence: f64,
    pub birth_cycle: u64,
    pub last_update_cycle: u64,
}

impl TrackRecord {
    pub fn from_track(track: &BernoulliTrack) -> Self {
        let (class, class_confidence) = track.class_posterior.map_class();
        TrackRecord {
            label: track.label,
            existence: track.existence,
            reference_point: ReferencePoint::Center,
            state: track.state.mean,
            covariance: track.state.cov,
            height: track.height,
            class,
            class_confidence,
            birth_cycle: track.birth_cycle,
            last_update_cycle: track.last_update_cycle,
        }
    }
}

/// Downlink message: one header plus the complete track list of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkMessage {
    pub timestamp: f64,
    pub producer: String,
    pub cycle: u64,
    pub tracks: Vec<TrackRecord>,
}

impl DownlinkMessage {
    pub fn from_tracks(
        timestamp: f64,
        producer: impl Into<String>,
        cycle: u64,
        tracks: &[BernoulliTrack],
    ) -> Self {
        let mut records: Vec<TrackRecord> = tracks.iter().map(TrackRecord::from_track).collect();
        records.sort_by_key(|r| r.label);
        DownlinkMessage { timestamp, producer: producer.into(), cycle, tracks: records }
    }
}

// ---------------------------------------------------------------------------
// Registration directory
// ---------------------------------------------------------------------------

/// Directory of registered sensors.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    sensors: BTreeMap<SensorId, SensorProfile>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Registers a sensor. Re-registering an identical profile is
    /// idempotent; a conflicting profile under the same id is rejected.
    pub fn register(&mut self, profile: SensorProfile) -> Result<()> {
        if let Some(existing) = self.sensors.get(&profile.sensor_id) {
            if *existing == profile {
                return Ok(());
            }
            return Err(Error::Validation(format!(
                "sensor {} already registered with a different profile",
                profile.sensor_id
            )));
        }
        self.sensors.insert(profile.sensor_id, profile);
        Ok(())
    }

    pub fn deregister(&mut self, id: SensorId) -> Option<SensorProfile> {
        self.sensors.remove(&id)
    }

    pub fn get(&self, id: SensorId) -> Option<&SensorProfile> {
        self.sensors.get(&id)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &SensorProfile> {
        self.sensors.values()
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Cycle buffering
// ---------------------------------------------------------------------------

/// Buffers uplink messages into fixed-duration cycles. A flushed cycle never
/// accepts further messages; late arrivals are counted and dropped.
#[derive(Debug, Clone)]
pub struct CycleBuffer {
    t_cycle: f64,
    buckets: BTreeMap<i64, Vec<UplinkMessage>>,
    flushed_watermark: Option<i64>,
    pub late_messages: u64,
}

impl CycleBuffer {
    pub fn new(t_cycle: f64) -> Result<Self> {
        if !(t_cycle.is_finite() && t_cycle > 0.0) {
            return Err(Error::Config("cycle duration must be positive".into()));
        }
        Ok(CycleBuffer {
            t_cycle,
            buckets: BTreeMap::new(),
            flushed_watermark: None,
            late_messages: 0,
        })
    }

    pub fn t_cycle(&self) -> f64 {
        self.t_cycle
    }

    pub fn cycle_index(&self, timestamp: f64) -> i64 {
        // Timestamps are often exact multiples of the cycle computed in
        // floating point; nudge the quotient so boundary values land in the
        // bucket they name instead of the previous one.
        (timestamp / self.t_cycle + 1e-9).floor() as i64
    }

    /// Appends a message to its cycle bucket. The sensor must be registered;
    /// messages for already-flushed cycles are dropped with an error.
    pub fn ingest(&mut self, msg: UplinkMessage, registry: &Registry) -> Result<i64> {
        if registry.get(msg.sensor_id).is_none() {
            return Err(Error::UnknownSensor(msg.sensor_id.to_string()));
        }
        let cycle = self.cycle_index(msg.timestamp);
        if let Some(watermark) = self.flushed_watermark {
            if cycle <= watermark {
                self.late_messages += 1;
                return Err(Error::LateMessage { cycle, timestamp: msg.timestamp });
            }
        }
        self.buckets.entry(cycle).or_default().push(msg);
        Ok(cycle)
    }

    pub fn pending_cycles(&self) -> Vec<i64> {
        self.buckets.keys().copied().collect()
    }

    /// Seals cycle `k` and returns its per-sensor detection batches, sorted
    /// by earliest message timestamp then sensor id. Per sensor, detections
    /// are concatenated in arrival order.
    pub fn flush_cycle(
        &mut self,
        k: i64,
        registry: &Registry,
    ) -> Result<Vec<(SensorProfile, Vec<Detection>)>> {
        let msgs = self.buckets.remove(&k).unwrap_or_default();
        self.flushed_watermark = Some(self.flushed_watermark.map_or(k, |w| w.max(k)));

        let mut per_sensor: BTreeMap<SensorId, (f64, Vec<Detection>)> = BTreeMap::new();
        for msg in msgs {
            let entry = per_sensor
                .entry(msg.sensor_id)
                .or_insert_with(|| (msg.timestamp, Vec::new()));
            entry.0 = entry.0.min(msg.timestamp);
            entry.1.extend(msg.objects);
        }

        let mut batches: Vec<(f64, SensorId, Vec<Detection>)> = per_sensor
            .into_iter()
            .map(|(id, (ts, dets))| (ts, id, dets))
            .collect();
        batches.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        batches
            .into_iter()
            .map(|(_, id, dets)| {
                let profile = registry
                    .get(id)
                    .ok_or_else(|| Error::UnknownSensor(id.to_string()))?
                    .clone();
                Ok((profile, dets))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Canonical text encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Registration(SensorProfile),
    Uplink(UplinkMessage),
    Downlink(DownlinkMessage),
}

#[derive(Serialize, Deserialize)]
struct WireClass {
    name: String,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct WireDetection {
    measured: Vec<Feature>,
    values: Vec<f64>,
    covariance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_point: Option<ReferencePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<WireClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireRegistration {
    kind: String,
    version: u32,
    sensor_id: u32,
    sensor_type: String,
    position: [f64; 2],
    orientation: f64,
    covered_area: Vec<[f64; 2]>,
    measured: Vec<Feature>,
    clutter_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct WireUplink {
    kind: String,
    version: u32,
    timestamp: f64,
    sensor_id: u32,
    objects: Vec<WireDetection>,
}

#[derive(Serialize, Deserialize)]
struct WireTrack {
    label: u64,
    existence: f64,
    reference_point: ReferencePoint,
    state: Vec<f64>,
    covariance: Vec<f64>,
    height: f64,
    class: String,
    class_confidence: f64,
    birth_cycle: u64,
    last_update_cycle: u64,
}

#[derive(Serialize, Deserialize)]
struct WireDownlink {
    kind: String,
    version: u32,
    timestamp: f64,
    producer: String,
    cycle: u64,
    tracks: Vec<WireTrack>,
}

/// Row-major lower triangle of a symmetric matrix.
fn pack_lower_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn unpack_lower_triangle(data: &[f64], d: usize, path: &str) -> Result<DMatrix<f64>> {
    let expected = d * (d + 1) / 2;
    if data.len() != expected {
        return Err(Error::schema(
            path,
            format!("covariance lower triangle needs {expected} entries for dimension {d}, got {}", data.len()),
        ));
    }
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            m[(i, j)] = data[idx];
            m[(j, i)] = data[idx];
            idx += 1;
        }
    }
    Ok(m)
}

fn detection_to_wire(det: &Detection) -> WireDetection {
    WireDetection {
        measured: det.measured.clone(),
        values: det.values.iter().copied().collect(),
        covariance: pack_lower_triangle(&det.covariance),
        reference_point: det.reference_point,
        class: det.object_class.as_ref().map(|cm| WireClass {
            name: cm.class.0.clone(),
            confidence: cm.confidence,
        }),
        label: det.label.clone(),
    }
}

fn detection_from_wire(
    wire: WireDetection,
    sensor_id: SensorId,
    timestamp: f64,
    path: &str,
) -> Result<Detection> {
    let d = wire.measured.len();
    if !wire.measured.contains(&Feature::PosX) {
        return Err(Error::schema(format!("{path}.measured"), "missing pos_x"));
    }
    if !wire.measured.contains(&Feature::PosY) {
        return Err(Error::schema(format!("{path}.measured"), "missing pos_y"));
    }
    if wire.values.len() != d {
        return Err(Error::schema(
            format!("{path}.values"),
            format!("expected {d} values, got {}", wire.values.len()),
        ));
    }
    let covariance = unpack_lower_triangle(&wire.covariance, d, &format!("{path}.covariance"))?;
    let det = Detection {
        sensor_id,
        timestamp,
        measured: wire.measured,
        values: DVector::from_vec(wire.values),
        covariance,
        reference_point: wire.reference_point,
        object_class: wire.class.map(|c| ClassMeasurement {
            class: ObjectClass(c.name),
            confidence: c.confidence,
        }),
        label: wire.label,
    };
    det.validate()
        .map_err(|e| Error::schema(path, e.to_string()))?;
    Ok(det)
}

impl SensorProfile {
    pub fn to_line(&self) -> String {
        let wire = WireRegistration {
            kind: "registration".into(),
            version: PROTOCOL_VERSION,
            sensor_id: self.sensor_id.0,
            sensor_type: self.sensor_type.clone(),
            position: [self.position.x, self.position.y],
            orientation: self.orientation,
            covered_area: self.covered_area.as_vertex_arrays(),
            measured: self.measured.clone(),
            clutter_rate: self.clutter_rate,
        };
        serde_json::to_string(&wire).expect("registration serialization")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let wire: WireRegistration = serde_json::from_str(line)
            .map_err(|e| Error::schema("registration", e.to_string()))?;
        if wire.kind != "registration" {
            return Err(Error::schema("kind", format!("expected registration, got {}", wire.kind)));
        }
        SensorProfile::new(
            SensorId(wire.sensor_id),
            wire.sensor_type,
            wire.position,
            wire.orientation,
            wire.covered_area,
            wire.measured,
            wire.clutter_rate,
        )
    }
}

impl UplinkMessage {
    pub fn to_line(&self) -> String {
        let wire = WireUplink {
            kind: "uplink".into(),
            version: PROTOCOL_VERSION,
            timestamp: self.timestamp,
            sensor_id: self.sensor_id.0,
            objects: self.objects.iter().map(detection_to_wire).collect(),
        };
        serde_json::to_string(&wire).expect("uplink serialization")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let wire: WireUplink =
            serde_json::from_str(line).map_err(|e| Error::schema("uplink", e.to_string()))?;
        if wire.kind != "uplink" {
            return Err(Error::schema("kind", format!("expected uplink, got {}", wire.kind)));
        }
        let sensor_id = SensorId(wire.sensor_id);
        let objects = wire
            .objects
            .into_iter()
            .enumerate()
            .map(|(i, det)| {
                detection_from_wire(det, sensor_id, wire.timestamp, &format!("objects[{i}]"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UplinkMessage { timestamp: wire.timestamp, sensor_id, objects })
    }
}

impl DownlinkMessage {
    pub fn to_line(&self) -> String {
        let wire = WireDownlink {
            kind: "downlink".into(),
            version: PROTOCOL_VERSION,
            timestamp: self.timestamp,
            producer: self.producer.clone(),
            cycle: self.cycle,
            tracks: self
                .tracks
                .iter()
                .map(|t| {
                    let cov = DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| t.covariance[(i, j)]);
                    WireTrack {
                        label: t.label.0,
                        existence: t.existence,
                        reference_point: t.reference_point,
                        state: t.state.iter().copied().collect(),
                        covariance: pack_lower_triangle(&cov),
                        height: t.height,
                        class: t.class.0.clone(),
                        class_confidence: t.class_confidence,
                        birth_cycle: t.birth_cycle,
                        last_update_cycle: t.last_update_cycle,
                    }
                })
                .collect(),
        };
        serde_json::to_string(&wire).expect("downlink serialization")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let wire: WireDownlink =
            serde_json::from_str(line).map_err(|e| Error::schema("downlink", e.to_string()))?;
        if wire.kind != "downlink" {
            return Err(Error::schema("kind", format!("expected downlink, got {}", wire.kind)));
        }
        let mut seen = std::collections::BTreeSet::new();
        let tracks = wire
            .tracks
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let path = format!("tracks[{i}]");
                if !seen.insert(t.label) {
                    return Err(Error::schema(format!("{path}.label"), "duplicate track label"));
                }
                if t.state.len() != STATE_DIM {
                    return Err(Error::schema(
                        format!("{path}.state"),
                        format!("expected {STATE_DIM} state entries, got {}", t.state.len()),
                    ));
                }
                if !(0.0..=1.0).contains(&t.existence) {
                    return Err(Error::schema(
                        format!("{path}.existence"),
                        "existence outside [0, 1]",
                    ));
                }
                let cov =
                    unpack_lower_triangle(&t.covariance, STATE_DIM, &format!("{path}.covariance"))?;
                Ok(TrackRecord {
                    label: Label(t.label),
                    existence: t.existence,
                    reference_point: t.reference_point,
                    state: StateVec::from_vec(t.state),
                    covariance: StateCov::from_fn(|i, j| cov[(i, j)]),
                    height: t.height,
                    class: ObjectClass(t.class),
                    class_confidence: t.class_confidence,
                    birth_cycle: t.birth_cycle,
                    last_update_cycle: t.last_update_cycle,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DownlinkMessage {
            timestamp: wire.timestamp,
            producer: wire.producer,
            cycle: wire.cycle,
            tracks,
        })
    }
}

/// Parses any message line by its `kind` tag.
pub fn parse_message(line: &str) -> Result<Message> {
    #[derive(Deserialize)]
    struct Probe {
        kind: String,
    }
    let probe: Probe =
        serde_json::from_str(line).map_err(|e| Error::schema("message", e.to_string()))?;
    match probe.kind.as_str() {
        "registration" => Ok(Message::Registration(SensorProfile::from_line(line)?)),
        "uplink" => Ok(Message::Uplink(UplinkMessage::from_line(line)?)),
        "downlink" => Ok(Message::Downlink(DownlinkMessage::from_line(line)?)),
        other => Err(Error::schema("kind", format!("unknown message kind {other}"))),
    }
}
