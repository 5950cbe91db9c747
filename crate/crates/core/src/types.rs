//! Object model shared by every other module: features, reference points,
//! classes, the 8-dimensional filter state and the labeled Bernoulli tracks
//! built from it.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the filter state `[x, y, phi, phi_dot, v, v_dot, w, l]`.
pub const STATE_DIM: usize = 8;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateCov = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Hard floor/ceiling applied to width and length after any update.
pub const EXTENT_CLAMP: (f64, f64) = (0.3, 30.0);

/// Measurable object features. `Height` is carried as a per-track attribute
/// and never enters the filter state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    PosX,
    PosY,
    Heading,
    YawRate,
    Speed,
    Accel,
    Width,
    Length,
    Height,
}

/// The eight features that make up the filter state, in canonical order.
pub const FILTER_FEATURES: [Feature; STATE_DIM] = [
    Feature::PosX,
    Feature::PosY,
    Feature::Heading,
    Feature::YawRate,
    Feature::Speed,
    Feature::Accel,
    Feature::Width,
    Feature::Length,
];

impl Feature {
    /// Index of this feature in the canonical state layout.
    pub fn canonical_index(self) -> Result<usize> {
        match self {
            Feature::PosX => Ok(0),
            Feature::PosY => Ok(1),
            Feature::Heading => Ok(2),
            Feature::YawRate => Ok(3),
            Feature::Speed => Ok(4),
            Feature::Accel => Ok(5),
            Feature::Width => Ok(6),
            Feature::Length => Ok(7),
            Feature::Height => Err(Error::NotInFilterState("height")),
        }
    }

    /// Inverse of [`Feature::canonical_index`].
    pub fn from_canonical_index(index: usize) -> Option<Feature> {
        FILTER_FEATURES.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::PosX => "pos_x",
            Feature::PosY => "pos_y",
            Feature::Heading => "heading",
            Feature::YawRate => "yaw_rate",
            Feature::Speed => "speed",
            Feature::Accel => "accel",
            Feature::Width => "width",
            Feature::Length => "length",
            Feature::Height => "height",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rectangle reference points. Sensors relate positions to one of the four
/// vertices; tracks always use `Center`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferencePoint {
    Fl,
    Fr,
    Bl,
    Br,
    Center,
}

/// The vertex set, in tie-break order FL < FR < BL < BR.
pub const CORNERS: [ReferencePoint; 4] = [
    ReferencePoint::Fl,
    ReferencePoint::Fr,
    ReferencePoint::Bl,
    ReferencePoint::Br,
];

impl ReferencePoint {
    pub fn is_corner(self) -> bool {
        self != ReferencePoint::Center
    }

    /// Vertex obtained by point reflection through the rectangle center.
    pub fn opposite(self) -> ReferencePoint {
        match self {
            ReferencePoint::Fl => ReferencePoint::Br,
            ReferencePoint::Fr => ReferencePoint::Bl,
            ReferencePoint::Bl => ReferencePoint::Fr,
            ReferencePoint::Br => ReferencePoint::Fl,
            ReferencePoint::Center => ReferencePoint::Center,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReferencePoint::Fl => "fl",
            ReferencePoint::Fr => "fr",
            ReferencePoint::Bl => "bl",
            ReferencePoint::Br => "br",
            ReferencePoint::Center => "center",
        }
    }
}

impl fmt::Display for ReferencePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Object class identifier. `car` and `unknown` are always registered;
/// further classes come from configuration.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectClass(pub String);

impl ObjectClass {
    pub fn car() -> Self {
        ObjectClass("car".to_string())
    }

    pub fn unknown() -> Self {
        ObjectClass("unknown".to_string())
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Default extent and extent bounds of one object class, in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub default_width: f64,
    pub default_length: f64,
    pub default_height: f64,
    pub width_bounds: (f64, f64),
    pub length_bounds: (f64, f64),
    pub height_bounds: (f64, f64),
}

impl ClassSpec {
    fn validate(&self, name: &str) -> Result<()> {
        let dims = [
            ("width", self.default_width, self.width_bounds),
            ("length", self.default_length, self.length_bounds),
            ("height", self.default_height, self.height_bounds),
        ];
        for (dim, default, (lo, hi)) in dims {
            if !(default.is_finite() && default > 0.0) {
                return Err(Error::Config(format!(
                    "class {name}: default {dim} must be finite and positive"
                )));
            }
            if !(lo <= default && default <= hi) {
                return Err(Error::Config(format!(
                    "class {name}: {dim} bounds must satisfy min <= default <= max"
                )));
            }
        }
        Ok(())
    }
}

/// Registry of object classes with their default extents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: BTreeMap<ObjectClass, ClassSpec>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        let mut classes = BTreeMap::new();
        classes.insert(
            ObjectClass::car(),
            ClassSpec {
                default_width: 1.8,
                default_length: 4.5,
                default_height: 1.5,
                width_bounds: (1.4, 2.6),
                length_bounds: (3.0, 6.5),
                height_bounds: (1.0, 2.5),
            },
        );
        classes.insert(
            ObjectClass::unknown(),
            ClassSpec {
                default_width: 1.0,
                default_length: 1.0,
                default_height: 1.0,
                height_bounds: (EXTENT_CLAMP.0, EXTENT_CLAMP.1),
                width_bounds: (EXTENT_CLAMP.0, EXTENT_CLAMP.1),
                length_bounds: (EXTENT_CLAMP.0, EXTENT_CLAMP.1),
            },
        );
        ClassRegistry { classes }
    }
}

impl ClassRegistry {
    pub fn register(&mut self, class: ObjectClass, spec: ClassSpec) -> Result<()> {
        spec.validate(&class.0)?;
        self.classes.insert(class, spec);
        Ok(())
    }

    pub fn spec(&self, class: &ObjectClass) -> Result<&ClassSpec> {
        self.classes
            .get(class)
            .ok_or_else(|| Error::Config(format!("class {class} not registered")))
    }

    /// Configured `(width, length, height)` defaults for a class.
    pub fn class_defaults(&self, class: &ObjectClass) -> Result<(f64, f64, f64)> {
        let spec = self.spec(class)?;
        Ok((spec.default_width, spec.default_length, spec.default_height))
    }

    pub fn names(&self) -> impl Iterator<Item = &ObjectClass> {
        self.classes.keys()
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    a
}

/// Gaussian over the 8-dimensional filter state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGaussian {
    pub mean: StateVec,
    pub cov: StateCov,
}

impl StateGaussian {
    /// Builds a state Gaussian, symmetrizing the covariance and wrapping the
    /// heading into `(-pi, pi]`.
    pub fn new(mut mean: StateVec, cov: StateCov) -> Self {
        mean[2] = wrap_angle(mean[2]);
        StateGaussian {
            mean,
            cov: 0.5 * (cov + cov.transpose()),
        }
    }

    /// Checks symmetry and the eigenvalue floor used throughout the filter.
    pub fn validate(&self) -> Result<()> {
        let scale = self.cov.abs().max().max(1.0);
        for i in 0..STATE_DIM {
            for j in (i + 1)..STATE_DIM {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::Validation(format!(
                        "covariance asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let eig = self.cov.symmetric_eigenvalues();
        if eig.iter().any(|&v| v < -1e-9 * scale) {
            return Err(Error::Validation("covariance has negative eigenvalue".into()));
        }
        Ok(())
    }
}

/// Class label measured by a sensor together with its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeasurement {
    pub class: ObjectClass,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensorId(pub u32);

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// One sensor measurement of one (hypothesized) object.
///
/// Only the position is mandatory; everything else is optional. The
/// covariance is expressed in the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub sensor_id: SensorId,
    pub timestamp: f64,
    /// Measured feature subset, ordered; must contain `PosX` and `PosY`.
    pub measured: Vec<Feature>,
    pub values: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Rectangle vertex the position refers to; `None` leaves the choice to
    /// the filter.
    pub reference_point: Option<ReferencePoint>,
    pub object_class: Option<ClassMeasurement>,
    /// Sensor-local label; uniqueness is not required and the filter ignores
    /// it.
    pub label: Option<String>,
}

impl Detection {
    pub fn dim(&self) -> usize {
        self.measured.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.measured.len();
        if d < 2 {
            return Err(Error::Validation("detection must measure at least two features".into()));
        }
        if !self.measured.contains(&Feature::PosX) || !self.measured.contains(&Feature::PosY) {
            return Err(Error::Validation("detection must measure pos_x and pos_y".into()));
        }
        let mut seen = self.measured.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != d {
            return Err(Error::Validation("duplicate feature in detection".into()));
        }
        if self.values.len() != d {
            return Err(Error::Validation(format!(
                "value dimension {} does not match measured set size {d}",
                self.values.len()
            )));
        }
        if self.covariance.nrows() != d || self.covariance.ncols() != d {
            return Err(Error::Validation(format!(
                "covariance is {}x{}, expected {d}x{d}",
                self.covariance.nrows(),
                self.covariance.ncols()
            )));
        }
        for (i, f) in self.measured.iter().enumerate() {
            if matches!(f, Feature::Width | Feature::Length) && self.values[i] <= 0.0 {
                return Err(Error::Validation(format!("measured {f} must be positive")));
            }
        }
        if let Some(rp) = self.reference_point {
            if !rp.is_corner() {
                return Err(Error::InvalidReferencePoint(
                    "detections must reference a rectangle vertex, not the center".into(),
                ));
            }
        }
        if let Some(cm) = &self.object_class {
            if !(0.0..=1.0).contains(&cm.confidence) {
                return Err(Error::Validation("class confidence outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Value of a measured feature, if present.
    pub fn value_of(&self, feature: Feature) -> Option<f64> {
        self.measured
            .iter()
            .position(|&f| f == feature)
            .map(|i| self.values[i])
    }
}

/// Track label: unique, monotonically allocated, never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u64);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

/// Posterior over object classes; probabilities sum to one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassPosterior {
    probs: BTreeMap<ObjectClass, f64>,
}

impl ClassPosterior {
    pub fn uniform(classes: &ClassRegistry) -> Self {
        let n = classes.names().count().max(1) as f64;
        ClassPosterior {
            probs: classes.names().map(|c| (c.clone(), 1.0 / n)).collect(),
        }
    }

    /// Posterior after measuring `class` with confidence `t'`; the remaining
    /// mass is spread evenly over the other registered classes.
    pub fn from_measurement(classes: &ClassRegistry, meas: &ClassMeasurement) -> Self {
        let mut post = ClassPosterior::uniform(classes);
        post.update(meas);
        post
    }

    /// Bayes update with a class measurement of confidence `t'`.
    pub fn update(&mut self, meas: &ClassMeasurement) {
        let n = self.probs.len();
        if n <= 1 || !self.probs.contains_key(&meas.class) {
            return;
        }
        let other = (1.0 - meas.confidence) / (n - 1) as f64;
        let mut total = 0.0;
        for (class, p) in self.probs.iter_mut() {
            let lik = if class == &meas.class { meas.confidence } else { other };
            *p *= lik;
            total += *p;
        }
        if total > 0.0 {
            for p in self.probs.values_mut() {
                *p /= total;
            }
        }
    }

    /// Most probable class and its probability.
    pub fn map_class(&self) -> (ObjectClass, f64) {
        self.probs
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
            .map(|(c, p)| (c.clone(), *p))
            .unwrap_or((ObjectClass::unknown(), 1.0))
    }

    pub fn prob(&self, class: &ObjectClass) -> f64 {
        self.probs.get(class).copied().unwrap_or(0.0)
    }

    /// Convex combination of posteriors; used when collapsing association
    /// hypotheses.
    pub fn mix(components: &[(f64, &ClassPosterior)]) -> Self {
        let mut probs: BTreeMap<ObjectClass, f64> = BTreeMap::new();
        for (w, post) in components {
            for (class, p) in &post.probs {
                *probs.entry(class.clone()).or_insert(0.0) += w * p;
            }
        }
        let total: f64 = probs.values().sum();
        if total > 0.0 {
            for p in probs.values_mut() {
                *p /= total;
            }
        }
        ClassPosterior { probs }
    }
}

/// One labeled Bernoulli component: "exists with probability `existence`;
/// if it exists, its state is `state`".
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliTrack {
    pub label: Label,
    pub existence: f64,
    pub state: StateGaussian,
    pub class_posterior: ClassPosterior,
    /// Static height attribute (class default or running measurement mean).
    pub height: f64,
    pub height_samples: u32,
    pub birth_cycle: u64,
    pub last_update_cycle: u64,
}

impl BernoulliTrack {
    /// Folds one height observation into the running mean.
    pub fn observe_height(&mut self, h: f64) {
        self.height_samples += 1;
        self.height += (h - self.height) / self.height_samples as f64;
    }
}

/// The filter's full multi-object belief: a set of labeled Bernoulli tracks.
#[derive(Debug, Clone, Default)]
pub struct LmbDensity {
    /// Tracks kept sorted by label.
    pub tracks: Vec<BernoulliTrack>,
    pub cycle: u64,
}

impl LmbDensity {
    pub fn validate(&self) -> Result<()> {
        for pair in self.tracks.windows(2) {
            if pair[0].label >= pair[1].label {
                return Err(Error::Validation("track labels not strictly increasing".into()));
            }
        }
        for t in &self.tracks {
            if !(0.0..=1.0).contains(&t.existence) {
                return Err(Error::Validation(format!(
                    "track {} existence {} outside [0, 1]",
                    t.label, t.existence
                )));
            }
        }
        Ok(())
    }

    pub fn sort_by_label(&mut self) {
        self.tracks.sort_by_key(|t| t.label);
    }
}
