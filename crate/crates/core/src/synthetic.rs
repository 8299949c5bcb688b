//! Synthetic scenarios: ground-truth trajectories, visibility-gated MPC
//! measurements with Rician amplitudes, clutter, and noisy proprioception.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{is_visible, mpc_geometry, wrap_angle, AgentPose, MpcGeometry, Vec3, WallSegment};
use crate::gmf::Roi;
use crate::measurement::{
    angle_scale_from_reference, db_to_linear, distance_scale_from_bandwidth, Measurement, NoiseProfile,
};

/// Current scenario file schema version.
pub const SCENARIO_SCHEMA: u32 = 1;

/// The shipped default scenario.
pub const FIG2_DEFAULT: &str = include_str!("../scenarios/fig2-default.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported scenario schema {found}, expected {SCENARIO_SCHEMA}")]
    Schema { found: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Pa,
    Va,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFeature {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub cell: usize,
    pub position: [f64; 3],
    /// Reflection count; defaults to 0 for PAs and 1 for VAs.
    #[serde(default)]
    pub bounces: Option<u32>,
}

impl MapFeature {
    pub fn position(&self) -> Vec3 {
        self.position.into()
    }

    pub fn bounces(&self) -> u32 {
        self.bounces.unwrap_or(match self.kind {
            FeatureKind::Pa => 0,
            FeatureKind::Va => 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSpec {
    #[serde(default)]
    pub name: String,
    pub start: [f64; 3],
    pub end: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default = "defaults::speed")]
    pub speed: f64,
    #[serde(default = "defaults::step_interval")]
    pub step_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSpec {
    #[serde(default = "defaults::snr_1m_db")]
    pub snr_1m_db: f64,
    #[serde(default = "defaults::detection_threshold_db")]
    pub detection_threshold_db: f64,
    #[serde(default = "defaults::reflection_loss_db")]
    pub reflection_loss_db: f64,
    /// Received SNR drop per decade of distance, dB.
    #[serde(default = "defaults::path_loss_db_per_decade")]
    pub path_loss_db_per_decade: f64,
    #[serde(default = "defaults::carrier_hz")]
    pub carrier_hz: f64,
    #[serde(default = "defaults::bandwidth_hz")]
    pub bandwidth_hz: f64,
    #[serde(default = "defaults::sample_count")]
    pub sample_count: f64,
    #[serde(default = "defaults::max_distance")]
    pub max_distance: f64,
    /// Angular standard deviations at the reference amplitude, degrees.
    #[serde(default = "defaults::angle_std_deg")]
    pub azimuth_std_deg: f64,
    #[serde(default = "defaults::angle_std_deg")]
    pub elevation_std_deg: f64,
    #[serde(default = "defaults::reference_amplitude")]
    pub reference_amplitude: f64,
    /// Expected false alarms per step and cell.
    #[serde(default = "defaults::clutter_mean")]
    pub clutter_mean: f64,
}

impl Default for RadioSpec {
    fn default() -> Self {
        toml::from_str("").expect("all radio keys have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProprioceptionSpec {
    #[serde(default = "defaults::speed_std")]
    pub speed_std: f64,
    #[serde(default = "defaults::heading_std_deg")]
    pub heading_std_deg: f64,
}

impl Default for ProprioceptionSpec {
    fn default() -> Self {
        toml::from_str("").expect("all proprioception keys have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPriorSpec {
    #[serde(default = "defaults::position_offset_mean")]
    pub position_offset_mean: [f64; 3],
    #[serde(default = "defaults::position_offset_std")]
    pub position_offset_std: [f64; 3],
    #[serde(default = "defaults::heading_offset_deg")]
    pub heading_offset_mean_deg: f64,
    #[serde(default = "defaults::heading_offset_deg")]
    pub heading_offset_std_deg: f64,
}

impl Default for AgentPriorSpec {
    fn default() -> Self {
        toml::from_str("").expect("all prior keys have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockageSpec {
    pub start: f64,
    pub end: f64,
}

mod defaults {
    pub fn speed() -> f64 {
        1.0
    }
    pub fn step_interval() -> f64 {
        0.075
    }
    pub fn snr_1m_db() -> f64 {
        41.5
    }
    pub fn detection_threshold_db() -> f64 {
        12.0
    }
    pub fn reflection_loss_db() -> f64 {
        3.0
    }
    pub fn path_loss_db_per_decade() -> f64 {
        10.0
    }
    pub fn carrier_hz() -> f64 {
        2.6e9
    }
    pub fn bandwidth_hz() -> f64 {
        18e6
    }
    pub fn sample_count() -> f64 {
        128.0 * 1200.0
    }
    pub fn max_distance() -> f64 {
        150.0
    }
    pub fn angle_std_deg() -> f64 {
        1.0
    }
    pub fn reference_amplitude() -> f64 {
        10.0
    }
    pub fn clutter_mean() -> f64 {
        1.0
    }
    pub fn speed_std() -> f64 {
        0.19
    }
    pub fn heading_std_deg() -> f64 {
        0.18
    }
    pub fn position_offset_mean() -> [f64; 3] {
        [0.1, 0.1, 0.0]
    }
    pub fn position_offset_std() -> [f64; 3] {
        [0.2, 0.2, 0.0]
    }
    pub fn heading_offset_deg() -> f64 {
        0.2
    }
}

/// A complete synthetic scenario as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub trajectory: TrajectorySpec,
    pub features: Vec<MapFeature>,
    #[serde(default)]
    pub walls: Vec<WallSpec>,
    #[serde(default)]
    pub radio: RadioSpec,
    #[serde(default)]
    pub proprioception: ProprioceptionSpec,
    #[serde(default)]
    pub agent_prior: AgentPriorSpec,
    #[serde(default)]
    pub roi: Roi,
    #[serde(default)]
    pub blockage: Option<BlockageSpec>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        #[derive(Deserialize)]
        struct Header {
            schema: Option<u32>,
        }
        let header: Header = toml::from_str(text)?;
        match header.schema {
            Some(SCENARIO_SCHEMA) => {}
            Some(found) => return Err(ScenarioError::Schema { found }),
            None => return Err(ScenarioError::Invalid("missing `schema` key".into())),
        }
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn fig2_default() -> Self {
        Self::from_toml_str(FIG2_DEFAULT).expect("shipped scenario is valid")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: &str| Err(ScenarioError::Invalid(msg.to_string()));
        let t = &self.trajectory;
        if t.waypoints.len() < 2 {
            return bad("at least two waypoints are required");
        }
        if !(t.speed > 0.0 && t.speed.is_finite()) {
            return bad("speed must be positive");
        }
        if !(t.step_interval > 0.0 && t.step_interval.is_finite()) {
            return bad("step_interval must be positive");
        }
        if self.features.is_empty() {
            return bad("at least one map feature is required");
        }
        for cell in 0..self.cell_count() {
            let pas = self
                .features
                .iter()
                .filter(|f| f.cell == cell && f.kind == FeatureKind::Pa)
                .count();
            if pas != 1 {
                return Err(ScenarioError::Invalid(format!(
                    "cell {cell} must have exactly one PA, found {pas}"
                )));
            }
        }
        for w in &self.walls {
            WallSegment::new(w.start.into(), w.end.into())
                .map_err(|e| ScenarioError::Invalid(format!("wall {}: {e}", w.name)))?;
        }
        let r = &self.radio;
        if !(r.max_distance > 0.0 && r.bandwidth_hz > 0.0 && r.sample_count > 0.0) {
            return bad("radio max_distance, bandwidth_hz and sample_count must be positive");
        }
        if !(r.clutter_mean >= 0.0) {
            return bad("clutter_mean must be non-negative");
        }
        if !(r.azimuth_std_deg > 0.0 && r.elevation_std_deg > 0.0 && r.reference_amplitude > 0.0) {
            return bad("angular dispersions must be positive");
        }
        let p = &self.proprioception;
        if !(p.speed_std >= 0.0 && p.heading_std_deg >= 0.0) {
            return bad("proprioception noise must be non-negative");
        }
        let a = &self.agent_prior;
        if a.position_offset_std.iter().any(|s| *s < 0.0) || a.heading_offset_std_deg < 0.0 {
            return bad("prior standard deviations must be non-negative");
        }
        self.roi.validate().map_err(ScenarioError::Invalid)?;
        if let Some(b) = self.blockage {
            if !(b.end >= b.start) {
                return bad("blockage end precedes start");
            }
        }
        path_length(&self.waypoints())
            .filter(|l| *l > 0.0)
            .map(|_| ())
            .ok_or_else(|| ScenarioError::Invalid("zero-length path".into()))
    }

    pub fn cell_count(&self) -> usize {
        self.features.iter().map(|f| f.cell + 1).max().unwrap_or(0)
    }

    pub fn waypoints(&self) -> Vec<Vec3> {
        self.trajectory.waypoints.iter().map(|w| (*w).into()).collect()
    }

    pub fn walls(&self) -> Vec<WallSegment> {
        self.walls
            .iter()
            .map(|w| WallSegment::new(w.start.into(), w.end.into()).expect("validated"))
            .collect()
    }

    /// Index of the PA in `features` for each cell.
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.cell_count())
            .map(|c| {
                self.features
                    .iter()
                    .position(|f| f.cell == c && f.kind == FeatureKind::Pa)
                    .expect("validated")
            })
            .collect()
    }

    /// Measurement noise profile derived from the radio parameters.
    pub fn noise_profile(&self) -> NoiseProfile {
        let r = &self.radio;
        NoiseProfile {
            sample_count: r.sample_count,
            detection_threshold: db_to_linear(r.detection_threshold_db),
            max_distance: r.max_distance,
            distance_scale: distance_scale_from_bandwidth(r.bandwidth_hz),
            azimuth_scale: angle_scale_from_reference(r.azimuth_std_deg.to_radians(), r.reference_amplitude),
            elevation_scale: angle_scale_from_reference(
                r.elevation_std_deg.to_radians(),
                r.reference_amplitude,
            ),
            clock_offset_sign: 1.0,
        }
    }

    /// Normalized amplitude of a path of length `distance` with `bounces` reflections.
    pub fn true_amplitude(&self, distance: f64, bounces: u32) -> f64 {
        let r = &self.radio;
        true_amplitude(
            distance,
            bounces,
            r.snr_1m_db,
            r.path_loss_db_per_decade,
            r.reflection_loss_db,
        )
    }

    pub fn heading_std(&self) -> f64 {
        self.proprioception.heading_std_deg.to_radians()
    }
}

/// `u = 10^{(SNR_1m − L·log10 d − loss·bounces)/20}` with `d` clamped to ≥ 1 m.
pub fn true_amplitude(
    distance: f64,
    bounces: u32,
    snr_1m_db: f64,
    path_loss_db_per_decade: f64,
    reflection_loss_db: f64,
) -> f64 {
    let d = distance.max(1.0);
    let snr_db = snr_1m_db - path_loss_db_per_decade * d.log10() - reflection_loss_db * bounces as f64;
    10f64.powf(snr_db / 20.0)
}

fn path_length(waypoints: &[Vec3]) -> Option<f64> {
    if waypoints.len() < 2 {
        return None;
    }
    Some(waypoints.windows(2).map(|w| w[0].distance(w[1])).sum())
}

fn point_at_arc(waypoints: &[Vec3], mut s: f64) -> Vec3 {
    for w in waypoints.windows(2) {
        let len = w[0].distance(w[1]);
        if s <= len && len > 0.0 {
            return w[0] + (w[1] - w[0]) * (s / len);
        }
        s -= len;
    }
    *waypoints.last().expect("non-empty")
}

/// Noise-free agent poses sampled every `Δt` along the waypoint polyline.
///
/// Positions lie on the polyline at arc length `n·speed·Δt`. Heading and speed
/// of pose `n` describe the chord to pose `n+1`, so the kinematic model
/// reproduces the positions exactly.
pub fn generate_trajectory(
    waypoints: &[Vec3],
    speed: f64,
    step_interval: f64,
) -> Result<Vec<AgentPose>, ScenarioError> {
    let length = path_length(waypoints)
        .ok_or_else(|| ScenarioError::Invalid("at least two waypoints are required".into()))?;
    if length <= 0.0 {
        return Err(ScenarioError::Invalid("zero-length path".into()));
    }
    let stride = speed * step_interval;
    let steps = (length / stride + 1e-9).floor() as usize;
    let positions: Vec<Vec3> = (0..=steps)
        .map(|n| point_at_arc(waypoints, n as f64 * stride))
        .collect();
    let mut poses = Vec::with_capacity(steps);
    for n in 0..steps {
        let chord = positions[n + 1] - positions[n];
        poses.push(AgentPose {
            position: positions[n],
            heading: chord.y.atan2(chord.x),
            tilt: 0.0,
            speed: chord.horizontal_norm() / step_interval,
        });
    }
    Ok(poses)
}

/// Noise-free trajectory plus per-step, per-feature visibility and MPC parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub step_interval: f64,
    pub poses: Vec<AgentPose>,
    /// `visible[n][f]` for feature index `f` of the scenario.
    pub visible: Vec<Vec<bool>>,
    pub geometry: Vec<Vec<MpcGeometry>>,
    pub amplitude: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn new(scenario: &Scenario) -> Result<Self, ScenarioError> {
        let t = &scenario.trajectory;
        let poses = generate_trajectory(&scenario.waypoints(), t.speed, t.step_interval)?;
        let walls = scenario.walls();
        let mut visible = Vec::with_capacity(poses.len());
        let mut geometry = Vec::with_capacity(poses.len());
        let mut amplitude = Vec::with_capacity(poses.len());
        for pose in &poses {
            let mut vis = Vec::new();
            let mut geo = Vec::new();
            let mut amp = Vec::new();
            for f in &scenario.features {
                let p = f.position();
                vis.push(is_visible(pose.position, p, &walls));
                let g = mpc_geometry(pose, p, 0.0)
                    .map_err(|e| ScenarioError::Invalid(format!("feature {}: {e}", f.name)))?;
                amp.push(scenario.true_amplitude(g.distance, f.bounces()));
                geo.push(g);
            }
            visible.push(vis);
            geometry.push(geo);
            amplitude.push(amp);
        }
        Ok(Self {
            step_interval: t.step_interval,
            poses,
            visible,
            geometry,
            amplitude,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.step_interval
    }
}

/// Odometry speed and gyroscope heading-rate readings, one per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Proprioception {
    pub speed: Vec<f64>,
    pub turn_rate: Vec<f64>,
}

/// Noisy proprioceptive readings. The turn rate at step `n` carries the heading
/// change from `n` to `n+1`; its noise integrates to heading noise of `heading_std`.
pub fn proprioceptive_readings<R: Rng + ?Sized>(
    truth: &GroundTruth,
    speed_std: f64,
    heading_std: f64,
    rng: &mut R,
) -> Proprioception {
    let dt = truth.step_interval;
    let n = truth.len();
    let mut speed = Vec::with_capacity(n);
    let mut turn_rate = Vec::with_capacity(n);
    for i in 0..n {
        let ws: f64 = rng.sample(StandardNormal);
        let wpsi: f64 = rng.sample(StandardNormal);
        speed.push(truth.poses[i].speed + speed_std * ws);
        let dpsi = if i + 1 < n {
            wrap_angle(truth.poses[i + 1].heading - truth.poses[i].heading)
        } else {
            0.0
        };
        turn_rate.push((dpsi + heading_std * wpsi) / dt);
    }
    Proprioception { speed, turn_rate }
}

/// Measurements of one cell at one step, with the generating feature for evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellScan {
    pub measurements: Vec<Measurement>,
    /// Scenario feature index per measurement; `None` for clutter.
    pub sources: Vec<Option<usize>>,
}

/// All cells' measurements at one step.
pub type Scan = Vec<CellScan>;

/// Draws a Rician amplitude around `u` with scale `sigma`.
fn sample_rician<R: Rng + ?Sized>(u: f64, sigma: f64, rng: &mut R) -> f64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    (u + sigma * a).hypot(sigma * b)
}

/// Draws a clutter amplitude from the truncated Rayleigh `2z e^{−z²}` above `floor`.
fn sample_clutter_amplitude<R: Rng + ?Sized>(floor: f64, rng: &mut R) -> f64 {
    let v: f64 = rng.gen();
    (floor * floor - (1.0 - v).ln()).sqrt()
}

/// Generates one scan per ground-truth step.
pub fn generate_measurements<R: Rng + ?Sized>(
    truth: &GroundTruth,
    scenario: &Scenario,
    rng: &mut R,
) -> Vec<Scan> {
    let profile = scenario.noise_profile();
    let floor = profile.amplitude_floor();
    let cells = scenario.cell_count();
    let clutter = if scenario.radio.clutter_mean > 0.0 {
        Some(Poisson::new(scenario.radio.clutter_mean).expect("positive mean"))
    } else {
        None
    };
    let mut scans = Vec::with_capacity(truth.len());
    for n in 0..truth.len() {
        let mut scan: Scan = vec![CellScan::default(); cells];
        for (f, feature) in scenario.features.iter().enumerate() {
            if !truth.visible[n][f] {
                continue;
            }
            let u = truth.amplitude[n][f];
            let z_u = sample_rician(u, profile.amplitude_std(u), rng);
            if z_u <= floor {
                continue;
            }
            let g = truth.geometry[n][f];
            let s = profile.dispersion(u).expect("positive amplitude");
            let nd: f64 = rng.sample(StandardNormal);
            let na: f64 = rng.sample(StandardNormal);
            let ne: f64 = rng.sample(StandardNormal);
            let cell = &mut scan[feature.cell];
            cell.measurements.push(Measurement {
                distance: g.distance + s.distance * nd,
                azimuth: wrap_angle(g.azimuth + s.azimuth * na),
                elevation: (g.elevation + s.elevation * ne).clamp(-PI / 2.0, PI / 2.0),
                amplitude: z_u,
            });
            cell.sources.push(Some(f));
        }
        for cell in scan.iter_mut() {
            if let Some(pois) = &clutter {
                let count = pois.sample(rng) as usize;
                for _ in 0..count {
                    cell.measurements.push(Measurement {
                        distance: rng.gen::<f64>() * profile.max_distance,
                        azimuth: wrap_angle(rng.gen::<f64>() * 2.0 * PI - PI),
                        elevation: rng.gen::<f64>() * PI - PI / 2.0,
                        amplitude: sample_clutter_amplitude(floor, rng),
                    });
                    cell.sources.push(None);
                }
            }
            let mut order: Vec<usize> = (0..cell.measurements.len()).collect();
            order.shuffle(rng);
            let measurements = order.iter().map(|&i| cell.measurements[i]).collect();
            let sources = order.iter().map(|&i| cell.sources[i]).collect();
            cell.measurements = measurements;
            cell.sources = sources;
        }
        scans.push(scan);
    }
    scans
}

/// Gaussian draw helper shared by filters: `N(mean, std)` with `std ≥ 0`.
pub fn gaussian<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("finite std").sample(rng)
}
