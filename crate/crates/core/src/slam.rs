//! Particle-based sum-product SLAM step: agent prediction, potential-feature
//! prediction, pseudo-likelihoods, loopy data association, belief updates,
//! new-feature birth, estimation and pruning.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{run_loopy_da, AssociationError, AssociationInput, BpConfig};
use crate::geometry::{wrap_angle, Vec3};
use crate::gmf::{
    activation_intensity, birth_prior, floored_summary, nearest_coverage_index, phd_predict, phd_update, qualify,
    BirthPrior, Gauss, GaussianComponent, GmfRepository, PhdConfig, PhdIntensity, QualifyCriteria, Roi,
    TrackSnapshot, TrackSummary,
};
use crate::measurement::{ln_gauss, LikelihoodKernel, NoiseProfile, PreparedMeasurement};
use crate::synthetic::CellScan;

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("agent belief collapsed at step {0}")]
    BeliefCollapse(usize),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Filter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub particles: usize,
    /// Survival probability `P_s` of a potential feature.
    pub survival: f64,
    /// Declaration threshold `P_det`.
    pub declare_threshold: f64,
    pub prune_threshold: f64,
    /// Maximum number of potential features per cell.
    pub max_features: usize,
    /// Expected false alarms per step and cell, `μ_fa`.
    pub clutter_mean: f64,
    /// Per-step position drift std of potential features.
    pub position_drift: f64,
    /// Per-step amplitude drift std, relative to the amplitude.
    pub amplitude_drift: f64,
    pub speed_std: f64,
    pub heading_std: f64,
    /// Random-walk std of the clock-offset distances; 0 keeps them fixed.
    pub clock_offset_drift: f64,
    /// Position std of the anchor (PA) feature at initialization.
    pub anchor_position_std: f64,
    /// Gate in standard deviations on the distance residual.
    pub gate_sigmas: f64,
    pub use_measurements: bool,
    pub use_gmf: bool,
    pub association: BpSettings,
    pub phd: PhdConfig,
    pub qualify: QualifyCriteria,
}

/// Serializable mirror of [`BpConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpSettings {
    pub max_iters: usize,
    pub tolerance: f64,
    pub damping: Option<f64>,
}

impl Default for BpSettings {
    fn default() -> Self {
        let c = BpConfig::default();
        Self {
            max_iters: c.max_iters,
            tolerance: c.tolerance,
            damping: c.damping,
        }
    }
}

impl From<BpSettings> for BpConfig {
    fn from(s: BpSettings) -> Self {
        Self {
            max_iters: s.max_iters,
            tolerance: s.tolerance,
            damping: s.damping,
        }
    }
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            particles: 30_000,
            survival: 0.9,
            declare_threshold: 0.5,
            prune_threshold: 1e-3,
            max_features: 50,
            clutter_mean: 1.0,
            position_drift: 1e-2,
            amplitude_drift: 0.05,
            speed_std: 0.19,
            heading_std: 0.18f64.to_radians(),
            clock_offset_drift: 0.0,
            anchor_position_std: 1e-2,
            gate_sigmas: 10.0,
            use_measurements: true,
            use_gmf: false,
            association: BpSettings::default(),
            phd: PhdConfig::default(),
            qualify: QualifyCriteria::default(),
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<(), SlamError> {
        let bad = |m: &str| Err(SlamError::Config(m.to_string()));
        if self.particles == 0 {
            return bad("particles must be positive");
        }
        for (name, p) in [
            ("survival", self.survival),
            ("declare_threshold", self.declare_threshold),
            ("prune_threshold", self.prune_threshold),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(SlamError::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.clutter_mean > 0.0) {
            return bad("clutter_mean must be positive");
        }
        if [
            self.position_drift,
            self.amplitude_drift,
            self.speed_std,
            self.heading_std,
            self.clock_offset_drift,
            self.anchor_position_std,
        ]
        .iter()
        .any(|s| !(*s >= 0.0))
        {
            return bad("standard deviations must be non-negative");
        }
        if self.max_features == 0 {
            return bad("max_features must be positive");
        }
        Ok(())
    }
}

/// Gaussian prior of the initial agent state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPrior {
    pub position: Vec3,
    pub position_std: [f64; 3],
    pub heading: f64,
    pub heading_std: f64,
    pub speed: f64,
    pub speed_std: f64,
}

/// Weighted agent particles, stored per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParticles {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub heading: Vec<f64>,
    pub speed: Vec<f64>,
    /// `clock_offset[j][i]`: distance offset of particle `i` towards cell `j`.
    pub clock_offset: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

impl AgentParticles {
    pub fn sample<R: Rng + ?Sized>(prior: &AgentPrior, count: usize, cells: usize, rng: &mut R) -> Self {
        let mut p = Self {
            x: Vec::with_capacity(count),
            y: Vec::with_capacity(count),
            z: Vec::with_capacity(count),
            heading: Vec::with_capacity(count),
            speed: Vec::with_capacity(count),
            clock_offset: vec![vec![0.0; count]; cells],
            weights: vec![1.0 / count as f64; count],
        };
        for _ in 0..count {
            p.x.push(prior.position.x + prior.position_std[0] * normal(rng));
            p.y.push(prior.position.y + prior.position_std[1] * normal(rng));
            p.z.push(prior.position.z + prior.position_std[2] * normal(rng));
            p.heading.push(wrap_angle(prior.heading + prior.heading_std * normal(rng)));
            p.speed.push(prior.speed + prior.speed_std * normal(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Constant-speed kinematics driven by odometry speed and gyroscope turn rate.
    #[allow(clippy::too_many_arguments)]
    pub fn predict<R: Rng + ?Sized>(
        &mut self,
        odometry_speed: f64,
        turn_rate: f64,
        dt: f64,
        speed_std: f64,
        heading_std: f64,
        clock_offset_drift: f64,
        rng: &mut R,
    ) {
        for i in 0..self.len() {
            let (s, h) = (self.speed[i], self.heading[i]);
            self.x[i] += s * dt * h.cos();
            self.y[i] += s * dt * h.sin();
            self.heading[i] = wrap_angle(h + dt * turn_rate + heading_std * normal(rng));
            self.speed[i] = odometry_speed + speed_std * normal(rng);
        }
        if clock_offset_drift > 0.0 {
            for cell in &mut self.clock_offset {
                for d in cell.iter_mut() {
                    *d += clock_offset_drift * normal(rng);
                }
            }
        }
    }

    /// MMSE pose; heading is the circular mean.
    pub fn mmse(&self) -> PoseEstimate {
        let (mut x, mut y, mut z, mut s, mut c, mut sn) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..self.len() {
            let w = self.weights[i];
            x += w * self.x[i];
            y += w * self.y[i];
            z += w * self.z[i];
            s += w * self.speed[i];
            c += w * self.heading[i].cos();
            sn += w * self.heading[i].sin();
        }
        PoseEstimate {
            position: Vec3::new(x, y, z),
            heading: sn.atan2(c),
            speed: s,
        }
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let idx = systematic_resample(&self.weights, rng);
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        self.x = pick(&self.x);
        self.y = pick(&self.y);
        self.z = pick(&self.z);
        self.heading = pick(&self.heading);
        self.speed = pick(&self.speed);
        self.clock_offset = self.clock_offset.iter().map(pick).collect();
        let n = self.len();
        self.weights = vec![1.0 / n as f64; n];
    }
}

/// Systematic resampling; returns ancestor indices in ascending order.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut u = rng.gen::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..n {
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseEstimate {
    pub position: Vec3,
    pub heading: f64,
    pub speed: f64,
}

/// Declared map-feature estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureEstimate {
    pub id: u64,
    pub cell: usize,
    pub position: Vec3,
    pub position_std: [f64; 3],
    pub amplitude: f64,
    pub amplitude_std: f64,
    pub existence: f64,
}

/// A Bernoulli track with a particle cloud over `(x, y, z, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialFeature {
    pub id: u64,
    pub cell: usize,
    pub existence: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub weights: Vec<f64>,
    pub born: usize,
    /// Anchors (PAs) do not drift.
    pub anchor: bool,
    /// Number of steps the feature has been declared.
    pub declared_steps: usize,
    pub history: Vec<TrackSnapshot>,
    /// Repository entry built from this feature, once qualified.
    pub gmf: Option<u64>,
}

impl PotentialFeature {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Survival prediction: drift the cloud and return `(α1, α0)`, the surviving
    /// and dead prior masses.
    pub fn predict<R: Rng + ?Sized>(
        &mut self,
        survival: f64,
        position_drift: f64,
        amplitude_drift: f64,
        rng: &mut R,
    ) -> (f64, f64) {
        if !self.anchor && position_drift > 0.0 {
            for i in 0..self.len() {
                self.x[i] += position_drift * normal(rng);
                self.y[i] += position_drift * normal(rng);
                self.z[i] += position_drift * normal(rng);
            }
        }
        if amplitude_drift > 0.0 {
            for u in &mut self.u {
                *u = (*u + amplitude_drift * *u * normal(rng)).abs();
            }
        }
        let alive = survival * self.existence;
        (alive, 1.0 - alive)
    }

    pub fn summary(&self) -> ([Gauss; 3], Gauss) {
        let comps = [&self.x, &self.y, &self.z, &self.u];
        let mut g = [Gauss::new(0.0, 0.0); 4];
        for (d, v) in comps.iter().enumerate() {
            let mean: f64 = v.iter().zip(&self.weights).map(|(a, w)| a * w).sum();
            let var: f64 = v.iter().zip(&self.weights).map(|(a, w)| w * (a - mean).powi(2)).sum();
            g[d] = Gauss::new(mean, var.max(0.0).sqrt());
        }
        ([g[0], g[1], g[2]], g[3])
    }

    pub fn estimate(&self) -> FeatureEstimate {
        let (p, a) = self.summary();
        FeatureEstimate {
            id: self.id,
            cell: self.cell,
            position: Vec3::new(p[0].mean, p[1].mean, p[2].mean),
            position_std: [p[0].std, p[1].std, p[2].std],
            amplitude: a.mean,
            amplitude_std: a.std,
            existence: self.existence,
        }
    }

    fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Equal-weight resampling followed by a shuffle, so index pairing with
    /// agent particles stays uncorrelated.
    fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut idx = systematic_resample(&self.weights, rng);
        idx.shuffle(rng);
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        self.x = pick(&self.x);
        self.y = pick(&self.y);
        self.z = pick(&self.z);
        self.u = pick(&self.u);
        let n = self.len();
        self.weights = vec![1.0 / n as f64; n];
    }
}

/// Drops features below `threshold` and keeps at most `cap` per cell, preferring
/// higher existence (then lower id).
pub fn prune_features(features: &mut Vec<PotentialFeature>, threshold: f64, cap: usize) {
    features.retain(|f| f.existence >= threshold);
    let cells = features.iter().map(|f| f.cell + 1).max().unwrap_or(0);
    for cell in 0..cells {
        let mut ranked: Vec<(f64, u64)> = features
            .iter()
            .filter(|f| f.cell == cell)
            .map(|f| (f.existence, f.id))
            .collect();
        if ranked.len() <= cap {
            continue;
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let dropped: Vec<u64> = ranked[cap..].iter().map(|r| r.1).collect();
        features.retain(|f| !dropped.contains(&f.id));
    }
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn normalize_log_weights(ln_w: &[f64]) -> Option<Vec<f64>> {
    let max = ln_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut w: Vec<f64> = ln_w.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    for x in &mut w {
        *x /= s;
    }
    Some(w)
}

/// Proprioceptive inputs for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proprio {
    /// Odometry speed at the current step.
    pub speed: f64,
    /// Gyroscope turn rate at the previous step.
    pub turn_rate: f64,
}

/// Result of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub step: usize,
    pub agent: PoseEstimate,
    pub features: Vec<FeatureEstimate>,
    pub association_converged: bool,
}

/// Per-legacy-feature quantities shared by the association and the updates.
struct LegacyEval {
    alpha1: f64,
    alpha0: f64,
    /// Normalized pairing weights `ω̄ⁱ ∝ w_xⁱ w_kⁱ`.
    pairing: Vec<f64>,
    detection: Vec<f64>,
    /// `ln(P_d f)` per particle for each measurement; `None` if fully gated.
    ln_value: Vec<Option<Vec<f64>>>,
    ln_beta: Vec<f64>,
    miss: f64,
}

/// Birth proposal for one measurement.
struct BirthEval {
    ln_h: Vec<f64>,
    q: Vec<[f64; 4]>,
    ln_xi: f64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable run state of a [`SlamFilter`], written as JSON for resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub cfg: StepConfig,
    pub profile: NoiseProfile,
    pub roi: Roi,
    pub step_interval: f64,
    pub cells: usize,
    pub step: usize,
    pub agent: AgentParticles,
    pub features: Vec<PotentialFeature>,
    pub phd: Vec<PhdIntensity>,
    /// Repository in its binary file format.
    pub repository: Vec<u8>,
    pub next_id: u64,
    pub rng: ChaCha8Rng,
}

/// The complete filter state for one run.
#[derive(Debug, Clone)]
pub struct SlamFilter {
    cfg: StepConfig,
    kernel: LikelihoodKernel,
    roi: Roi,
    step_interval: f64,
    cells: usize,
    step: usize,
    pub agent: AgentParticles,
    pub features: Vec<PotentialFeature>,
    pub phd: Vec<PhdIntensity>,
    pub repository: GmfRepository,
    next_id: u64,
    rng: ChaCha8Rng,
}

impl SlamFilter {
    /// Samples the initial agent belief and, when measurements are used, one
    /// anchor feature per cell at the known PA positions.
    pub fn new(
        cfg: StepConfig,
        profile: NoiseProfile,
        roi: Roi,
        step_interval: f64,
        prior: &AgentPrior,
        anchors: &[Vec3],
        seed: u64,
    ) -> Result<Self, SlamError> {
        cfg.validate()?;
        if !(step_interval > 0.0) {
            return Err(SlamError::Config("step interval must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = anchors.len().max(1);
        let agent = AgentParticles::sample(prior, cfg.particles, cells, &mut rng);
        let mut filter = Self {
            cfg,
            kernel: LikelihoodKernel::new(&profile),
            roi,
            step_interval,
            cells,
            step: 0,
            agent,
            features: Vec::new(),
            phd: vec![PhdIntensity::default(); cells],
            repository: GmfRepository::new(),
            next_id: 1,
            rng,
        };
        if cfg.use_measurements {
            for (cell, &pa) in anchors.iter().enumerate() {
                let f = filter.anchor_feature(cell, pa);
                filter.features.push(f);
            }
        }
        Ok(filter)
    }

    fn anchor_feature(&mut self, cell: usize, pa: Vec3) -> PotentialFeature {
        let n = self.cfg.particles;
        let s = self.cfg.anchor_position_std;
        let lo = self.kernel.profile.amplitude_floor();
        let hi = self.cfg.phd.amplitude_max;
        let rng = &mut self.rng;
        let mut f = PotentialFeature {
            id: self.next_id,
            cell,
            existence: 1.0,
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            weights: vec![1.0 / n as f64; n],
            born: 0,
            anchor: true,
            declared_steps: 0,
            history: Vec::new(),
            gmf: None,
        };
        for _ in 0..n {
            f.x.push(pa.x + s * normal(rng));
            f.y.push(pa.y + s * normal(rng));
            f.z.push(pa.z + s * normal(rng));
            f.u.push(lo + (hi - lo) * rng.gen::<f64>());
        }
        self.next_id += 1;
        f
    }

    pub fn config(&self) -> &StepConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Replaces the repository, e.g. with one built on an earlier lap.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut repository = Vec::new();
        self.repository.write_to(&mut repository).expect("in-memory write");
        Checkpoint {
            version: CHECKPOINT_VERSION,
            cfg: self.cfg,
            profile: self.kernel.profile,
            roi: self.roi,
            step_interval: self.step_interval,
            cells: self.cells,
            step: self.step,
            agent: self.agent.clone(),
            features: self.features.clone(),
            phd: self.phd.clone(),
            repository,
            next_id: self.next_id,
            rng: self.rng.clone(),
        }
    }

    pub fn restore(c: Checkpoint) -> Result<Self, SlamError> {
        if c.version != CHECKPOINT_VERSION {
            return Err(SlamError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        c.cfg.validate()?;
        let repository = GmfRepository::read_from(&mut c.repository.as_slice())
            .map_err(|e| SlamError::Checkpoint(e.to_string()))?;
        if c.phd.len() != c.cells || c.agent.clock_offset.len() != c.cells {
            return Err(SlamError::Checkpoint("cell count mismatch".into()));
        }
        Ok(Self {
            cfg: c.cfg,
            kernel: LikelihoodKernel::new(&c.profile),
            roi: c.roi,
            step_interval: c.step_interval,
            cells: c.cells,
            step: c.step,
            agent: c.agent,
            features: c.features,
            phd: c.phd,
            repository,
            next_id: c.next_id,
            rng: c.rng,
        })
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), SlamError> {
        let json = serde_json::to_vec(&self.checkpoint()).map_err(|e| SlamError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| SlamError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, SlamError> {
        let bytes = std::fs::read(path).map_err(|e| SlamError::Checkpoint(format!("{}: {e}", path.display())))?;
        let c: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| SlamError::Checkpoint(e.to_string()))?;
        Self::restore(c)
    }

    pub fn set_repository(&mut self, repository: GmfRepository) {
        self.repository = repository;
    }

    /// Estimates from the current belief without advancing time.
    pub fn estimates(&self) -> (PoseEstimate, Vec<FeatureEstimate>) {
        let features = self
            .features
            .iter()
            .filter(|f| f.existence > self.cfg.declare_threshold)
            .map(|f| f.estimate())
            .collect();
        (self.agent.mmse(), features)
    }

    /// Runs one time step. `proprio` is `None` on the first step, which only
    /// processes measurements against the prior.
    pub fn step(&mut self, proprio: Option<Proprio>, scan: &[CellScan]) -> Result<StepOutput, SlamError> {
        let cfg = self.cfg;
        if let Some(p) = proprio {
            self.step += 1;
            self.agent.predict(
                p.speed,
                p.turn_rate,
                self.step_interval,
                cfg.speed_std,
                cfg.heading_std,
                cfg.clock_offset_drift,
                &mut self.rng,
            );
        }
        if !cfg.use_measurements {
            let (agent, _) = self.estimates();
            return Ok(StepOutput {
                step: self.step,
                agent,
                features: Vec::new(),
                association_converged: true,
            });
        }

        let mut alphas = Vec::with_capacity(self.features.len());
        for f in &mut self.features {
            alphas.push(f.predict(cfg.survival, cfg.position_drift, cfg.amplitude_drift, &mut self.rng));
        }

        let predicted_pose = self.agent.mmse();
        let mut priors = Vec::with_capacity(self.cells);
        let mut predicted_phd = Vec::with_capacity(self.cells);
        for cell in 0..self.cells {
            let active = if cfg.use_gmf {
                self.active_components(cell, predicted_pose.position)
            } else {
                Vec::new()
            };
            let p = phd_predict(&self.phd[cell], &self.roi, &active, &cfg.phd);
            priors.push(birth_prior(&p, &self.roi, self.kernel.profile.amplitude_floor(), &cfg.phd));
            predicted_phd.push(p);
        }

        let n = self.agent.len();
        let mut ln_factor = vec![0.0; n];
        let mut converged = true;
        let mut born = Vec::new();
        let mut updated: Vec<Option<(Vec<f64>, f64)>> = vec![None; self.features.len()];
        for cell in 0..self.cells {
            let empty = CellScan::default();
            let cell_scan = scan.get(cell).unwrap_or(&empty);
            let (c, b) = self.update_cell(cell, cell_scan, priors[cell].as_ref(), &alphas, &mut ln_factor, &mut updated)?;
            converged &= c;
            born.extend(b);
        }

        for (f, u) in self.features.iter_mut().zip(updated) {
            if let Some((w, r)) = u {
                f.weights = w;
                f.existence = r;
            }
        }
        let ln_w: Vec<f64> = self
            .agent
            .weights
            .iter()
            .zip(&ln_factor)
            .map(|(w, l)| w.ln() + l)
            .collect();
        self.agent.weights = normalize_log_weights(&ln_w).ok_or(SlamError::BeliefCollapse(self.step))?;
        if self.agent.effective_sample_size() < 0.5 * n as f64 {
            self.agent.resample(&mut self.rng);
        }
        for f in &mut self.features {
            if f.effective_sample_size() < 0.5 * f.len() as f64 {
                f.resample(&mut self.rng);
            }
        }
        self.features.extend(born);
        prune_features(&mut self.features, cfg.prune_threshold, cfg.max_features);

        for (cell, p) in predicted_phd.iter().enumerate() {
            self.phd[cell] = phd_update(p, &cfg.phd);
        }

        let (agent, features) = self.estimates();
        self.record_tracks(agent.position);
        Ok(StepOutput {
            step: self.step,
            agent,
            features,
            association_converged: converged,
        })
    }

    fn active_components(&self, cell: usize, agent: Vec3) -> Vec<GaussianComponent> {
        let tracked: Vec<u64> = self.features.iter().filter_map(|f| f.gmf).collect();
        self.repository
            .entries()
            .iter()
            .filter(|e| e.cell == cell && !tracked.contains(&e.id))
            .filter_map(|e| {
                nearest_coverage_index(agent, e, self.cfg.phd.activation_radius)
                    .map(|slot| activation_intensity(e, slot, self.cfg.phd.activation_weight))
            })
            .collect()
    }

    #[allow(clippy::type_complexity)]
    fn update_cell(
        &mut self,
        cell: usize,
        scan: &CellScan,
        prior: Option<&BirthPrior>,
        alphas: &[(f64, f64)],
        ln_factor: &mut [f64],
        updated: &mut [Option<(Vec<f64>, f64)>],
    ) -> Result<(bool, Vec<PotentialFeature>), SlamError> {
        let cfg = self.cfg;
        let n = self.agent.len();
        let profile = self.kernel.profile;
        let z: Vec<PreparedMeasurement> = scan
            .measurements
            .iter()
            .map(|m| PreparedMeasurement::new(*m, &profile, cfg.clutter_mean))
            .collect();
        let legacy: Vec<usize> = (0..self.features.len()).filter(|&k| self.features[k].cell == cell).collect();
        let m_n = z.len();

        let evals: Vec<LegacyEval> = legacy
            .iter()
            .map(|&k| self.evaluate_legacy(&self.features[k], alphas[k], cell, &z))
            .collect();
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let births: Vec<BirthEval> = z.iter().map(|m| self.propose_birth(cell, m, prior, &mut rng)).collect();
        self.rng = rng;

        // column scales keep every measurement's weights within f64 range
        let scale: Vec<f64> = (0..m_n)
            .map(|m| {
                evals
                    .iter()
                    .map(|e| e.ln_beta[m])
                    .chain([z[m].ln_clutter, births[m].ln_xi])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .map(|s| if s.is_finite() { s } else { 0.0 })
            .collect();
        let input = AssociationInput {
            pair: evals
                .iter()
                .map(|e| (0..m_n).map(|m| (e.ln_beta[m] - scale[m]).exp()).collect())
                .collect(),
            miss: evals.iter().map(|e| e.miss.max(1e-300)).collect(),
            unassigned: (0..m_n)
                .map(|m| ((z[m].ln_clutter - scale[m]).exp() + (births[m].ln_xi - scale[m]).exp()).max(1e-250))
                .collect(),
        };
        let da = run_loopy_da(&input, &cfg.association.into())?;

        // legacy features: particle reweighting, existence, agent messages ρ
        for (slot, &k) in legacy.iter().enumerate() {
            let e = &evals[slot];
            let f = &self.features[k];
            let mut inner = vec![0.0; n];
            for (i, v) in inner.iter_mut().enumerate() {
                *v = 1.0 - e.detection[i];
            }
            for m in 0..m_n {
                if let Some(ln_v) = &e.ln_value[m] {
                    let nu = da.to_legacy[slot][m + 1];
                    for i in 0..n {
                        if ln_v[i] > f64::NEG_INFINITY {
                            inner[i] += nu * (ln_v[i] - scale[m]).exp();
                        }
                    }
                }
            }
            let mut mass = 0.0;
            let mut w = vec![0.0; n];
            for i in 0..n {
                w[i] = e.pairing[i] * inner[i];
                mass += w[i];
                let rho = e.alpha1 * n as f64 * f.weights[i] * inner[i] + e.alpha0;
                ln_factor[i] += rho.ln();
            }
            let m1 = e.alpha1 * mass;
            let existence = m1 / (m1 + e.alpha0);
            let weights = if mass > 0.0 && mass.is_finite() {
                w.iter().map(|x| x / mass).collect()
            } else {
                f.weights.clone()
            };
            updated[k] = Some((weights, existence));
        }

        // measurements: agent messages κ and new features
        let mut born = Vec::new();
        for m in 0..m_n {
            let clutter = (z[m].ln_clutter - scale[m]).exp();
            let claims: f64 = da.to_measurement[m][1..].iter().sum();
            let b = &births[m];
            for i in 0..n {
                let h = (b.ln_h[i] - scale[m]).exp();
                ln_factor[i] += (clutter + h + claims).ln();
            }
            let xi = (b.ln_xi - scale[m]).exp();
            let existence = xi / (xi + clutter + claims);
            if existence >= cfg.prune_threshold && b.ln_xi.is_finite() {
                let f = self.birth_feature(cell, b, existence, prior);
                born.push(f);
            }
        }
        Ok((da.converged, born))
    }

    fn evaluate_legacy(
        &self,
        f: &PotentialFeature,
        (alpha1, alpha0): (f64, f64),
        cell: usize,
        z: &[PreparedMeasurement],
    ) -> LegacyEval {
        let n = self.agent.len();
        let a = &self.agent;
        let sign = self.kernel.profile.clock_offset_sign;
        let gate = self.cfg.gate_sigmas;
        let mut pairing: Vec<f64> = (0..n).map(|i| a.weights[i] * f.weights[i]).collect();
        let total: f64 = pairing.iter().sum();
        for p in &mut pairing {
            *p /= total;
        }
        let detection: Vec<f64> = f.u.iter().map(|&u| self.kernel.detection.probability(u)).collect();
        let mut ln_value: Vec<Option<Vec<f64>>> = vec![None; z.len()];
        let sd = self.kernel.std(1.0);
        for i in 0..n {
            let u = f.u[i];
            if u <= 0.0 || pairing[i] == 0.0 {
                continue;
            }
            let dx = f.x[i] - a.x[i];
            let dy = f.y[i] - a.y[i];
            let dz = f.z[i] - a.z[i];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            let sd_d = sd[0] / u;
            let mut angles: Option<(f64, f64)> = None;
            for (m, zm) in z.iter().enumerate() {
                let r_d = zm.z.distance + sign * a.clock_offset[cell][i] - d;
                if r_d.abs() > gate * sd_d {
                    continue;
                }
                let (az, el) = *angles.get_or_insert_with(|| {
                    (wrap_angle(dy.atan2(dx) - a.heading[i]), (dz / d).clamp(-1.0, 1.0).asin())
                });
                let res = [r_d, wrap_angle(zm.z.azimuth - az), zm.z.elevation - el];
                let lv = self.kernel.ln_rician(zm.z.amplitude, u) + self.kernel.ln_geometric(res, u);
                ln_value[m].get_or_insert_with(|| vec![f64::NEG_INFINITY; n])[i] = lv;
            }
        }
        let ln_beta = ln_value
            .iter()
            .map(|lv| match lv {
                Some(v) => alpha1.ln() + logsumexp((0..n).map(|i| pairing[i].ln() + v[i])),
                None => f64::NEG_INFINITY,
            })
            .collect();
        let missed: f64 = (0..n).map(|i| pairing[i] * (1.0 - detection[i])).sum();
        LegacyEval {
            alpha1,
            alpha0,
            pairing,
            detection,
            ln_value,
            ln_beta,
            miss: alpha1 * missed + alpha0,
        }
    }

    /// Measurement-driven proposal: amplitude near the measured one, position
    /// along the measured ray from each agent particle. The importance weight
    /// `ln Hⁱ` is `ln(μ_u f_u(q) f(z|xⁱ,q) / proposal(q))`.
    fn propose_birth(
        &self,
        cell: usize,
        m: &PreparedMeasurement,
        prior: Option<&BirthPrior>,
        rng: &mut ChaCha8Rng,
    ) -> BirthEval {
        let n = self.agent.len();
        let Some(prior) = prior else {
            return BirthEval {
                ln_h: vec![f64::NEG_INFINITY; n],
                q: Vec::new(),
                ln_xi: f64::NEG_INFINITY,
            };
        };
        let a = &self.agent;
        let z = m.z;
        let sign = self.kernel.profile.clock_offset_sign;
        let s_u = self.kernel.profile.amplitude_std(z.amplitude);
        let sd = self.kernel.std(1.0);
        let mut ln_h = vec![f64::NEG_INFINITY; n];
        let mut q = vec![[0.0; 4]; n];
        for i in 0..n {
            let nu = normal(rng);
            let nd = normal(rng);
            let na = normal(rng);
            let ne = normal(rng);
            let u = z.amplitude + s_u * nu;
            if u <= 0.0 {
                continue;
            }
            let d = z.distance + sign * a.clock_offset[cell][i] + sd[0] / u * nd;
            let az = z.azimuth + sd[1] / u * na;
            let el = z.elevation + sd[2] / u * ne;
            if d <= 0.0 || el.abs() >= PI / 2.0 {
                continue;
            }
            let (se, ce) = el.sin_cos();
            let (sa, ca) = (az + a.heading[i]).sin_cos();
            let p = [a.x[i] + d * ce * ca, a.y[i] + d * ce * sa, a.z[i] + d * se, u];
            let lambda = prior.intensity(p);
            if lambda <= 0.0 {
                continue;
            }
            let ln_amp = self.kernel.ln_rician(z.amplitude, u) - self.kernel.detection.probability(u).ln();
            ln_h[i] = lambda.ln() + (d * d * ce).ln() + ln_amp - ln_gauss(u - z.amplitude, s_u);
            q[i] = p;
        }
        let ln_xi = logsumexp((0..n).map(|i| a.weights[i].ln() + ln_h[i]));
        BirthEval { ln_h, q, ln_xi }
    }

    fn birth_feature(&mut self, cell: usize, b: &BirthEval, existence: f64, prior: Option<&BirthPrior>) -> PotentialFeature {
        let n = self.agent.len();
        let ln_w: Vec<f64> = (0..n).map(|i| self.agent.weights[i].ln() + b.ln_h[i]).collect();
        let weights = normalize_log_weights(&ln_w).expect("finite birth mass");
        let mut f = PotentialFeature {
            id: self.next_id,
            cell,
            existence,
            x: b.q.iter().map(|p| p[0]).collect(),
            y: b.q.iter().map(|p| p[1]).collect(),
            z: b.q.iter().map(|p| p[2]).collect(),
            u: b.q.iter().map(|p| p[3]).collect(),
            weights,
            born: self.step,
            anchor: false,
            declared_steps: 0,
            history: Vec::new(),
            gmf: None,
        };
        // a birth explained by a repository entry continues that entry
        f.gmf = prior.and_then(|p| {
            let pts: Vec<[f64; 4]> = (0..n).map(|i| [f.x[i], f.y[i], f.z[i], f.u[i]]).collect();
            p.dominant_source(&pts, &f.weights)
        });
        self.next_id += 1;
        f.resample(&mut self.rng);
        f
    }

    /// Updates declared-track histories and qualifies features into the repository.
    fn record_tracks(&mut self, agent: Vec3) {
        let criteria = self.cfg.qualify;
        let stride = criteria.snapshot_stride.max(1);
        let step = self.step as u64;
        for f in &mut self.features {
            if f.existence <= self.cfg.declare_threshold {
                continue;
            }
            f.declared_steps += 1;
            let (position, amplitude) = f.summary();
            if (f.declared_steps - 1) % stride == 0 {
                let snap = TrackSnapshot { step, agent, amplitude };
                f.history.push(snap);
                if let Some(id) = f.gmf {
                    if let Some(entry) = self.repository.get_mut(id) {
                        let summary = floored_summary(&position, amplitude, criteria.min_std);
                        for c in &mut entry.coverage {
                            c.summary[..3].copy_from_slice(&summary[..3]);
                        }
                        entry.coverage.push(crate::gmf::CoveragePoint { step, agent, summary });
                    }
                }
            }
            if f.gmf.is_none() {
                let track = TrackSummary {
                    id: f.id,
                    cell: f.cell,
                    lifespan: f.declared_steps,
                    position,
                    history: &f.history,
                };
                if let Some(entry) = qualify(&track, &criteria) {
                    f.gmf = Some(self.repository.insert(entry));
                }
            }
        }
    }
}

/// Agent MMSE trajectory from proprioception alone: the prior is sampled, then
/// each step applies the kinematic prediction with the same random stream the
/// filter uses when measurements are disabled.
pub fn dead_reckoning(
    prior: &AgentPrior,
    particles: usize,
    cells: usize,
    speed: &[f64],
    turn_rate: &[f64],
    dt: f64,
    cfg: &StepConfig,
    seed: u64,
) -> Vec<PoseEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = AgentParticles::sample(prior, particles, cells, &mut rng);
    let mut out = vec![p.mmse()];
    for n in 1..speed.len() {
        p.predict(
            speed[n],
            turn_rate[n - 1],
            dt,
            cfg.speed_std,
            cfg.heading_std,
            cfg.clock_offset_drift,
            &mut rng,
        );
        out.push(p.mmse());
    }
    out
}
