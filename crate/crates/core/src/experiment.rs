//! Experiment runner: one run per (setup, SNR, seed), repeated over laps, and
//! the run-level analyses used by the summaries.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AgentPose, Vec3};
use crate::gmf::GmfRepository;
use crate::metrics::{ospa, OspaConfig};
use crate::slam::{AgentPrior, FeatureEstimate, PoseEstimate, Proprio, SlamError, SlamFilter, StepConfig};
use crate::synthetic::{
    generate_measurements, proprioceptive_readings, GroundTruth, Scenario, ScenarioError,
};

/// Environment variable holding the worker count for run-level parallelism.
pub const WORKERS_ENV: &str = "MPSLAM_WORKERS";

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Slam(#[from] SlamError),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid experiment config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setup {
    #[serde(rename = "proprioception")]
    Proprioception,
    #[serde(rename = "slam")]
    Slam,
    #[serde(rename = "slam+gmf")]
    SlamGmf,
}

impl Setup {
    pub const ALL: [Setup; 3] = [Setup::Proprioception, Setup::Slam, Setup::SlamGmf];

    pub fn label(self) -> &'static str {
        match self {
            Setup::Proprioception => "proprioception",
            Setup::Slam => "slam",
            Setup::SlamGmf => "slam+gmf",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Setup::Proprioception => "proprioception",
            Setup::Slam => "slam",
            Setup::SlamGmf => "slam-gmf",
        }
    }

    /// Offset of this setup's filter stream from [`STREAM_FILTER`].
    pub fn tag(self) -> u64 {
        match self {
            Setup::Proprioception => 1,
            Setup::Slam => 2,
            Setup::SlamGmf => 3,
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Setup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proprioception" => Ok(Setup::Proprioception),
            "slam" => Ok(Setup::Slam),
            "slam+gmf" | "slam-gmf" => Ok(Setup::SlamGmf),
            other => Err(format!("unknown setup `{other}`")),
        }
    }
}

/// Experiment configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Scenario file, relative to the config file's directory.
    pub scenario: PathBuf,
    #[serde(default = "default_setups")]
    pub setups: Vec<Setup>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_snrs")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_laps")]
    pub laps: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub filter: StepConfig,
    #[serde(default)]
    pub ospa: OspaConfig,
}

fn default_setups() -> Vec<Setup> {
    Setup::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}
fn default_particles() -> usize {
    30_000
}
fn default_snrs() -> Vec<f64> {
    vec![33.5, 37.5, 41.5]
}
fn default_laps() -> usize {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(ExperimentError::Invalid(format!(
                "unsupported config schema {}, expected {CONFIG_SCHEMA}",
                cfg.schema
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; the scenario path is resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        if cfg.scenario.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.scenario = dir.join(&cfg.scenario);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.particles < 1000 {
            return bad("particle count must be at least 1000");
        }
        if self.setups.is_empty() || self.snr_db.is_empty() {
            return bad("setups and snr_db must be non-empty");
        }
        if self.laps == 0 {
            return bad("laps must be at least 1");
        }
        Ok(())
    }

    /// Full-scale settings: 50 seeds and 10⁶ particles.
    pub fn paper_scale(&mut self) {
        self.seeds = (1..=50).collect();
        self.particles = 1_000_000;
    }

    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &setup in &self.setups {
            for &snr_db in &self.snr_db {
                for &seed in &self.seeds {
                    out.push(RunSpec {
                        setup,
                        snr_db,
                        seed,
                        particles: self.particles,
                        laps: self.laps,
                    });
                }
            }
        }
        out
    }
}

/// One run of one setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub setup: Setup,
    pub snr_db: f64,
    pub seed: u64,
    pub particles: usize,
    pub laps: usize,
}

impl RunSpec {
    /// Relative output directory of this run.
    pub fn dir(&self) -> PathBuf {
        PathBuf::from(self.setup.slug())
            .join(format!("snr{}", self.snr_db))
            .join(format!("seed{}", self.seed))
    }
}

/// Per-step record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub lap: usize,
    pub step: usize,
    pub time: f64,
    pub truth: AgentPose,
    pub estimate: PoseEstimate,
    pub features: Vec<FeatureEstimate>,
    pub ospa: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub spec: RunSpec,
    pub records: Vec<StepRecord>,
    pub repository: GmfRepository,
    pub wall_seconds: f64,
    pub association_failures: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for a named random stream of a run.
pub fn stream_seed(seed: u64, snr_db: f64, lap: usize, stream: u64) -> u64 {
    let mut h = splitmix(seed);
    for v in [snr_db.to_bits(), lap as u64, stream] {
        h = splitmix(h ^ v);
    }
    h
}

/// Stream ids for [`stream_seed`].
pub const STREAM_PROPRIO: u64 = 11;
pub const STREAM_MEASUREMENTS: u64 = 12;
pub const STREAM_FILTER: u64 = 20;

/// Filter settings for a setup on a scenario.
pub fn filter_config(base: &StepConfig, scenario: &Scenario, setup: Setup, particles: usize) -> StepConfig {
    StepConfig {
        particles,
        clutter_mean: scenario.radio.clutter_mean,
        speed_std: scenario.proprioception.speed_std,
        heading_std: scenario.heading_std(),
        use_measurements: setup != Setup::Proprioception,
        use_gmf: setup == Setup::SlamGmf,
        ..*base
    }
}

/// Agent prior around the first true pose.
pub fn agent_prior(scenario: &Scenario, truth: &GroundTruth, first_speed: f64) -> AgentPrior {
    let p = &scenario.agent_prior;
    let pose = truth.poses[0];
    AgentPrior {
        position: pose.position + Vec3::from(p.position_offset_mean),
        position_std: p.position_offset_std,
        heading: pose.heading + p.heading_offset_mean_deg.to_radians(),
        heading_std: p.heading_offset_std_deg.to_radians(),
        speed: first_speed,
        speed_std: scenario.proprioception.speed_std,
    }
}

/// Executes one run on `scenario` with its SNR set to `spec.snr_db`.
pub fn run_single(
    scenario: &Scenario,
    base: &StepConfig,
    ospa_cfg: &OspaConfig,
    spec: &RunSpec,
) -> Result<RunResult, ExperimentError> {
    let started = Instant::now();
    let mut scenario = scenario.clone();
    scenario.radio.snr_1m_db = spec.snr_db;
    let truth = GroundTruth::new(&scenario)?;
    let cfg = filter_config(base, &scenario, spec.setup, spec.particles);
    let features_truth: Vec<Vec3> = scenario.features.iter().map(|f| f.position()).collect();
    let anchors: Vec<Vec3> = scenario.anchors().iter().map(|&i| features_truth[i]).collect();
    let mut repository = GmfRepository::new();
    let mut records = Vec::with_capacity(truth.len() * spec.laps);
    let mut association_failures = 0;

    for lap in 0..spec.laps {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, spec.snr_db, lap, STREAM_PROPRIO));
        let proprio = proprioceptive_readings(
            &truth,
            scenario.proprioception.speed_std,
            scenario.heading_std(),
            &mut rng,
        );
        let scans = if cfg.use_measurements {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, spec.snr_db, lap, STREAM_MEASUREMENTS));
            generate_measurements(&truth, &scenario, &mut rng)
        } else {
            Vec::new()
        };
        let prior = agent_prior(&scenario, &truth, proprio.speed[0]);
        let mut filter = SlamFilter::new(
            cfg,
            scenario.noise_profile(),
            scenario.roi,
            truth.step_interval,
            &prior,
            &anchors,
            stream_seed(spec.seed, spec.snr_db, lap, STREAM_FILTER + spec.setup.tag()),
        )?;
        filter.set_repository(std::mem::take(&mut repository));
        for n in 0..truth.len() {
            let input = (n > 0).then(|| Proprio {
                speed: proprio.speed[n],
                turn_rate: proprio.turn_rate[n - 1],
            });
            let scan = scans.get(n).map(|s| s.as_slice()).unwrap_or(&[]);
            let out = filter.step(input, scan)?;
            if !out.association_converged {
                association_failures += 1;
            }
            let positions: Vec<Vec3> = out.features.iter().map(|f| f.position).collect();
            let d = ospa(&positions, &features_truth, ospa_cfg).expect("valid OSPA config");
            records.push(StepRecord {
                lap,
                step: n,
                time: truth.time(n),
                truth: truth.poses[n],
                estimate: out.agent,
                features: out.features,
                ospa: d,
            });
        }
        repository = std::mem::take(&mut filter.repository);
    }
    Ok(RunResult {
        spec: *spec,
        records,
        repository,
        wall_seconds: started.elapsed().as_secs_f64(),
        association_failures,
    })
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs all specs on a pool of `workers` threads; results keep the input order.
pub fn run_batch(
    scenario: &Scenario,
    base: &StepConfig,
    ospa_cfg: &OspaConfig,
    specs: &[RunSpec],
    workers: usize,
) -> Result<Vec<RunResult>, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        specs
            .par_iter()
            .map(|s| run_single(scenario, base, ospa_cfg, s))
            .collect()
    })
}

/// RMSE of the position error over the records of `lap` with `time > after`.
pub fn position_rmse_after(result: &RunResult, lap: usize, after: f64) -> f64 {
    let errs: Vec<f64> = result
        .records
        .iter()
        .filter(|r| r.lap == lap && r.time > after)
        .map(|r| r.estimate.position.distance(r.truth.position).powi(2))
        .collect();
    (errs.iter().sum::<f64>() / errs.len().max(1) as f64).sqrt()
}

/// Mean OSPA over the records of `lap` with `time > after`.
pub fn mean_ospa_after(result: &RunResult, lap: usize, after: f64) -> f64 {
    let v: Vec<f64> = result
        .records
        .iter()
        .filter(|r| r.lap == lap && r.time > after)
        .map(|r| r.ospa)
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Redetection delay of one map feature after a blockage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Redetection {
    pub feature: usize,
    /// Time the feature becomes visible again after the blockage.
    pub visible_again: f64,
    /// Time from `visible_again` to the first declared estimate within the
    /// radius; `None` if it never happens before the lap ends.
    pub delay: Option<f64>,
    /// `delay`, or the remaining lap time when censored.
    pub censored_delay: f64,
}

/// For every feature blocked during `[start, end]`, the time from its own
/// visibility return (at or after `end`) to the first declared estimate within
/// `radius` of its true position.
pub fn redetection_delays(
    result: &RunResult,
    truth: &GroundTruth,
    scenario: &Scenario,
    lap: usize,
    start: f64,
    end: f64,
    radius: f64,
) -> Vec<Redetection> {
    let recs: Vec<&StepRecord> = result.records.iter().filter(|r| r.lap == lap).collect();
    let last_time = recs.last().map_or(0.0, |r| r.time);
    let mut out = Vec::new();
    for (f, feature) in scenario.features.iter().enumerate() {
        let truth_pos = feature.position();
        let blocked = (0..truth.len()).any(|n| {
            let t = truth.time(n);
            t >= start - 1e-9 && t <= end + 1e-9 && !truth.visible[n][f]
        });
        if !blocked {
            continue;
        }
        let Some(back) = (0..truth.len()).find(|&n| truth.time(n) >= end - 1e-9 && truth.visible[n][f]) else {
            continue;
        };
        let t0 = truth.time(back);
        let hit = recs.iter().find(|r| {
            r.step >= back
                && r.features
                    .iter()
                    .any(|e| e.cell == feature.cell && e.position.distance(truth_pos) < radius)
        });
        let delay = hit.map(|r| r.time - t0);
        out.push(Redetection {
            feature: f,
            visible_again: t0,
            delay,
            censored_delay: delay.unwrap_or(last_time - t0),
        });
    }
    out
}
