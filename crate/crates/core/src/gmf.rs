//! Global map features: qualification, coverage regions, the persisted
//! repository, and the PHD filter that turns active entries into a birth prior.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Spherical-zone region of interest: the part of a ball of radius `radius`
/// around `center` with `|z − center.z| ≤ half_height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub center: [f64; 3],
    pub radius: f64,
    pub half_height: f64,
    /// Volume used for the uniform birth mass `λ_b·V`.
    pub volume: f64,
}

impl Default for Roi {
    fn default() -> Self {
        Self {
            center: [20.0, 25.0, 10.0],
            radius: 60.0,
            half_height: 30.0,
            volume: 6.7676e5,
        }
    }
}

impl Roi {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.radius > 0.0 && self.half_height > 0.0 && self.volume > 0.0) {
            return Err("roi radius, half_height and volume must be positive".into());
        }
        if self.half_height > self.radius {
            return Err("roi half_height exceeds radius".into());
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let c = Vec3::from(self.center);
        (p.z - c.z).abs() <= self.half_height && p.distance(c) <= self.radius
    }

    /// Geometric volume `2π(R² − H²/3)H` of the zone.
    pub fn shape_volume(&self) -> f64 {
        let (r, h) = (self.radius, self.half_height);
        2.0 * PI * (r * r - h * h / 3.0) * h
    }

    /// Uniform draw by rejection from the bounding box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let c = Vec3::from(self.center);
        loop {
            let p = Vec3::new(
                c.x + self.radius * (2.0 * rng.gen::<f64>() - 1.0),
                c.y + self.radius * (2.0 * rng.gen::<f64>() - 1.0),
                c.z + self.half_height * (2.0 * rng.gen::<f64>() - 1.0),
            );
            if self.contains(p) {
                return p;
            }
        }
    }
}

/// Mean and standard deviation of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gauss {
    pub mean: f64,
    pub std: f64,
}

impl Gauss {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        let r = (x - self.mean) / self.std;
        -0.5 * r * r - self.std.ln() - LN_SQRT_2PI
    }
}

/// Per-coordinate summary over `(x, y, z, u)`.
pub type FeatureSummary = [Gauss; 4];

/// One stored observation pose of a global map feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoveragePoint {
    /// Time-step index `n'` in `IS_g`.
    pub step: u64,
    /// Agent position at `n'`, an element of `CR_g`.
    pub agent: Vec3,
    pub summary: FeatureSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmfEntry {
    pub id: u64,
    pub cell: usize,
    /// Id of the potential feature the entry was built from.
    pub source: u64,
    pub coverage: Vec<CoveragePoint>,
}

/// Snapshot recorded while a potential feature is declared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSnapshot {
    pub step: u64,
    pub agent: Vec3,
    pub amplitude: Gauss,
}

/// What `qualify` needs to know about a potential feature.
#[derive(Debug, Clone, Copy)]
pub struct TrackSummary<'a> {
    pub id: u64,
    pub cell: usize,
    /// Number of steps the feature has been declared.
    pub lifespan: usize,
    pub position: [Gauss; 3],
    pub history: &'a [TrackSnapshot],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualifyCriteria {
    pub min_lifespan: usize,
    pub max_x_std: f64,
    /// Optional lower bound on the amplitude mean.
    pub min_amplitude: Option<f64>,
    /// Record a coverage point every this many declared steps.
    pub snapshot_stride: usize,
    /// Floor on stored standard deviations.
    pub min_std: f64,
}

impl Default for QualifyCriteria {
    fn default() -> Self {
        Self {
            min_lifespan: 130,
            max_x_std: 0.5,
            min_amplitude: None,
            snapshot_stride: 5,
            min_std: 0.05,
        }
    }
}

/// Builds a repository entry if the track qualifies. The returned entry has id 0;
/// [`GmfRepository::insert`] assigns the final id.
pub fn qualify(track: &TrackSummary<'_>, criteria: &QualifyCriteria) -> Option<GmfEntry> {
    if track.lifespan < criteria.min_lifespan || track.history.is_empty() {
        return None;
    }
    if !(track.position[0].std < criteria.max_x_std) {
        return None;
    }
    if let Some(floor) = criteria.min_amplitude {
        let last = track.history.last()?.amplitude.mean;
        if last < floor {
            return None;
        }
    }
    let coverage = track
        .history
        .iter()
        .map(|s| CoveragePoint {
            step: s.step,
            agent: s.agent,
            summary: floored_summary(&track.position, s.amplitude, criteria.min_std),
        })
        .collect();
    Some(GmfEntry {
        id: 0,
        cell: track.cell,
        source: track.id,
        coverage,
    })
}

pub fn floored_summary(position: &[Gauss; 3], amplitude: Gauss, min_std: f64) -> FeatureSummary {
    let f = |g: Gauss| Gauss::new(g.mean, g.std.max(min_std));
    [f(position[0]), f(position[1]), f(position[2]), f(amplitude)]
}

/// Index into `entry.coverage` of the stored pose nearest to `agent`, if it is
/// closer than `d_min`. Ties go to the earlier pose.
pub fn nearest_coverage_index(agent: Vec3, entry: &GmfEntry, d_min: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in entry.coverage.iter().enumerate() {
        let d = agent.distance(c.agent);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.filter(|(_, d)| *d < d_min).map(|(i, _)| i)
}

/// Weighted axis-aligned Gaussian over `(x, y, z, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub source: u64,
    pub weight: f64,
    pub dims: FeatureSummary,
}

impl GaussianComponent {
    pub fn ln_density(&self, q: [f64; 4]) -> f64 {
        (0..4).map(|v| self.dims[v].ln_pdf(q[v])).sum()
    }

    pub fn density(&self, q: [f64; 4]) -> f64 {
        self.ln_density(q).exp()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        let mut q = [0.0; 4];
        for (v, out) in q.iter_mut().enumerate() {
            let w: f64 = rng.sample(StandardNormal);
            *out = self.dims[v].mean + self.dims[v].std * w;
        }
        q
    }
}

/// `λ_{g,n}(q) = μ_g f_{g,n}(q)` for the coverage point `slot` of `entry`.
pub fn activation_intensity(entry: &GmfEntry, slot: usize, weight: f64) -> GaussianComponent {
    GaussianComponent {
        source: entry.id,
        weight,
        dims: entry.coverage[slot].summary,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhdConfig {
    /// Constant birth level `λ_b′` per m³ (amplitude marginal normalized).
    pub birth_intensity: f64,
    pub survival: f64,
    pub detection: f64,
    /// Upper end of the uniform amplitude support; the lower end is `√u_de`.
    pub amplitude_max: f64,
    /// Position drift std per step applied to Gaussian components.
    pub position_drift: f64,
    /// Amplitude drift std per step applied to Gaussian components.
    pub amplitude_drift: f64,
    /// Components lighter than this are dropped after each update.
    pub prune_weight: f64,
    /// Activation weight `μ_g`.
    pub activation_weight: f64,
    /// Activation radius `d_min`.
    pub activation_radius: f64,
}

impl Default for PhdConfig {
    fn default() -> Self {
        Self {
            birth_intensity: 1e-5,
            survival: 0.9,
            detection: 0.1,
            amplitude_max: 100.0,
            position_drift: 1e-2,
            amplitude_drift: 0.05,
            prune_weight: 1e-4,
            activation_weight: 0.5,
            activation_radius: 5.0,
        }
    }
}

/// Intensity of undetected features: a uniform part over the ROI, tracked by
/// its mass, plus Gaussian components from activated GMFs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhdIntensity {
    pub uniform_mass: f64,
    pub components: Vec<GaussianComponent>,
}

impl PhdIntensity {
    pub fn mass(&self) -> f64 {
        self.uniform_mass + self.components.iter().map(|c| c.weight).sum::<f64>()
    }
}

/// Prediction step: survival-scaled previous intensity, plus the constant birth
/// floor, plus one component per active GMF. Components from the same source
/// with the same mean are merged by moment matching.
pub fn phd_predict(
    prev: &PhdIntensity,
    roi: &Roi,
    active: &[GaussianComponent],
    cfg: &PhdConfig,
) -> PhdIntensity {
    let mut components: Vec<GaussianComponent> = prev
        .components
        .iter()
        .map(|c| {
            let mut c = *c;
            c.weight *= cfg.survival;
            for v in 0..3 {
                c.dims[v].std = c.dims[v].std.hypot(cfg.position_drift);
            }
            c.dims[3].std = c.dims[3].std.hypot(cfg.amplitude_drift * c.dims[3].mean.abs());
            c
        })
        .collect();
    let mut seen: Vec<u64> = Vec::new();
    for a in active {
        if seen.contains(&a.source) {
            continue;
        }
        seen.push(a.source);
        let same = components.iter_mut().find(|c| {
            c.source == a.source && (0..4).all(|v| c.dims[v].mean == a.dims[v].mean)
        });
        match same {
            Some(c) => {
                let total = c.weight + a.weight;
                for v in 0..4 {
                    let var = (c.weight * c.dims[v].std.powi(2) + a.weight * a.dims[v].std.powi(2)) / total;
                    c.dims[v].std = var.sqrt();
                }
                c.weight = total;
            }
            None => components.push(*a),
        }
    }
    PhdIntensity {
        uniform_mass: cfg.birth_intensity * roi.volume + cfg.survival * prev.uniform_mass,
        components,
    }
}

/// Update step: everything scaled by `1 − P_u,d`; light components pruned.
pub fn phd_update(predicted: &PhdIntensity, cfg: &PhdConfig) -> PhdIntensity {
    let keep = 1.0 - cfg.detection;
    PhdIntensity {
        uniform_mass: keep * predicted.uniform_mass,
        components: predicted
            .components
            .iter()
            .map(|c| GaussianComponent {
                weight: keep * c.weight,
                ..*c
            })
            .filter(|c| c.weight >= cfg.prune_weight)
            .collect(),
    }
}

/// New-feature prior `(μ_u, f_u)` with density evaluation and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct BirthPrior {
    pub mean_count: f64,
    roi: Roi,
    amplitude_range: (f64, f64),
    /// `P_u,d · uniform mass / (shape volume · amplitude width)`.
    uniform_level: f64,
    components: Vec<GaussianComponent>,
    /// Per component: `ln(P_u,d · weight) − Σ ln(√(2π) std)`, means, inverse stds.
    kernels: Vec<(f64, [f64; 4], [f64; 4])>,
    detection: f64,
    uniform_mass: f64,
}

/// `μ_u = P_u,d ∫ λ` and `f_u ∝ λ`. Returns `None` for zero mass.
pub fn birth_prior(
    intensity: &PhdIntensity,
    roi: &Roi,
    amplitude_floor: f64,
    cfg: &PhdConfig,
) -> Option<BirthPrior> {
    let mass = intensity.mass();
    if !(mass > 0.0) || cfg.detection <= 0.0 {
        return None;
    }
    let width = cfg.amplitude_max - amplitude_floor;
    let uniform_level = if width > 0.0 {
        cfg.detection * intensity.uniform_mass / (roi.shape_volume() * width)
    } else {
        0.0
    };
    Some(BirthPrior {
        mean_count: cfg.detection * mass,
        roi: *roi,
        amplitude_range: (amplitude_floor, cfg.amplitude_max),
        uniform_level,
        components: intensity.components.clone(),
        kernels: intensity
            .components
            .iter()
            .map(|c| {
                let ln_scale = (cfg.detection * c.weight).ln()
                    - c.dims.iter().map(|g| g.std.ln() + LN_SQRT_2PI).sum::<f64>();
                (ln_scale, c.dims.map(|g| g.mean), c.dims.map(|g| 1.0 / g.std))
            })
            .collect(),
        detection: cfg.detection,
        uniform_mass: intensity.uniform_mass,
    })
}

impl BirthPrior {
    /// `μ_u f_u(q)`.
    pub fn intensity(&self, q: [f64; 4]) -> f64 {
        let mut total = 0.0;
        let (lo, hi) = self.amplitude_range;
        if self.uniform_level > 0.0 && q[3] >= lo && q[3] <= hi && self.roi.contains(Vec3::new(q[0], q[1], q[2])) {
            total += self.uniform_level;
        }
        for (ln_scale, mean, inv_std) in &self.kernels {
            let mut r2 = 0.0;
            for v in 0..4 {
                let r = (q[v] - mean[v]) * inv_std[v];
                r2 += r * r;
            }
            total += (ln_scale - 0.5 * r2).exp();
        }
        total
    }

    /// Source of the component carrying the largest share of `intensity(q)`
    /// averaged over weighted points, if that share exceeds one half.
    pub fn dominant_source(&self, points: &[[f64; 4]], weights: &[f64]) -> Option<u64> {
        if self.kernels.is_empty() {
            return None;
        }
        let mut share = vec![0.0; self.kernels.len()];
        for (q, &w) in points.iter().zip(weights) {
            let total = self.intensity(*q);
            if !(total > 0.0) || w == 0.0 {
                continue;
            }
            for (g, (ln_scale, mean, inv_std)) in self.kernels.iter().enumerate() {
                let mut r2 = 0.0;
                for v in 0..4 {
                    let r = (q[v] - mean[v]) * inv_std[v];
                    r2 += r * r;
                }
                share[g] += w * (ln_scale - 0.5 * r2).exp() / total;
            }
        }
        let (g, best) = share
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
        (best > 0.5).then(|| self.components[g].source)
    }

    /// Normalized density `f_u(q)`.
    pub fn density(&self, q: [f64; 4]) -> f64 {
        self.intensity(q) / self.mean_count
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        let mass = self.uniform_mass + self.components.iter().map(|c| c.weight).sum::<f64>();
        let mut pick = rng.gen::<f64>() * mass;
        for c in &self.components {
            if pick < c.weight {
                return c.sample(rng);
            }
            pick -= c.weight;
        }
        let p = self.roi.sample(rng);
        let (lo, hi) = self.amplitude_range;
        [p.x, p.y, p.z, lo + (hi - lo) * rng.gen::<f64>()]
    }
}

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("repository i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a repository file")]
    BadMagic,
    #[error("unsupported repository version {0}")]
    Version(u32),
    #[error("corrupt repository file: {0}")]
    Corrupt(&'static str),
}

/// Qualified global map features, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GmfRepository {
    entries: Vec<GmfEntry>,
    next_id: u64,
}

const MAGIC: &[u8; 4] = b"GMFR";
pub const REPOSITORY_VERSION: u32 = 1;

impl GmfRepository {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            next_id: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GmfEntry] {
        &self.entries
    }

    /// Stores the entry under a fresh id and returns it.
    pub fn insert(&mut self, mut entry: GmfEntry) -> u64 {
        entry.id = self.next_id.max(1);
        self.next_id = entry.id + 1;
        let id = entry.id;
        self.entries.push(entry);
        id
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut GmfEntry> {
        self.entries.iter_mut().find(|e| e.id == id)
    }

    pub fn find_by_source(&self, source: u64) -> Option<&GmfEntry> {
        self.entries.iter().find(|e| e.source == source)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RepositoryError> {
        w.write_all(MAGIC)?;
        w.write_all(&REPOSITORY_VERSION.to_le_bytes())?;
        w.write_all(&self.next_id.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.id.to_le_bytes())?;
            w.write_all(&(e.cell as u64).to_le_bytes())?;
            w.write_all(&e.source.to_le_bytes())?;
            w.write_all(&(e.coverage.len() as u64).to_le_bytes())?;
            for c in &e.coverage {
                w.write_all(&c.step.to_le_bytes())?;
                for v in c.agent.to_array() {
                    w.write_all(&v.to_le_bytes())?;
                }
                for g in &c.summary {
                    w.write_all(&g.mean.to_le_bytes())?;
                    w.write_all(&g.std.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RepositoryError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(RepositoryError::BadMagic);
        }
        let mut v = [0u8; 4];
        read_exact(&mut r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != REPOSITORY_VERSION {
            return Err(RepositoryError::Version(version));
        }
        let next_id = read_u64(&mut r)?;
        let count = read_u64(&mut r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let id = read_u64(&mut r)?;
            let cell = read_u64(&mut r)? as usize;
            let source = read_u64(&mut r)?;
            let points = read_u64(&mut r)?;
            let mut coverage = Vec::new();
            for _ in 0..points {
                let step = read_u64(&mut r)?;
                let agent = Vec3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
                let mut summary = [Gauss::new(0.0, 0.0); 4];
                for g in summary.iter_mut() {
                    *g = Gauss::new(read_f64(&mut r)?, read_f64(&mut r)?);
                    if !(g.std > 0.0) {
                        return Err(RepositoryError::Corrupt("non-positive standard deviation"));
                    }
                }
                coverage.push(CoveragePoint { step, agent, summary });
            }
            if coverage.is_empty() {
                return Err(RepositoryError::Corrupt("entry without coverage"));
            }
            entries.push(GmfEntry {
                id,
                cell,
                source,
                coverage,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RepositoryError::Corrupt("trailing bytes"));
        }
        Ok(Self { entries, next_id })
    }

    pub fn save(&self, path: &Path) -> Result<(), RepositoryError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, RepositoryError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), RepositoryError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => RepositoryError::Corrupt("truncated file"),
        _ => RepositoryError::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, RepositoryError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, RepositoryError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn history(n: usize) -> Vec<TrackSnapshot> {
        (0..n)
            .map(|i| TrackSnapshot {
                step: 5 * i as u64,
                agent: Vec3::new(i as f64, 0.0, 0.0),
                amplitude: Gauss::new(8.0, 0.4),
            })
            .collect()
    }

    fn track(h: &[TrackSnapshot], lifespan: usize, sx: f64) -> TrackSummary<'_> {
        TrackSummary {
            id: 7,
            cell: 0,
            lifespan,
            position: [Gauss::new(1.0, sx), Gauss::new(2.0, 0.3), Gauss::new(3.0, 0.3)],
            history: h,
        }
    }

    #[test]
    fn qualification_thresholds() {
        let h = history(26);
        let c = QualifyCriteria::default();
        assert!(qualify(&track(&h, 131, 0.4), &c).is_some());
        assert!(qualify(&track(&h, 50, 0.4), &c).is_none());
        assert!(qualify(&track(&h, 131, 0.6), &c).is_none());
        let e = qualify(&track(&h, 131, 0.4), &c).unwrap();
        assert_eq!(e.coverage.len(), 26);
        assert_eq!(e.source, 7);
    }

    #[test]
    fn coverage_lookup() {
        let h = history(3);
        let e = qualify(&track(&h, 200, 0.1), &QualifyCriteria::default()).unwrap();
        assert_eq!(nearest_coverage_index(Vec3::new(2.0, 2.0, 0.0), &e, 5.0), Some(2));
        assert_eq!(nearest_coverage_index(Vec3::new(2.0, 7.0, 0.0), &e, 5.0), None);
        // equidistant from poses 0 and 1
        assert_eq!(nearest_coverage_index(Vec3::new(0.5, 1.0, 0.0), &e, 5.0), Some(0));
    }

    #[test]
    fn component_peak_density() {
        let c = GaussianComponent {
            source: 1,
            weight: 1.0,
            dims: [Gauss::new(0.0, 0.5), Gauss::new(1.0, 2.0), Gauss::new(0.0, 1.0), Gauss::new(5.0, 0.3)],
        };
        let want: f64 = c.dims.iter().map(|g| 1.0 / ((2.0 * PI).sqrt() * g.std)).product();
        assert!((c.density([0.0, 1.0, 0.0, 5.0]) - want).abs() < 1e-12 * want);
    }

    #[test]
    fn update_extremes() {
        let cfg = PhdConfig::default();
        let i = PhdIntensity {
            uniform_mass: 1.0,
            components: vec![],
        };
        assert!((phd_update(&i, &cfg).mass() - 0.9).abs() < 1e-15);
        let zero = PhdConfig { detection: 0.0, ..cfg };
        assert_eq!(phd_update(&i, &zero), i);
        let one = PhdConfig { detection: 1.0, ..cfg };
        assert_eq!(phd_update(&i, &one).mass(), 0.0);
    }

    #[test]
    fn roi_shape_volume() {
        let roi = Roi::default();
        assert!((roi.shape_volume() - 622_035.345_4).abs() < 1e-3);
    }

    #[test]
    fn duplicate_activation_adds_one_component() {
        let e = GmfEntry {
            id: 4,
            cell: 0,
            source: 1,
            coverage: vec![CoveragePoint {
                step: 0,
                agent: Vec3::ZERO,
                summary: [Gauss::new(1.0, 0.2); 4],
            }],
        };
        let a = activation_intensity(&e, 0, 0.5);
        let p = phd_predict(&PhdIntensity::default(), &Roi::default(), &[a, a], &PhdConfig::default());
        assert_eq!(p.components.len(), 1);
        assert_eq!(p.components[0].weight, 0.5);
    }

    #[test]
    fn sampler_hits_roi() {
        let roi = Roi::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(roi.contains(roi.sample(&mut rng)));
        }
    }

    #[test]
    fn corrupt_repository_is_rejected() {
        assert!(matches!(GmfRepository::read_from(&b"XXXX"[..]), Err(RepositoryError::BadMagic)));
        let mut buf = Vec::new();
        GmfRepository::new().write_to(&mut buf).unwrap();
        buf[4] = 9;
        assert!(matches!(GmfRepository::read_from(&buf[..]), Err(RepositoryError::Version(9))));
        let mut buf = Vec::new();
        GmfRepository::new().write_to(&mut buf).unwrap();
        buf.truncate(10);
        assert!(matches!(GmfRepository::read_from(&buf[..]), Err(RepositoryError::Corrupt(_))));
    }
}
