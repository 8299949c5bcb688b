//! On-disk result bundle: per-run CSVs, repository and manifest, plus the
//! aggregate tables produced by `summarize`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{RunResult, Setup};
use crate::geometry::{wrap_angle, Vec3};
use crate::metrics::{cumulative_frequency, rmse_series, MetricsError, OspaConfig};
use crate::slam::StepConfig;

/// Version written to the first line of every CSV.
pub const CSV_SCHEMA: u32 = 1;
pub const MANIFEST_SCHEMA: u32 = 1;

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const FEATURES_CSV: &str = "features.csv";
pub const OSPA_CSV: &str = "ospa.csv";
pub const REPOSITORY_FILE: &str = "gmf.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const SUMMARY_CSV: &str = "summary.csv";
pub const RMSE_TIME_CSV: &str = "rmse_time.csv";
pub const MOSPA_TIME_CSV: &str = "mospa_time.csv";
pub const CDF_CSV: &str = "cdf.csv";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: unsupported schema line `{line}`, expected `# schema={CSV_SCHEMA}`")]
    Schema { path: PathBuf, line: String },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("repository: {0}")]
    Repository(#[from] crate::gmf::RepositoryError),
    #[error("no result directories found under {0}")]
    NoResults(PathBuf),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv { path: path.to_path_buf(), source }
}

fn malformed(path: &Path, message: impl Into<String>) -> OutputError {
    OutputError::Malformed { path: path.to_path_buf(), message: message.into() }
}

/// Writes `rows` under a schema line and `header`.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# schema={CSV_SCHEMA}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// A CSV table read back with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize, OutputError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(&self.path, format!("missing column `{name}`")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64, OutputError> {
        self.rows[row][col]
            .parse()
            .map_err(|_| malformed(&self.path, format!("row {}: `{}` is not a number", row + 1, self.rows[row][col])))
    }

    pub fn usize_at(&self, row: usize, col: usize) -> Result<usize, OutputError> {
        self.rows[row][col]
            .parse()
            .map_err(|_| malformed(&self.path, format!("row {}: `{}` is not an integer", row + 1, self.rows[row][col])))
    }
}

/// Reads a CSV written by [`write_csv`], rejecting other schema versions.
pub fn read_csv(path: &Path) -> Result<Table, OutputError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(path))?;
    let line = first.trim_end();
    if line != format!("# schema={CSV_SCHEMA}") {
        return Err(OutputError::Schema { path: path.to_path_buf(), line: line.to_string() });
    }
    let mut rest = String::new();
    reader.read_to_string(&mut rest).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err(path))?.iter().map(String::from).collect());
    }
    Ok(Table { path: path.to_path_buf(), header, rows })
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub const TRAJECTORY_HEADER: [&str; 14] = [
    "lap", "step", "t", "true_x", "true_y", "true_z", "true_heading", "x", "y", "z", "heading", "speed",
    "position_error", "heading_error",
];
pub const FEATURES_HEADER: [&str; 14] = [
    "lap", "step", "t", "id", "cell", "x", "y", "z", "std_x", "std_y", "std_z", "u", "u_std", "p_exist",
];
pub const OSPA_HEADER: [&str; 4] = ["lap", "step", "t", "ospa"];

pub fn trajectory_rows(result: &RunResult) -> Vec<Vec<String>> {
    result
        .records
        .iter()
        .map(|r| {
            let t = r.truth.position;
            let e = r.estimate.position;
            vec![
                r.lap.to_string(),
                r.step.to_string(),
                num(r.time),
                num(t.x),
                num(t.y),
                num(t.z),
                num(r.truth.heading),
                num(e.x),
                num(e.y),
                num(e.z),
                num(r.estimate.heading),
                num(r.estimate.speed),
                num(e.distance(t)),
                num(wrap_angle(r.estimate.heading - r.truth.heading).abs()),
            ]
        })
        .collect()
}

pub fn feature_rows(result: &RunResult) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in &result.records {
        for f in &r.features {
            rows.push(vec![
                r.lap.to_string(),
                r.step.to_string(),
                num(r.time),
                f.id.to_string(),
                f.cell.to_string(),
                num(f.position.x),
                num(f.position.y),
                num(f.position.z),
                num(f.position_std[0]),
                num(f.position_std[1]),
                num(f.position_std[2]),
                num(f.amplitude),
                num(f.amplitude_std),
                num(f.existence),
            ]);
        }
    }
    rows
}

pub fn ospa_rows(result: &RunResult) -> Vec<Vec<String>> {
    result
        .records
        .iter()
        .map(|r| vec![r.lap.to_string(), r.step.to_string(), num(r.time), num(r.ospa)])
        .collect()
}

/// Everything needed to regenerate a run from its config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub setup: Setup,
    pub snr_db: f64,
    pub seed: u64,
    pub particles: usize,
    pub laps: usize,
    pub scenario: String,
    /// Full scenario file contents.
    pub scenario_toml: String,
    pub filter: StepConfig,
    pub ospa: OspaConfig,
    /// Post-blockage windows start here; `None` without a blockage.
    pub blockage_end: Option<f64>,
    pub commit: String,
    pub wall_seconds: f64,
    pub association_failures: usize,
}

/// Current git commit, or `"unknown"` outside a repository.
pub fn commit_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Writes one run's bundle into `dir`.
pub fn write_run(dir: &Path, result: &RunResult, manifest: &Manifest) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(&dir.join(TRAJECTORY_CSV), &TRAJECTORY_HEADER, &trajectory_rows(result))?;
    write_csv(&dir.join(FEATURES_CSV), &FEATURES_HEADER, &feature_rows(result))?;
    write_csv(&dir.join(OSPA_CSV), &OSPA_HEADER, &ospa_rows(result))?;
    result.repository.save(&dir.join(REPOSITORY_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, OutputError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| malformed(&path, e.to_string()))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(malformed(&path, format!("unsupported manifest schema {}", m.schema)));
    }
    Ok(m)
}

/// Run directories (those holding a manifest) under each root, sorted.
pub fn find_runs(roots: &[PathBuf]) -> Result<Vec<PathBuf>, OutputError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), OutputError> {
        if dir.join(MANIFEST_FILE).is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let p = entry.map_err(io_err(dir))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for r in roots {
        walk(r, &mut out)?;
    }
    out.sort();
    Ok(out)
}

/// Per-step series of one run read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub manifest: Manifest,
    /// `(lap, step, t)` per row.
    pub index: Vec<(usize, usize, f64)>,
    pub estimate: Vec<(Vec3, f64)>,
    pub truth: Vec<(Vec3, f64)>,
    pub ospa: Vec<f64>,
}

impl RunSeries {
    pub fn load(dir: &Path) -> Result<Self, OutputError> {
        let manifest = read_manifest(dir)?;
        let traj = read_csv(&dir.join(TRAJECTORY_CSV))?;
        let ospa_t = read_csv(&dir.join(OSPA_CSV))?;
        if traj.rows.len() != ospa_t.rows.len() {
            return Err(malformed(&ospa_t.path, "row count differs from trajectory"));
        }
        let c = |n| traj.column(n);
        let (lap, step, t) = (c("lap")?, c("step")?, c("t")?);
        let (tx, ty, tz, th) = (c("true_x")?, c("true_y")?, c("true_z")?, c("true_heading")?);
        let (x, y, z, h) = (c("x")?, c("y")?, c("z")?, c("heading")?);
        let oc = ospa_t.column("ospa")?;
        let mut s = RunSeries { manifest, index: Vec::new(), estimate: Vec::new(), truth: Vec::new(), ospa: Vec::new() };
        for r in 0..traj.rows.len() {
            s.index.push((traj.usize_at(r, lap)?, traj.usize_at(r, step)?, traj.f64_at(r, t)?));
            s.truth.push((
                Vec3::new(traj.f64_at(r, tx)?, traj.f64_at(r, ty)?, traj.f64_at(r, tz)?),
                traj.f64_at(r, th)?,
            ));
            s.estimate.push((
                Vec3::new(traj.f64_at(r, x)?, traj.f64_at(r, y)?, traj.f64_at(r, z)?),
                traj.f64_at(r, h)?,
            ));
            s.ospa.push(ospa_t.f64_at(r, oc)?);
        }
        Ok(s)
    }

    fn post_blockage(&self) -> impl Iterator<Item = usize> + '_ {
        let after = self.manifest.blockage_end.unwrap_or(f64::NEG_INFINITY);
        (0..self.index.len()).filter(move |&r| self.index[r].2 > after)
    }

    /// RMSE over all steps of the run: `(position, heading)`.
    pub fn rmse(&self) -> (f64, f64) {
        rms_pair(self, 0..self.index.len())
    }

    pub fn post_blockage_rmse(&self) -> f64 {
        rms_pair(self, self.post_blockage()).0
    }

    pub fn post_blockage_mospa(&self) -> f64 {
        let v: Vec<f64> = self.post_blockage().map(|r| self.ospa[r]).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

fn rms_pair(s: &RunSeries, rows: impl Iterator<Item = usize>) -> (f64, f64) {
    let (mut p, mut h, mut n) = (0.0, 0.0, 0usize);
    for r in rows {
        p += s.estimate[r].0.distance(s.truth[r].0).powi(2);
        h += wrap_angle(s.estimate[r].1 - s.truth[r].1).powi(2);
        n += 1;
    }
    let n = n.max(1) as f64;
    ((p / n).sqrt(), (h / n).sqrt())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates every run found under `roots` into the summary tables in `out`.
/// Returns the table paths.
pub fn summarize(roots: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, OutputError> {
    let dirs = find_runs(roots)?;
    if dirs.is_empty() {
        return Err(OutputError::NoResults(roots.first().cloned().unwrap_or_default()));
    }
    let mut groups: BTreeMap<(Setup, u64), Vec<RunSeries>> = BTreeMap::new();
    for d in &dirs {
        let s = RunSeries::load(d)?;
        groups.entry((s.manifest.setup, s.manifest.snr_db.to_bits())).or_default().push(s);
    }
    fs::create_dir_all(out).map_err(io_err(out))?;

    let mut summary = Vec::new();
    let mut rmse_time = Vec::new();
    let mut mospa_time = Vec::new();
    let mut cdf = Vec::new();
    for ((setup, snr_bits), runs) in &groups {
        let snr = num(f64::from_bits(*snr_bits));
        let dir0 = dirs.first().expect("non-empty");
        let first = &runs[0];
        if runs.iter().any(|r| r.index != first.index) {
            return Err(malformed(dir0, format!("runs of {setup} at {snr} dB have different step grids")));
        }
        let per_run: Vec<(f64, f64)> = runs.iter().map(RunSeries::rmse).collect();
        summary.push(vec![
            setup.label().to_string(),
            snr.clone(),
            runs.len().to_string(),
            num(mean(&per_run.iter().map(|p| p.0).collect::<Vec<_>>())),
            num(mean(&per_run.iter().map(|p| p.1.to_degrees()).collect::<Vec<_>>())),
            num(mean(&runs.iter().map(RunSeries::post_blockage_rmse).collect::<Vec<_>>())),
            num(mean(&runs.iter().map(RunSeries::post_blockage_mospa).collect::<Vec<_>>())),
        ]);

        let est: Vec<_> = runs.iter().map(|r| r.estimate.clone()).collect();
        let tru: Vec<_> = runs.iter().map(|r| r.truth.clone()).collect();
        let (pos, head) = rmse_series(&est, &tru)?;
        for (r, &(lap, step, t)) in first.index.iter().enumerate() {
            let base = vec![setup.label().to_string(), snr.clone(), lap.to_string(), step.to_string(), num(t)];
            let mut row = base.clone();
            row.extend([num(pos[r]), num(head[r].to_degrees())]);
            rmse_time.push(row);
            let mut row = base;
            row.push(num(mean(&runs.iter().map(|s| s.ospa[r]).collect::<Vec<_>>())));
            mospa_time.push(row);
        }

        let mut pos_err = Vec::new();
        let mut head_err = Vec::new();
        for s in runs {
            for r in 0..s.index.len() {
                pos_err.push(s.estimate[r].0.distance(s.truth[r].0));
                head_err.push(wrap_angle(s.estimate[r].1 - s.truth[r].1).abs().to_degrees());
            }
        }
        for (quantity, values) in [("position", pos_err), ("heading_deg", head_err)] {
            for (v, f) in cumulative_frequency(&values)? {
                cdf.push(vec![setup.label().to_string(), snr.clone(), quantity.to_string(), num(v), num(f)]);
            }
        }
    }

    let tables = [
        (
            SUMMARY_CSV,
            vec![
                "setup", "snr_db", "runs", "position_rmse", "heading_rmse_deg", "post_blockage_position_rmse",
                "post_blockage_mospa",
            ],
            summary,
        ),
        (RMSE_TIME_CSV, vec!["setup", "snr_db", "lap", "step", "t", "position_rmse", "heading_rmse_deg"], rmse_time),
        (MOSPA_TIME_CSV, vec!["setup", "snr_db", "lap", "step", "t", "mospa"], mospa_time),
        (CDF_CSV, vec!["setup", "snr_db", "quantity", "value", "fraction"], cdf),
    ];
    let mut paths = Vec::new();
    for (name, header, rows) in tables {
        let p = out.join(name);
        write_csv(&p, &header, &rows)?;
        paths.push(p);
    }
    Ok(paths)
}

pub const REPOSITORY_HEADER: [&str; 16] = [
    "id", "cell", "source", "point", "step", "agent_x", "agent_y", "agent_z", "x", "x_std", "y", "y_std", "z",
    "z_std", "u", "u_std",
];

/// One row per coverage point of every repository entry.
pub fn repository_rows(repo: &crate::gmf::GmfRepository) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for e in repo.entries() {
        for (k, c) in e.coverage.iter().enumerate() {
            let mut row = vec![
                e.id.to_string(),
                e.cell.to_string(),
                e.source.to_string(),
                k.to_string(),
                c.step.to_string(),
                num(c.agent.x),
                num(c.agent.y),
                num(c.agent.z),
            ];
            for g in &c.summary {
                row.push(num(g.mean));
                row.push(num(g.std));
            }
            rows.push(row);
        }
    }
    rows
}

/// Writes [`repository_rows`] as CSV to any writer.
pub fn dump_repository<W: Write>(repo: &crate::gmf::GmfRepository, out: W) -> Result<(), OutputError> {
    let path = PathBuf::from("<output>");
    let mut out = out;
    writeln!(out, "# schema={CSV_SCHEMA}").map_err(io_err(&path))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPOSITORY_HEADER).map_err(csv_err(&path))?;
    for r in repository_rows(repo) {
        w.write_record(&r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

/// Writes every result into `<out>/<setup>/snr<snr>/seed<seed>/`.
pub fn write_results(
    out: &Path,
    config: &crate::experiment::ExperimentConfig,
    scenario: &crate::synthetic::Scenario,
    results: &[RunResult],
) -> Result<Vec<PathBuf>, OutputError> {
    let commit = commit_hash();
    let scenario_toml = scenario.to_toml_string();
    let mut dirs = Vec::new();
    for r in results {
        let dir = out.join(r.spec.dir());
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA,
            setup: r.spec.setup,
            snr_db: r.spec.snr_db,
            seed: r.spec.seed,
            particles: r.spec.particles,
            laps: r.spec.laps,
            scenario: scenario.name.clone(),
            scenario_toml: scenario_toml.clone(),
            filter: config.filter,
            ospa: config.ospa,
            blockage_end: scenario.blockage.map(|b| b.end),
            commit: commit.clone(),
            wall_seconds: r.wall_seconds,
            association_failures: r.association_failures,
        };
        write_run(&dir, r, &manifest)?;
        dirs.push(dir);
    }
    Ok(dirs)
}
