//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::*;
use mpslam::association::{run_loopy_da, BpConfig};
use mpslam::experiment::{
    mean_ospa_after, position_rmse_after, redetection_delays, run_batch, worker_count, ExperimentConfig, RunResult,
    RunSpec, Setup, CONFIG_SCHEMA,
};
use mpslam::gmf::{
    birth_prior, phd_predict, phd_update, CoveragePoint, Gauss, GmfEntry, GmfRepository, PhdConfig, PhdIntensity, Roi,
};
use mpslam::measurement::NoiseProfile;
use mpslam::metrics::OspaConfig;
use mpslam::output::write_results;
use mpslam::slam::StepConfig;
use mpslam::synthetic::{GroundTruth, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const PARTICLES: usize = 30_000;
const SNRS: [f64; 3] = [33.5, 37.5, 41.5];
const ORDERING_SNR: f64 = 41.5;
const REDETECTION_SNR: f64 = 33.5;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn composite_simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn detection_model() -> Outcome {
    let p = NoiseProfile::default();
    let pd0_err = (p.detection_probability(0.0) - (-p.detection_threshold).exp()).abs();
    let floor = p.amplitude_floor();
    let mut worst: f64 = 0.0;
    for u in [0.0, 0.5, 2.0, 4.0, 10.0, 30.0, 100.0, 400.0] {
        let s = p.amplitude_std(u);
        let hi = floor.max(u) + 40.0 * s;
        let mass = composite_simpson(|z| p.amplitude_likelihood(z, u).unwrap_or(0.0), floor * (1.0 + 1e-15), hi, 200_000);
        worst = worst.max((mass - 1.0).abs());
    }
    let rayleigh = composite_simpson(|z| p.ln_false_alarm_amplitude(z).exp(), floor, floor + 40.0, 200_000);
    worst = worst.max((rayleigh - 1.0).abs());
    Outcome {
        name: "detection-model exactness",
        pass: pd0_err < 1e-12 && worst < 1e-6,
        detail: format!("|P_d(0) - e^-u_de| = {pd0_err:.1e}, worst normalization error {worst:.1e}"),
    }
}

fn association_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut sum): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let (k, m) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let input = random_instance(&mut rng, k, m, false);
        let bp = run_loopy_da(&input, &BpConfig::default()).expect("valid instance");
        let (legacy, meas) = enumerate_marginals(&input);
        let mut inst: f64 = 0.0;
        for (p, q) in bp.legacy.iter().zip(&legacy).chain(bp.measurement.iter().zip(&meas)) {
            inst = inst.max(total_variation(p, q));
        }
        worst = worst.max(inst);
        sum += inst;
    }
    let mut tree_err: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = BpConfig { tolerance: 1e-14, max_iters: 1000, damping: None };
    for _ in 0..200 {
        let (k, m) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let input = random_instance(&mut rng, k, m, true);
        let bp = run_loopy_da(&input, &cfg).expect("valid instance");
        let (legacy, meas) = enumerate_marginals(&input);
        for (p, q) in bp.legacy.iter().zip(&legacy).chain(bp.measurement.iter().zip(&meas)) {
            for (a, b) in p.iter().zip(q) {
                tree_err = tree_err.max((a - b).abs());
            }
        }
    }
    Outcome {
        name: "DA oracle equivalence",
        pass: worst <= 0.05 && tree_err <= 1e-10,
        detail: format!(
            "loopy: worst TV {worst:.4}, mean TV {:.4} over 200 instances; trees: max error {tree_err:.1e}",
            sum / 200.0
        ),
    }
}

fn grid_oracle() -> Outcome {
    let toy = GridToy::default();
    let z = toy_measurements(&toy, 3);
    let grid = grid_posterior_means(&toy, &z, 0.01);
    let pf = particle_toy_estimates(&toy, &z, PARTICLES, 5);
    let worst = grid
        .iter()
        .zip(&pf)
        .map(|(g, p)| g.distance(p.position))
        .fold(0.0, f64::max);
    Outcome {
        name: "grid-filter oracle",
        pass: worst < 0.1 && grid.len() == 20,
        detail: format!("{} steps, worst gap {worst:.4} m", grid.len()),
    }
}

fn phd_mass() -> Outcome {
    let cfg = PhdConfig::default();
    let roi = Roi::default();
    let mut phd = PhdIntensity::default();
    let mut closed = 0.0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        phd = phd_update(&phd_predict(&phd, &roi, &[], &cfg), &cfg);
        closed = (1.0 - cfg.detection) * (cfg.birth_intensity * roi.volume + cfg.survival * closed);
        worst = worst.max((phd.mass() - closed).abs() / closed);
    }
    let first = phd_predict(&PhdIntensity::default(), &roi, &[], &cfg);
    let mu = birth_prior(&first, &roi, NoiseProfile::default().amplitude_floor(), &cfg)
        .map_or(f64::NAN, |b| b.mean_count);
    Outcome {
        name: "PHD mass recursion",
        pass: worst < 1e-9 && (mu - 0.6768).abs() <= 1e-4,
        detail: format!("max relative deviation {worst:.1e} over 100 steps, first-step mu_u = {mu:.6}"),
    }
}

fn repository_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut repo = GmfRepository::new();
    for e in 0..1000u64 {
        let coverage = (0..20)
            .map(|k| CoveragePoint {
                step: k * 5,
                agent: mpslam::geometry::Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                summary: [(); 4].map(|_| Gauss::new(rng.gen::<f64>() * 50.0, rng.gen::<f64>() + 0.05)),
            })
            .collect();
        repo.insert(GmfEntry { id: 0, cell: (e % 3) as usize, source: e + 1, coverage });
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("repo.bin");
    let start = Instant::now();
    let ok = repo.save(&path).is_ok();
    let back = GmfRepository::load(&path);
    let elapsed = start.elapsed().as_secs_f64();
    let lossless = ok && back.as_ref().is_ok_and(|b| *b == repo);
    Outcome {
        name: "repository round-trip",
        pass: lossless && elapsed < 1.0,
        detail: format!("1000 entries, lossless = {lossless}, save+load {elapsed:.3} s"),
    }
}

fn csv_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(dir).expect("under root").display().to_string();
                out.insert(rel, std::fs::read(&p).expect("readable csv"));
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let scenario = Scenario::fig2_default();
    let cfg = ExperimentConfig::from_toml_str(&format!(
        "schema = {CONFIG_SCHEMA}\nscenario = \"fig2-default\"\nseeds = [1, 2]\nparticles = 1000\nsnr_db = [41.5]\n"
    ))
    .expect("valid config");
    let specs = cfg.runs();
    let max_workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(specs.len());
    let mut bundles = Vec::new();
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().expect("temp dir")).collect();
    for (dir, workers) in dirs.iter().zip([1, max_workers]) {
        let results = run_batch(&scenario, &cfg.filter, &cfg.ospa, &specs, workers).expect("runs");
        write_results(dir.path(), &cfg, &scenario, &results).expect("written");
        bundles.push(csv_bytes(dir.path()));
    }
    let same = bundles[0] == bundles[1] && !bundles[0].is_empty();
    Outcome {
        name: "determinism",
        pass: same,
        detail: format!(
            "{} CSV files from {} runs, 1 vs {max_workers} workers, byte-identical = {same}",
            bundles[0].len(),
            specs.len()
        ),
    }
}

struct Study {
    results: Vec<RunResult>,
    cpu_seconds_41: f64,
    wall_seconds: f64,
    workers: usize,
}

fn study() -> Study {
    let mut specs = Vec::new();
    for seed in 1..=SEEDS {
        specs.push(RunSpec { setup: Setup::Proprioception, snr_db: ORDERING_SNR, seed, particles: PARTICLES, laps: 1 });
        for &snr_db in &SNRS {
            for setup in [Setup::Slam, Setup::SlamGmf] {
                specs.push(RunSpec { setup, snr_db, seed, particles: PARTICLES, laps: 1 });
            }
        }
    }
    let workers = worker_count();
    let start = Instant::now();
    let results = run_batch(&Scenario::fig2_default(), &StepConfig::default(), &OspaConfig::default(), &specs, workers)
        .expect("study runs");
    let cpu_seconds_41 = results
        .iter()
        .filter(|r| r.spec.snr_db == ORDERING_SNR)
        .map(|r| r.wall_seconds)
        .sum();
    Study { results, cpu_seconds_41, wall_seconds: start.elapsed().as_secs_f64(), workers }
}

fn select(s: &Study, setup: Setup, snr: f64) -> impl Iterator<Item = &RunResult> {
    s.results.iter().filter(move |r| r.spec.setup == setup && r.spec.snr_db == snr)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn blockage_end() -> f64 {
    Scenario::fig2_default().blockage.expect("fig2 has a blockage").end
}

fn ordering(s: &Study) -> Outcome {
    let end = blockage_end();
    let rmse = |setup| mean(select(s, setup, ORDERING_SNR).map(|r| position_rmse_after(r, 0, end)));
    let (p, sl, g) = (rmse(Setup::Proprioception), rmse(Setup::Slam), rmse(Setup::SlamGmf));
    // runs are independent, so an 8-worker pool divides the summed run time
    let eight_core_minutes = s.cpu_seconds_41 / 8.0 / 60.0;
    let pass = g < 0.8 * sl && sl < 0.8 * p && eight_core_minutes < 15.0;
    Outcome {
        name: "ordering reproduction",
        pass,
        detail: format!(
            "post-blockage RMSE slam+gmf {g:.3} m, slam {sl:.3} m, proprioception {p:.3} m; \
             gaps {:.0}% / {:.0}%; 41.5 dB runs take {:.1} CPU-min (8-core estimate {eight_core_minutes:.1} min)",
            100.0 * (1.0 - g / sl),
            100.0 * (1.0 - sl / p),
            s.cpu_seconds_41 / 60.0
        ),
    }
}

fn mospa_monotonicity(s: &Study) -> Outcome {
    let end = blockage_end();
    let mut pass = true;
    let mut parts = Vec::new();
    for setup in [Setup::Slam, Setup::SlamGmf] {
        let v: Vec<f64> = SNRS
            .iter()
            .map(|&snr| mean(select(s, setup, snr).map(|r| mean_ospa_after(r, 0, end))))
            .collect();
        pass &= v.windows(2).all(|w| w[1] < w[0]);
        parts.push(format!("{setup}: {:.3} > {:.3} > {:.3}", v[0], v[1], v[2]));
    }
    Outcome { name: "MOSPA monotonicity", pass, detail: parts.join("; ") }
}

fn redetection(s: &Study) -> Outcome {
    let mut scenario = Scenario::fig2_default();
    scenario.radio.snr_1m_db = REDETECTION_SNR;
    let truth = GroundTruth::new(&scenario).expect("valid scenario");
    let b = scenario.blockage.expect("fig2 has a blockage");
    let delay = |setup| {
        let mut all = Vec::new();
        let mut censored = 0;
        for r in select(s, setup, REDETECTION_SNR) {
            for d in redetection_delays(r, &truth, &scenario, 0, b.start, b.end, 3.0) {
                censored += usize::from(d.delay.is_none());
                all.push(d.censored_delay);
            }
        }
        (mean(all.into_iter()), censored)
    };
    let ((g, gc), (sl, sc)) = (delay(Setup::SlamGmf), delay(Setup::Slam));
    Outcome {
        name: "GMF redetection speedup",
        pass: sl > 0.0 && 2.0 * g <= sl,
        detail: format!(
            "mean delay at {REDETECTION_SNR} dB: slam+gmf {g:.2} s ({gc} censored), slam {sl:.2} s ({sc} censored), ratio {:.2}",
            sl / g
        ),
    }
}

fn main() {
    let mut outcomes = vec![
        detection_model(),
        association_oracle(),
        grid_oracle(),
        phd_mass(),
        determinism(),
        repository_round_trip(),
    ];
    let s = study();
    eprintln!(
        "study: {} runs on {} workers in {:.1} min",
        s.results.len(),
        s.workers,
        s.wall_seconds / 60.0
    );
    outcomes.insert(0, redetection(&s));
    outcomes.insert(0, mospa_monotonicity(&s));
    outcomes.insert(0, ordering(&s));
    let mut failed = 0;
    for o in &outcomes {
        println!("acceptance {} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
