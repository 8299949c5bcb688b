//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use mpslam::association::AssociationInput;
use mpslam::geometry::{wrap_angle, Vec3};
use mpslam::gmf::Roi;
use mpslam::measurement::{Measurement, NoiseProfile};
use mpslam::slam::{AgentPrior, PoseEstimate, Proprio, SlamFilter, StepConfig};
use mpslam::synthetic::CellScan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact association marginals by enumerating every consistent joint event.
/// Returns `(legacy[k][a], measurement[m][b])` with the same layout as the BP output.
pub fn enumerate_marginals(input: &AssociationInput) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k_n = input.miss.len();
    let m_n = input.unassigned.len();
    let mut legacy = vec![vec![0.0; m_n + 1]; k_n];
    let mut meas = vec![vec![0.0; k_n + 1]; m_n];
    let mut a = vec![0usize; k_n];
    let mut total = 0.0;
    loop {
        let mut used = vec![usize::MAX; m_n];
        let mut ok = true;
        for (k, &ak) in a.iter().enumerate() {
            if ak > 0 {
                if used[ak - 1] != usize::MAX {
                    ok = false;
                    break;
                }
                used[ak - 1] = k;
            }
        }
        if ok {
            let mut w = 1.0;
            for (k, &ak) in a.iter().enumerate() {
                w *= if ak == 0 { input.miss[k] } else { input.pair[k][ak - 1] };
            }
            for (m, &u) in used.iter().enumerate() {
                if u == usize::MAX {
                    w *= input.unassigned[m];
                }
            }
            total += w;
            for (k, &ak) in a.iter().enumerate() {
                legacy[k][ak] += w;
            }
            for (m, &u) in used.iter().enumerate() {
                meas[m][if u == usize::MAX { 0 } else { u + 1 }] += w;
            }
        }
        // odometer increment over {0..=M}^K
        let mut i = 0;
        while i < k_n {
            a[i] += 1;
            if a[i] <= m_n {
                break;
            }
            a[i] = 0;
            i += 1;
        }
        if i == k_n {
            break;
        }
    }
    for row in legacy.iter_mut().chain(meas.iter_mut()) {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    (legacy, meas)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Random association instance; `tree` zeroes pair weights until the
/// feature/measurement graph has no cycle.
pub fn random_instance(rng: &mut ChaCha8Rng, k_n: usize, m_n: usize, tree: bool) -> AssociationInput {
    let mut pair: Vec<Vec<f64>> = (0..k_n)
        .map(|_| (0..m_n).map(|_| rng.gen::<f64>() * 3.0).collect())
        .collect();
    if tree {
        // keep a random spanning forest: each edge is added only if it joins two components
        let mut parent: Vec<usize> = (0..k_n + m_n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for row in pair.iter_mut().enumerate() {
            let (k, r) = row;
            for (m, w) in r.iter_mut().enumerate() {
                let (a, b) = (find(&mut parent, k), find(&mut parent, k_n + m));
                if a != b && rng.gen::<f64>() < 0.7 {
                    parent[a] = b;
                } else {
                    *w = 0.0;
                }
            }
        }
    }
    AssociationInput {
        pair,
        miss: (0..k_n).map(|_| 0.1 + rng.gen::<f64>()).collect(),
        unassigned: (0..m_n).map(|_| 0.1 + rng.gen::<f64>()).collect(),
    }
}

/// `I0(x) e^{−x}` by trapezoidal integration of `(1/π)∫₀^π e^{x(cos t − 1)} dt`.
pub fn i0e_by_integral(x: f64) -> f64 {
    let n = 2000;
    let h = PI / n as f64;
    let mut s = 0.5 * (1.0 + (-2.0 * x).exp());
    for i in 1..n {
        s += (x * ((i as f64 * h).cos() - 1.0)).exp();
    }
    s * h / PI
}

/// Single-PA, clutter-free planar toy: agent with exactly known kinematics and
/// unknown initial position, PA at a known position with unknown amplitude.
pub struct GridToy {
    pub profile: NoiseProfile,
    pub pa: Vec3,
    pub start: Vec3,
    pub prior_mean: Vec3,
    pub prior_std: f64,
    pub heading0: f64,
    pub speed: f64,
    pub turn_rate: f64,
    pub dt: f64,
    pub true_amplitude: f64,
    pub steps: usize,
    pub amplitude_max: f64,
}

impl Default for GridToy {
    fn default() -> Self {
        Self {
            profile: NoiseProfile::default(),
            pa: Vec3::new(10.0, 6.0, 0.0),
            start: Vec3::new(0.0, 0.0, 0.0),
            prior_mean: Vec3::new(0.1, 0.1, 0.0),
            prior_std: 0.2,
            heading0: 0.0,
            speed: 1.0,
            turn_rate: 0.3,
            dt: 0.1,
            true_amplitude: 30.0,
            steps: 20,
            amplitude_max: 100.0,
        }
    }
}

/// Agent displacement from the start and heading at each step.
pub fn toy_kinematics(toy: &GridToy) -> Vec<(Vec3, f64)> {
    let mut out = vec![(Vec3::default(), toy.heading0)];
    let (mut p, mut h) = (Vec3::default(), toy.heading0);
    for _ in 1..toy.steps {
        p = p + Vec3::new(toy.speed * toy.dt * h.cos(), toy.speed * toy.dt * h.sin(), 0.0);
        h = wrap_angle(h + toy.dt * toy.turn_rate);
        out.push((p, h));
    }
    out
}

fn toy_geometry(agent: Vec3, heading: f64, pa: Vec3) -> (f64, f64, f64) {
    let d = pa - agent;
    let dist = d.norm();
    (dist, wrap_angle(d.y.atan2(d.x) - heading), (d.z / dist).asin())
}

/// Noisy measurements of the PA along the true path.
pub fn toy_measurements(toy: &GridToy, seed: u64) -> Vec<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(rand_distr::StandardNormal) };
    let u = toy.true_amplitude;
    let p = &toy.profile;
    toy_kinematics(toy)
        .into_iter()
        .map(|(off, h)| {
            let (d, az, el) = toy_geometry(toy.start + off, h, toy.pa);
            Measurement {
                distance: d + p.distance_scale.sqrt() / u * normal(),
                azimuth: wrap_angle(az + p.azimuth_scale.sqrt() / u * normal()),
                elevation: el + p.elevation_scale.sqrt() / u * normal(),
                amplitude: u + p.amplitude_std(u) * normal(),
            }
        })
        .collect()
}

/// Posterior mean of the agent position at each step on a dense grid over the
/// initial offset, with the amplitude marginalized on a grid as well.
pub fn grid_posterior_means(toy: &GridToy, z: &[Measurement], spacing: f64) -> Vec<Vec3> {
    let p = &toy.profile;
    let kin = toy_kinematics(toy);
    let half = (5.0 * toy.prior_std / spacing).ceil() as i64;
    let axis: Vec<f64> = (-half..=half).map(|i| i as f64 * spacing).collect();
    let lo = p.amplitude_floor();
    // amplitudes outside ±8σ of the first measured amplitude carry no mass
    let s0 = p.amplitude_std(z[0].amplitude);
    let (u_lo, u_hi) = ((z[0].amplitude - 8.0 * s0).max(lo), (z[0].amplitude + 8.0 * s0).min(toy.amplitude_max));
    let nu = 400;
    let us: Vec<f64> = (0..nu).map(|j| u_lo + (u_hi - u_lo) * (j as f64 + 0.5) / nu as f64).collect();

    let npts = axis.len() * axis.len();
    // S(x₀) = Σ residual²/k per dimension, accumulated over steps
    let mut s = vec![0.0; npts];
    let mut ln_prior = vec![0.0; npts];
    for (a, &dx) in axis.iter().enumerate() {
        for (b, &dy) in axis.iter().enumerate() {
            ln_prior[a * axis.len() + b] = -0.5 * (dx * dx + dy * dy) / toy.prior_std.powi(2);
        }
    }
    let mut ln_amp = vec![0.0; nu];
    let mut out = Vec::new();
    for (n, zn) in z.iter().enumerate() {
        for (j, &u) in us.iter().enumerate() {
            let var = p.amplitude_std(u).powi(2);
            let x = zn.amplitude * u / var;
            ln_amp[j] += (zn.amplitude / var).ln() - (zn.amplitude - u).powi(2) / (2.0 * var) + i0e_by_integral(x).ln()
                // geometric normalizer: Π 1/σ_d(u) ∝ u³
                + 3.0 * u.ln();
        }
        let (off, h) = kin[n];
        for (a, &dx) in axis.iter().enumerate() {
            for (b, &dy) in axis.iter().enumerate() {
                let agent = toy.prior_mean + off + Vec3::new(dx, dy, 0.0);
                let (d, az, el) = toy_geometry(agent, h, toy.pa);
                let r = [zn.distance - d, wrap_angle(zn.azimuth - az), zn.elevation - el];
                s[a * axis.len() + b] += r[0] * r[0] / p.distance_scale
                    + r[1] * r[1] / p.azimuth_scale
                    + r[2] * r[2] / p.elevation_scale;
            }
        }
        // ln w(x₀, u) = prior + ln_amp(u) − ½u²S(x₀); marginalize u per point
        let mut lw = vec![0.0; npts];
        for i in 0..npts {
            let mut mx = f64::NEG_INFINITY;
            for (j, &u) in us.iter().enumerate() {
                mx = mx.max(ln_amp[j] - 0.5 * u * u * s[i]);
            }
            let mut acc = 0.0;
            for (j, &u) in us.iter().enumerate() {
                acc += (ln_amp[j] - 0.5 * u * u * s[i] - mx).exp();
            }
            lw[i] = ln_prior[i] + mx + acc.ln();
        }
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut tot, mut mx_sum, mut my_sum) = (0.0, 0.0, 0.0);
        for (a, &dx) in axis.iter().enumerate() {
            for (b, &dy) in axis.iter().enumerate() {
                let w = (lw[a * axis.len() + b] - mx).exp();
                tot += w;
                mx_sum += w * dx;
                my_sum += w * dy;
            }
        }
        out.push(toy.prior_mean + off + Vec3::new(mx_sum / tot, my_sum / tot, 0.0));
    }
    out
}

/// Runs the particle filter on the toy and returns its MMSE agent estimates.
pub fn particle_toy_estimates(toy: &GridToy, z: &[Measurement], particles: usize, seed: u64) -> Vec<PoseEstimate> {
    let cfg = StepConfig {
        particles,
        survival: 1.0 - 1e-9,
        clutter_mean: 1e-9,
        speed_std: 0.0,
        heading_std: 0.0,
        amplitude_drift: 0.0,
        anchor_position_std: 0.0,
        ..StepConfig::default()
    };
    let prior = AgentPrior {
        position: toy.start + toy.prior_mean,
        position_std: [toy.prior_std, toy.prior_std, 0.0],
        heading: toy.heading0,
        heading_std: 0.0,
        speed: toy.speed,
        speed_std: 0.0,
    };
    let roi = Roi { center: toy.pa.to_array(), ..Roi::default() };
    let mut filter = SlamFilter::new(cfg, toy.profile, roi, toy.dt, &prior, &[toy.pa], seed).expect("valid toy filter");
    let mut out = Vec::new();
    for (n, zn) in z.iter().enumerate() {
        let proprio = (n > 0).then_some(Proprio { speed: toy.speed, turn_rate: toy.turn_rate });
        let scan = vec![CellScan { measurements: vec![*zn], sources: vec![Some(0)] }];
        out.push(filter.step(proprio, &scan).expect("toy step").agent);
    }
    out
}

/// Plain loopy BP for association, written directly from the message
/// equations with synchronous updates; returns the legacy marginals.
pub fn naive_loopy_bp(input: &AssociationInput, iters: usize) -> Vec<Vec<f64>> {
    let k_n = input.miss.len();
    let m_n = input.unassigned.len();
    let mut nu = vec![vec![1.0; m_n]; k_n];
    for _ in 0..iters {
        let mut mu = vec![vec![0.0; m_n]; k_n];
        for k in 0..k_n {
            for m in 0..m_n {
                let others: f64 = (0..m_n).filter(|&j| j != m).map(|j| input.pair[k][j] * nu[k][j]).sum();
                mu[k][m] = input.pair[k][m] / (input.miss[k] + others);
            }
        }
        for k in 0..k_n {
            for m in 0..m_n {
                let others: f64 = (0..k_n).filter(|&j| j != k).map(|j| mu[j][m]).sum();
                nu[k][m] = 1.0 / (input.unassigned[m] + others);
            }
        }
    }
    (0..k_n)
        .map(|k| {
            let mut b: Vec<f64> = std::iter::once(input.miss[k])
                .chain((0..m_n).map(|m| input.pair[k][m] * nu[k][m]))
                .collect();
            let s: f64 = b.iter().sum();
            b.iter_mut().for_each(|v| *v /= s);
            b
        })
        .collect()
}
