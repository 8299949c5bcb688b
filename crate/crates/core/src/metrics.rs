//! Evaluation metrics: OSPA, per-step RMSE across runs, empirical CDFs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no values")]
    Empty,
    #[error("invalid OSPA configuration: order must be >= 1 and cutoff > 0")]
    BadOspaConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OspaConfig {
    pub order: f64,
    pub cutoff: f64,
}

impl Default for OspaConfig {
    fn default() -> Self {
        Self { order: 1.0, cutoff: 6.0 }
    }
}

/// Minimum-cost perfect assignment of rows to columns for a square cost
/// matrix (Hungarian method with potentials). Returns `assignment[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// OSPA distance between two finite point sets.
pub fn ospa(estimates: &[Vec3], truth: &[Vec3], cfg: &OspaConfig) -> Result<f64, MetricsError> {
    if !(cfg.order >= 1.0 && cfg.cutoff > 0.0) {
        return Err(MetricsError::BadOspaConfig);
    }
    let (small, large) = if estimates.len() <= truth.len() {
        (estimates, truth)
    } else {
        (truth, estimates)
    };
    let n = large.len();
    if n == 0 {
        return Ok(0.0);
    }
    let c = cfg.cutoff;
    let p = cfg.order;
    // pad with dummy rows costing c^p so the square assignment covers the cardinality term
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < small.len() {
                        small[i].distance(large[j]).min(c).powf(p)
                    } else {
                        c.powf(p)
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((total / n as f64).powf(1.0 / p).min(c))
}

/// Per-step RMS over runs of position error and wrapped heading error.
///
/// `estimates[r][n]` and `truth[r][n]` hold `(position, heading)` of run `r` at step `n`.
pub fn rmse_series(
    estimates: &[Vec<(Vec3, f64)>],
    truth: &[Vec<(Vec3, f64)>],
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if estimates.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(estimates.len(), truth.len()));
    }
    let Some(first) = estimates.first() else {
        return Err(MetricsError::Empty);
    };
    let steps = first.len();
    for (e, t) in estimates.iter().zip(truth) {
        if e.len() != steps {
            return Err(MetricsError::LengthMismatch(e.len(), steps));
        }
        if t.len() != steps {
            return Err(MetricsError::LengthMismatch(t.len(), steps));
        }
    }
    let runs = estimates.len() as f64;
    let mut pos = vec![0.0; steps];
    let mut head = vec![0.0; steps];
    for (e, t) in estimates.iter().zip(truth) {
        for n in 0..steps {
            pos[n] += e[n].0.distance(t[n].0).powi(2);
            head[n] += wrap_angle(e[n].1 - t[n].1).powi(2);
        }
    }
    Ok((
        pos.into_iter().map(|s| (s / runs).sqrt()).collect(),
        head.into_iter().map(|s| (s / runs).sqrt()).collect(),
    ))
}

/// Empirical CDF: sorted distinct values with the fraction of samples `≤` each.
pub fn cumulative_frequency(errors: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    Ok(out)
}
