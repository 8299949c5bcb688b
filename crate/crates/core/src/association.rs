//! Probabilistic data association by loopy belief propagation on the
//! bipartite legacy-feature/measurement graph.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("pair weights must be a {rows}x{cols} matrix")]
    Shape { rows: usize, cols: usize },
    #[error("weight at ({row}, {col}) is negative or not finite")]
    InvalidWeight { row: usize, col: usize },
    #[error("missed-detection weight of feature {0} must be positive")]
    NonPositiveMiss(usize),
    #[error("unassigned weight of measurement {0} must be positive")]
    NonPositiveUnassigned(usize),
}

/// `ψ(a_k, ā_m)`: 0 when exactly one side claims the other, else 1.
///
/// `a_legacy` is the measurement index chosen by feature `k` (0 = none);
/// `a_meas` is the feature index chosen by measurement `m` (0 = none).
pub fn exclusion(k: usize, m: usize, a_legacy: usize, a_meas: usize) -> u8 {
    let legacy_claims = a_legacy == m;
    let meas_claims = a_meas == k;
    u8::from(legacy_claims == meas_claims)
}

/// Unnormalized association weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationInput {
    /// `pair[k][m]` is `β_k(m+1)`: feature `k` generated measurement `m`.
    pub pair: Vec<Vec<f64>>,
    /// `β_k(0)`: feature `k` generated no measurement.
    pub miss: Vec<f64>,
    /// `ξ_m(0)`: measurement `m` is clutter or a new feature, relative to weight 1
    /// for each legacy feature claim.
    pub unassigned: Vec<f64>,
}

impl AssociationInput {
    pub fn features(&self) -> usize {
        self.miss.len()
    }

    pub fn measurements(&self) -> usize {
        self.unassigned.len()
    }

    fn validate(&self) -> Result<(), AssociationError> {
        let (k, m) = (self.features(), self.measurements());
        if self.pair.len() != k || self.pair.iter().any(|r| r.len() != m) {
            return Err(AssociationError::Shape { rows: k, cols: m });
        }
        for (row, r) in self.pair.iter().enumerate() {
            for (col, &w) in r.iter().enumerate() {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(AssociationError::InvalidWeight { row, col });
                }
            }
        }
        for (i, &w) in self.miss.iter().enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(AssociationError::NonPositiveMiss(i));
            }
        }
        for (i, &w) in self.unassigned.iter().enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(AssociationError::NonPositiveUnassigned(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpConfig {
    pub max_iters: usize,
    /// Convergence threshold on the largest relative message change.
    pub tolerance: f64,
    /// Weight on the previous message; `None` disables damping.
    pub damping: Option<f64>,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tolerance: 1e-6,
            damping: None,
        }
    }
}

/// Association marginals and the extrinsic messages that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationOutput {
    /// `legacy[k][a]`, normalized over `a = 0..=M`.
    pub legacy: Vec<Vec<f64>>,
    /// `measurement[m][a]`, normalized over `a = 0..=K`.
    pub measurement: Vec<Vec<f64>>,
    /// Message into feature `k`'s factor: `[1, ν_{1→k}, …, ν_{M→k}]`.
    pub to_legacy: Vec<Vec<f64>>,
    /// Message into measurement `m`'s factor: `[1, μ_{1→m}, …, μ_{K→m}]`.
    pub to_measurement: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

/// Runs the BP association fixed-point iteration.
pub fn run_loopy_da(
    input: &AssociationInput,
    cfg: &BpConfig,
) -> Result<AssociationOutput, AssociationError> {
    input.validate()?;
    let k_n = input.features();
    let m_n = input.measurements();

    // row ratios β_k(m)/β_k(0), computed after max-normalizing the row
    let ratio: Vec<Vec<f64>> = (0..k_n)
        .map(|k| {
            let scale = input.pair[k]
                .iter()
                .copied()
                .fold(input.miss[k], f64::max);
            let miss = input.miss[k] / scale;
            input.pair[k].iter().map(|&w| (w / scale) / miss).collect()
        })
        .collect();

    let mut nu = vec![vec![1.0; k_n]; m_n]; // ν_{m→k}
    let mut mu = vec![vec![0.0; m_n]; k_n]; // μ_{k→m}
    let mut best_nu = nu.clone();
    let mut best_mu = mu.clone();
    let mut best_change = f64::INFINITY;
    let mut converged = k_n == 0 || m_n == 0;
    let mut iterations = 0;

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        for k in 0..k_n {
            let total: f64 = (0..m_n).map(|m| ratio[k][m] * nu[m][k]).sum();
            for m in 0..m_n {
                let others = total - ratio[k][m] * nu[m][k];
                mu[k][m] = ratio[k][m] / (1.0 + others.max(0.0));
            }
        }
        let mut change: f64 = 0.0;
        for m in 0..m_n {
            let total: f64 = (0..k_n).map(|k| mu[k][m]).sum();
            for k in 0..k_n {
                let others = (total - mu[k][m]).max(0.0);
                let mut next = 1.0 / (input.unassigned[m] + others);
                if let Some(d) = cfg.damping {
                    next = d * nu[m][k] + (1.0 - d) * next;
                }
                let rel = (next - nu[m][k]).abs() / next.abs().max(f64::MIN_POSITIVE);
                change = change.max(rel);
                nu[m][k] = next;
            }
        }
        if change < best_change {
            best_change = change;
            best_nu.clone_from(&nu);
            best_mu.clone_from(&mu);
        }
        converged = change < cfg.tolerance;
    }
    if !converged && k_n > 0 && m_n > 0 {
        nu = best_nu;
        mu = best_mu;
    }

    let legacy = (0..k_n)
        .map(|k| {
            let mut row = Vec::with_capacity(m_n + 1);
            row.push(1.0);
            row.extend((0..m_n).map(|m| ratio[k][m] * nu[m][k]));
            normalize(row)
        })
        .collect();
    let measurement = (0..m_n)
        .map(|m| {
            let mut row = Vec::with_capacity(k_n + 1);
            row.push(input.unassigned[m]);
            row.extend((0..k_n).map(|k| mu[k][m]));
            normalize(row)
        })
        .collect();
    let to_legacy = (0..k_n)
        .map(|k| std::iter::once(1.0).chain((0..m_n).map(|m| nu[m][k])).collect())
        .collect();
    let to_measurement = (0..m_n)
        .map(|m| std::iter::once(1.0).chain((0..k_n).map(|k| mu[k][m])).collect())
        .collect();

    Ok(AssociationOutput {
        legacy,
        measurement,
        to_legacy,
        to_measurement,
        converged,
        iterations,
    })
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    for x in &mut v {
        *x /= s;
    }
    v
}
