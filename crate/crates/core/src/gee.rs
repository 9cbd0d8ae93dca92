//! Per-class GEE refinement of a fitted mixture.
//!
//! Subjects are hard-assigned by the posterior rule, then each class is refit
//! with `V_i = phi A_i^{1/2} R_i(rho) A_i^{1/2}`, alternating a Fisher
//! scoring step for `beta` with moment updates of `phi` and `rho`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{dot, LongitudinalDataset, SubjectBlock};
use crate::em::MixtureFit;
use crate::error::{Error, Result};
use crate::family::Family;
use crate::linalg::ScaledCholesky;
use crate::selection::classify_all;

pub const RHO_BOUND: f64 = 0.99;
pub const MAX_ITER: usize = 100;
pub const BETA_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Independence,
    Ar1,
    Exchangeable,
}

impl CorrelationKind {
    pub const ALL: [CorrelationKind; 3] = [Self::Independence, Self::Ar1, Self::Exchangeable];

    pub fn name(self) -> &'static str {
        match self {
            Self::Independence => "ind",
            Self::Ar1 => "ar1",
            Self::Exchangeable => "cs",
        }
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ind" | "independence" => Ok(Self::Independence),
            "ar1" => Ok(Self::Ar1),
            "cs" | "exchangeable" => Ok(Self::Exchangeable),
            other => Err(Error::Argument(format!("unknown working correlation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelation {
    pub kind: CorrelationKind,
    pub rho: f64,
}

impl WorkingCorrelation {
    pub fn new(kind: CorrelationKind, rho: f64) -> Result<Self> {
        if kind != CorrelationKind::Independence && !(rho > -1.0 && rho < 1.0) {
            return Err(Error::Argument(format!("correlation {rho} must lie in (-1, 1)")));
        }
        Ok(Self { kind, rho })
    }

    pub fn independence() -> Self {
        Self {
            kind: CorrelationKind::Independence,
            rho: 0.0,
        }
    }

    /// The `m x m` working correlation matrix.
    pub fn matrix(&self, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |a, b| {
            if a == b {
                return 1.0;
            }
            match self.kind {
                CorrelationKind::Independence => 0.0,
                CorrelationKind::Ar1 => self.rho.powi(a.abs_diff(b) as i32),
                CorrelationKind::Exchangeable => self.rho,
            }
        })
    }

    /// Whether `R(rho)` is positive definite for cluster size `m`.
    pub fn is_positive_definite(&self, m: usize) -> bool {
        match self.kind {
            CorrelationKind::Independence => true,
            CorrelationKind::Ar1 => self.rho.abs() < 1.0,
            CorrelationKind::Exchangeable => {
                self.rho < 1.0 && (m < 2 || self.rho > -1.0 / (m as f64 - 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate {
    pub rho: f64,
    /// Set when no subject had two or more visits and independence was used.
    pub fell_back: bool,
}

/// Moment estimate of the working correlation from Pearson residuals
/// `(y - mu) / sqrt(V(mu))`, one vector per subject; dividing by `sqrt(phi)`
/// standardizes them.
pub fn estimate_rho(residuals: &[Vec<f64>], phi: f64, kind: CorrelationKind) -> RhoEstimate {
    let max_m = residuals.iter().map(Vec::len).max().unwrap_or(0);
    if kind == CorrelationKind::Independence {
        return RhoEstimate { rho: 0.0, fell_back: false };
    }
    if max_m < 2 {
        return RhoEstimate { rho: 0.0, fell_back: true };
    }
    let (mut num, mut den) = (0.0, 0.0);
    for r in residuals {
        let m = r.len();
        match kind {
            CorrelationKind::Ar1 => {
                num += r.windows(2).map(|w| w[0] * w[1]).sum::<f64>();
                den += m.saturating_sub(1) as f64;
            }
            CorrelationKind::Exchangeable => {
                // sum_{j<j'} e_j e_j' = ((sum e)^2 - sum e^2) / 2
                let s: f64 = r.iter().sum();
                let s2: f64 = r.iter().map(|e| e * e).sum();
                num += (s * s - s2) / 2.0;
                den += (m * m.saturating_sub(1)) as f64 / 2.0;
            }
            CorrelationKind::Independence => unreachable!(),
        }
    }
    let rho = num / (phi * den);
    let lower = match kind {
        CorrelationKind::Exchangeable => (-RHO_BOUND / (max_m as f64 - 1.0)).max(-RHO_BOUND),
        _ => -RHO_BOUND,
    };
    let rho = if rho.is_finite() { rho.clamp(lower, RHO_BOUND) } else { 0.0 };
    RhoEstimate { rho, fell_back: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeFit {
    pub beta: Vec<f64>,
    pub phi: f64,
    pub rho: f64,
    pub iterations: usize,
    pub rho_fell_back: bool,
}

fn pearson_residuals(family: Family, subject: &SubjectBlock, beta: &[f64]) -> Result<Vec<f64>> {
    subject
        .x_rows()
        .zip(subject.y())
        .map(|(row, &y)| {
            let mu = family.inverse_link(dot(row, beta));
            family.check_mean(mu)?;
            Ok((y - mu) / family.variance(mu).sqrt())
        })
        .collect()
}

fn moment_updates(
    family: Family,
    data: &LongitudinalDataset,
    beta: &[f64],
    kind: CorrelationKind,
    phi_floor: f64,
) -> Result<(f64, RhoEstimate)> {
    let residuals = data
        .subjects()
        .iter()
        .map(|s| pearson_residuals(family, s, beta))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = residuals.iter().flatten().map(|e| e * e).sum();
    let phi = (total / data.total_observations() as f64).max(phi_floor);
    Ok((phi, estimate_rho(&residuals, phi, kind)))
}

/// One Fisher scoring step `(sum D'V^-1 D)^-1 sum D'V^-1 (y - mu)`.
fn scoring_step(
    family: Family,
    data: &LongitudinalDataset,
    beta: &[f64],
    corr: &WorkingCorrelation,
) -> Result<Vec<f64>> {
    let p = beta.len();
    let mut info = DMatrix::<f64>::zeros(p, p);
    let mut score = DVector::<f64>::zeros(p);
    for s in data.subjects() {
        let m = s.m();
        let mut d = DMatrix::<f64>::zeros(m, p);
        let mut resid = DVector::<f64>::zeros(m);
        let mut sd = vec![0.0; m];
        for (j, (row, &y)) in s.x_rows().zip(s.y()).enumerate() {
            let eta = dot(row, beta);
            let mu = family.inverse_link(eta);
            family.check_mean(mu)?;
            let g = family.mean_deriv(eta);
            for (c, x) in row.iter().enumerate() {
                d[(j, c)] = g * x;
            }
            resid[j] = y - mu;
            sd[j] = family.variance(mu).sqrt();
        }
        let r = corr.matrix(m);
        let v = DMatrix::from_fn(m, m, |a, b| sd[a] * r[(a, b)] * sd[b]);
        let chol = v.cholesky().ok_or_else(|| {
            Error::Numerical(format!("working covariance of subject {} is not positive definite", s.id()))
        })?;
        let vinv_d = chol.solve(&d);
        let vinv_r = chol.solve(&resid);
        info += d.transpose() * vinv_d;
        score += d.transpose() * vinv_r;
    }
    let chol = ScaledCholesky::new(&info).ok_or_else(|| {
        Error::Numerical("GEE information matrix is singular".into())
    })?;
    let step = chol.solve(&score);
    Ok(beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect())
}

/// GEE for one class. `phi` and `rho` are refreshed from the current `beta`
/// before each scoring step.
pub fn gee_fit(
    family: Family,
    data: &LongitudinalDataset,
    kind: CorrelationKind,
    init_beta: &[f64],
) -> Result<GeeFit> {
    if data.n() == 0 {
        return Err(Error::EmptyInput("GEE needs at least one subject".into()));
    }
    if init_beta.len() != data.p() {
        return Err(Error::Argument(format!(
            "initial coefficients have length {}, expected {}",
            init_beta.len(),
            data.p()
        )));
    }
    let floor = crate::em::PHI_FLOOR;
    let mut beta = init_beta.to_vec();
    let (mut phi, mut rho) = moment_updates(family, data, &beta, kind, floor)?;
    for it in 1..=MAX_ITER {
        let corr = WorkingCorrelation { kind, rho: rho.rho };
        let next = scoring_step(family, data, &beta, &corr)?;
        let change = next.iter().zip(&beta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        beta = next;
        (phi, rho) = moment_updates(family, data, &beta, kind, floor)?;
        if change <= BETA_TOL {
            return Ok(GeeFit {
                beta,
                phi,
                rho: rho.rho,
                iterations: it,
                rho_fell_back: rho.fell_back,
            });
        }
    }
    Err(Error::GeeNonConvergence {
        iterations: MAX_ITER,
        beta,
        phi,
        rho: rho.rho,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedFit {
    pub kind: CorrelationKind,
    pub pi: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
    pub classes: Vec<usize>,
}

/// Assigns subjects with the posterior rule, then refits every class by GEE
/// starting from the mixture coefficients. Proportions are carried over.
pub fn refine(
    family: Family,
    data: &LongitudinalDataset,
    fit: &MixtureFit,
    kind: CorrelationKind,
) -> Result<RefinedFit> {
    fit.validate(Some(data.p()))?;
    let classes = classify_all(family, fit, data)?;
    let mut beta = Vec::with_capacity(fit.k());
    let mut phi = Vec::with_capacity(fit.k());
    let mut rho = Vec::with_capacity(fit.k());
    for k in 0..fit.k() {
        let members: Vec<usize> = (0..data.n()).filter(|&i| classes[i] == k).collect();
        if members.is_empty() {
            return Err(Error::ClassCollapse { class: k });
        }
        let class_data = data.select(&members)?;
        let g = gee_fit(family, &class_data, kind, &fit.beta[k])?;
        beta.push(g.beta);
        phi.push(g.phi);
        rho.push(g.rho);
    }
    Ok(RefinedFit {
        kind,
        pi: fit.pi.clone(),
        beta,
        phi,
        rho,
        classes,
    })
}
