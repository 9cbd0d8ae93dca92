//! Plug-in sandwich covariance `B^-1 A B^-1 / n` for a fitted mixture.
//!
//! The free parameters are the stacked coefficient vectors followed by the
//! first `K - 1` proportions (the last one is `1 - sum`). Dispersions do not
//! enter the quasi-likelihood and are held fixed.

use nalgebra::{DMatrix, DVector};

use crate::data::{LongitudinalDataset, SubjectBlock};
use crate::em::{log_sum_exp, subject_quasi_loglik, MixtureFit};
use crate::error::{Error, Result};
use crate::family::Family;

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichCovariance {
    pub covariance: DMatrix<f64>,
    pub standard_errors: Vec<f64>,
    pub labels: Vec<String>,
    k: usize,
    p: usize,
}

impl SandwichCovariance {
    pub fn beta_standard_errors(&self, component: usize) -> &[f64] {
        &self.standard_errors[component * self.p..(component + 1) * self.p]
    }

    /// Standard errors of all `K` proportions; the last is derived through
    /// `pi_K = 1 - sum_{k<K} pi_k`.
    pub fn pi_standard_errors(&self) -> Vec<f64> {
        let off = self.k * self.p;
        let m = self.k - 1;
        let mut out: Vec<f64> = self.standard_errors[off..].to_vec();
        let block = self.covariance.view((off, off), (m, m));
        out.push(block.sum().max(0.0).sqrt());
        out
    }
}

/// Packs `(beta_1, ..., beta_K, pi_1, ..., pi_{K-1})`.
pub fn pack_parameters(fit: &MixtureFit) -> Vec<f64> {
    let mut theta: Vec<f64> = fit.beta.iter().flatten().copied().collect();
    theta.extend(&fit.pi[..fit.k() - 1]);
    theta
}

fn unpack(theta: &[f64], k: usize, p: usize) -> (Vec<&[f64]>, Vec<f64>) {
    let betas = (0..k).map(|c| &theta[c * p..(c + 1) * p]).collect();
    let mut pi: Vec<f64> = theta[k * p..].to_vec();
    let last = 1.0 - pi.iter().sum::<f64>();
    pi.push(last);
    (betas, pi)
}

/// `psi_i(theta) = log sum_k pi_k exp{ sum_j q(mu_ijk; y_ij) }`.
pub fn subject_log_psi(
    family: Family,
    subject: &SubjectBlock,
    theta: &[f64],
    k: usize,
    p: usize,
) -> Result<f64> {
    let (betas, pi) = unpack(theta, k, p);
    let a = betas
        .iter()
        .zip(&pi)
        .map(|(b, &w)| Ok(w.ln() + subject_quasi_loglik(family, subject, b)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&a))
}

/// Analytic gradient of [`subject_log_psi`].
pub fn subject_gradient(
    family: Family,
    subject: &SubjectBlock,
    theta: &[f64],
    k: usize,
    p: usize,
) -> Result<Vec<f64>> {
    let (betas, pi) = unpack(theta, k, p);
    if pi.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Argument(format!("proportions must stay positive: {pi:?}")));
    }
    let mut log_scores = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for b in &betas {
        let mut s = 0.0;
        let mut grad = vec![0.0; p];
        for (row, &y) in subject.x_rows().zip(subject.y()) {
            let eta: f64 = row.iter().zip(b.iter()).map(|(x, c)| x * c).sum();
            let mu = family.inverse_link(eta);
            family.check_mean(mu)?;
            s += family.q(mu, y);
            let c = family.mean_deriv(eta) * (y - mu) / family.variance(mu);
            for (g, x) in grad.iter_mut().zip(row) {
                *g += c * x;
            }
        }
        log_scores.push(s);
        scores.push(grad);
    }
    let a: Vec<f64> = log_scores.iter().zip(&pi).map(|(s, w)| w.ln() + s).collect();
    let lse = log_sum_exp(&a);
    let w: Vec<f64> = a.iter().map(|v| (v - lse).exp()).collect();

    let mut out = Vec::with_capacity(theta.len());
    for c in 0..k {
        out.extend(scores[c].iter().map(|g| w[c] * g));
    }
    for c in 0..k - 1 {
        out.push(w[c] / pi[c] - w[k - 1] / pi[k - 1]);
    }
    Ok(out)
}

fn mean_gradient(
    family: Family,
    data: &LongitudinalDataset,
    theta: &[f64],
    k: usize,
    p: usize,
) -> Result<DVector<f64>> {
    let mut acc = DVector::zeros(theta.len());
    for s in data.subjects() {
        acc += DVector::from_vec(subject_gradient(family, s, theta, k, p)?);
    }
    Ok(acc / data.n() as f64)
}

/// Sandwich covariance of the packed parameters at `fit`.
///
/// `A` is the empirical covariance of per-subject gradients; `B` is the
/// negative mean Hessian from central differences of the analytic gradient.
pub fn sandwich_covariance(
    family: Family,
    data: &LongitudinalDataset,
    fit: &MixtureFit,
) -> Result<SandwichCovariance> {
    fit.validate(Some(data.p()))?;
    let (k, p, n) = (fit.k(), data.p(), data.n());
    let theta = pack_parameters(fit);
    let d = theta.len();

    let grads = data
        .subjects()
        .iter()
        .map(|s| subject_gradient(family, s, &theta, k, p).map(DVector::from_vec))
        .collect::<Result<Vec<_>>>()?;
    let mean = grads.iter().fold(DVector::zeros(d), |acc, g| acc + g) / n as f64;
    let mut a = DMatrix::zeros(d, d);
    for g in &grads {
        let c = g - &mean;
        a += &c * c.transpose();
    }
    a /= n as f64;

    let mut b = DMatrix::zeros(d, d);
    for j in 0..d {
        let h = 1e-5 * (1.0 + theta[j].abs());
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += h;
        minus[j] -= h;
        let col = (mean_gradient(family, data, &plus, k, p)?
            - mean_gradient(family, data, &minus, k, p)?)
            / (2.0 * h);
        b.set_column(j, &(-col));
    }
    let b = (&b + b.transpose()) * 0.5;

    let sv = b.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::NearSingular { condition });
    }
    let b_inv = b.try_inverse().ok_or(Error::NearSingular { condition })?;
    let covariance = &b_inv * a * &b_inv / n as f64;
    let standard_errors = (0..d).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();

    let mut labels = Vec::with_capacity(d);
    for c in 0..k {
        for j in 0..p {
            labels.push(format!("beta[{c}][{j}]"));
        }
    }
    for c in 0..k - 1 {
        labels.push(format!("pi[{c}]"));
    }
    Ok(SandwichCovariance {
        covariance,
        standard_errors,
        labels,
        k,
        p,
    })
}
