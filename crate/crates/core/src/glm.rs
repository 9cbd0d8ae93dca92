//! Weighted quasi-score solver shared by the M-step, initialization and GEE.
//!
//! Solves `sum_i w_i sum_j g'(eta_ij) x_ij (y_ij - mu_ij) / V(mu_ij) = 0` by
//! Fisher scoring with step-halving on the weighted quasi-likelihood.

use nalgebra::DVector;

use crate::data::{dot, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::linalg::{rank_one_upper, symmetric_from_upper, ScaledCholesky};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    /// Converged once the largest absolute score entry is at most this.
    pub score_tol: f64,
    /// Converged once an accepted step moves no coefficient by more than this.
    pub step_tol: f64,
    pub max_steps: usize,
    pub max_halvings: usize,
    /// Adds `-ridge |beta|^2 / 2` to the objective; zero for plain fits.
    pub ridge: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            score_tol: 1e-8,
            step_tol: 1e-6,
            max_steps: 50,
            max_halvings: 30,
            ridge: 0.0,
        }
    }
}

struct Evaluation {
    objective: f64,
    score: Vec<f64>,
    info_upper: Vec<f64>,
}

fn weighted_objective(
    family: Family,
    data: &LongitudinalDataset,
    weights: &[f64],
    beta: &[f64],
    ridge: f64,
) -> Option<f64> {
    let mut total = -0.5 * ridge * dot(beta, beta);
    for (s, &w) in data.subjects().iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for (row, &y) in s.x_rows().zip(s.y()) {
            let mu = family.inverse_link(dot(row, beta));
            if !family.in_mean_domain(mu) {
                return None;
            }
            acc += family.q(mu, y);
        }
        total += w * acc;
    }
    total.is_finite().then_some(total)
}

fn evaluate(
    family: Family,
    data: &LongitudinalDataset,
    weights: &[f64],
    beta: &[f64],
    ridge: f64,
) -> Option<Evaluation> {
    let p = beta.len();
    let mut score: Vec<f64> = beta.iter().map(|b| -ridge * b).collect();
    let mut info_upper = vec![0.0; p * p];
    for j in 0..p {
        info_upper[j * p + j] = ridge;
    }
    let mut objective = -0.5 * ridge * dot(beta, beta);
    for (s, &w) in data.subjects().iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (row, &y) in s.x_rows().zip(s.y()) {
            let eta = dot(row, beta);
            let mu = family.inverse_link(eta);
            if !family.in_mean_domain(mu) {
                return None;
            }
            let d = family.mean_deriv(eta);
            let v = family.variance(mu);
            objective += w * family.q(mu, y);
            let c = w * d * (y - mu) / v;
            for (acc, x) in score.iter_mut().zip(row) {
                *acc += c * x;
            }
            rank_one_upper(&mut info_upper, row, w * d * d / v);
        }
    }
    (objective.is_finite() && score.iter().all(|v| v.is_finite())).then_some(Evaluation {
        objective,
        score,
        info_upper,
    })
}

/// Fits one weighted quasi-GLM starting from `start`.
///
/// `weights` holds one non-negative weight per subject, applied to all of its
/// observations. `component` only labels errors.
pub fn fit_weighted(
    family: Family,
    data: &LongitudinalDataset,
    weights: &[f64],
    start: &[f64],
    opts: &ScoringOptions,
    component: usize,
) -> Result<Vec<f64>> {
    let p = data.p();
    if start.len() != p || weights.len() != data.n() {
        return Err(Error::Argument(format!(
            "fit_weighted: expected {p} coefficients and {} weights",
            data.n()
        )));
    }
    let mut beta = start.to_vec();
    let mut eval = evaluate(family, data, weights, &beta, opts.ridge).ok_or_else(|| {
        Error::Numerical(format!(
            "component {component}: starting coefficients give means outside the {family} domain"
        ))
    })?;
    for _ in 0..opts.max_steps {
        let max_score = eval.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_score <= opts.score_tol {
            return Ok(beta);
        }
        let info = symmetric_from_upper(&eval.info_upper, p);
        let chol = ScaledCholesky::new(&info).ok_or(Error::RankDeficient { component })?;
        let step = chol.solve(&DVector::from_column_slice(&eval.score));

        let mut factor = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + factor * s).collect();
            if let Some(obj) = weighted_objective(family, data, weights, &trial, opts.ridge) {
                if obj >= eval.objective - 1e-12 * (1.0 + eval.objective.abs()) {
                    accepted = Some(trial);
                    break;
                }
            }
            factor *= 0.5;
        }
        let Some(trial) = accepted else {
            // No ascent along the scoring direction: numerically at the optimum.
            return Ok(beta);
        };
        let moved = trial
            .iter()
            .zip(&beta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        beta = trial;
        eval = evaluate(family, data, weights, &beta, opts.ridge).ok_or_else(|| {
            Error::Numerical(format!("component {component}: accepted step left the mean domain"))
        })?;
        if moved <= opts.step_tol {
            return Ok(beta);
        }
    }
    let max_score = eval.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_score <= opts.score_tol {
        return Ok(beta);
    }
    Err(Error::InnerSolver {
        component,
        steps: opts.max_steps,
        last_iterate: beta,
    })
}

/// A reasonable starting point: the link applied to the pooled mean response
/// spread over columns that look like an intercept, zeros elsewhere.
pub fn naive_start(family: Family, data: &LongitudinalDataset, weights: &[f64]) -> Vec<f64> {
    let p = data.p();
    let mut start = vec![0.0; p];
    let (mut sw, mut sy) = (0.0, 0.0);
    for (s, &w) in data.subjects().iter().zip(weights) {
        for &y in s.y() {
            sw += w;
            sy += w * y;
        }
    }
    let ybar = if sw > 0.0 { sy / sw } else { 0.0 };
    let ybar = match family {
        Family::Gaussian => ybar,
        Family::Poisson => ybar.max(1e-3),
        Family::Binomial => ybar.clamp(1e-3, 1.0 - 1e-3),
    };
    let eta = family.link(ybar);
    // Put the whole linear predictor on constant columns when there is one.
    let is_constant = |j: usize| {
        let first = data.subject(0).x_row(0)[j];
        first != 0.0
            && data
                .subjects()
                .iter()
                .all(|s| s.x_rows().all(|r| r[j] == first))
    };
    if let Some(j) = (0..p).find(|&j| is_constant(j)) {
        start[j] = eta / data.subject(0).x_row(0)[j];
    } else if family != Family::Gaussian {
        // No intercept column: spread the link of the mean along the mean
        // covariate direction so the first scoring step stays in domain.
        let means = data.covariate_means();
        let norm: f64 = means.iter().map(|m| m * m).sum();
        if norm > 0.0 {
            for (b, m) in start.iter_mut().zip(&means) {
                *b = eta * m / norm;
            }
        }
    }
    start
}
