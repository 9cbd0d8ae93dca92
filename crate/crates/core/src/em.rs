//! Modified EM for the penalized quasi-likelihood of a marginal mixture.
//!
//! For fixed tuning parameter `lambda` the engine maximizes
//!
//! ```text
//! Q_P = sum_i log sum_k pi_k exp{ sum_j q(mu_ijk; y_ij) }
//!       - n lambda sum_k { log(eps + pi_k) - log(eps) }
//! ```
//!
//! The E-step weighs components with the dispersion-scaled `q / phi_k`, the
//! proportion update is the closed form obtained as `eps -> 0`, regression
//! coefficients solve the weighted quasi-score equations and dispersions are
//! residual moments. Components whose proportion is driven to zero are
//! dropped and the iteration continues with fewer components.

use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, SubjectBlock};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::glm::{fit_weighted, ScoringOptions};
use crate::selection::order_labels;

/// Parameters of a `K`-component marginal mixture plus fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub pi: Vec<f64>,
    /// One coefficient vector of length `p` per component.
    pub beta: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    /// Penalized objective after every iteration, starting with the initial value.
    #[serde(default)]
    pub trace: Vec<f64>,
    #[serde(default)]
    pub converged: bool,
    #[serde(default)]
    pub iterations: usize,
}

impl MixtureFit {
    pub fn new(pi: Vec<f64>, beta: Vec<Vec<f64>>, phi: Vec<f64>) -> Result<Self> {
        let fit = Self {
            pi,
            beta,
            phi,
            trace: Vec::new(),
            converged: false,
            iterations: 0,
        };
        fit.validate(None)?;
        Ok(fit)
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn p(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }

    /// Checks shape and simplex invariants; `p` additionally pins the
    /// coefficient length.
    pub fn validate(&self, p: Option<usize>) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Argument("mixture has no components".into()));
        }
        if self.beta.len() != k || self.phi.len() != k {
            return Err(Error::Argument(format!(
                "mixture has {k} proportions, {} coefficient rows and {} dispersions",
                self.beta.len(),
                self.phi.len()
            )));
        }
        let p = p.unwrap_or_else(|| self.p());
        if p == 0 || self.beta.iter().any(|b| b.len() != p) {
            return Err(Error::Argument(format!("coefficient rows must all have length {p}")));
        }
        if self.pi.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Argument(format!("proportions must lie in (0, 1]: {:?}", self.pi)));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Argument(format!("proportions sum to {total}, not 1")));
        }
        if self.phi.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Argument(format!("dispersions must be positive: {:?}", self.phi)));
        }
        if self.beta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("coefficients must be finite".into()));
        }
        Ok(())
    }

    /// The fit restricted to the listed components, proportions renormalized.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let total: f64 = keep.iter().map(|&k| self.pi[k]).sum();
        Self {
            pi: keep.iter().map(|&k| self.pi[k] / total).collect(),
            beta: keep.iter().map(|&k| self.beta[k].clone()).collect(),
            phi: keep.iter().map(|&k| self.phi[k]).collect(),
            trace: self.trace.clone(),
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

/// Membership responsibilities, one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl PosteriorMatrix {
    /// Builds a matrix from rows; each row must be a probability vector.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Argument("posterior rows must be non-empty and equal length".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (s - 1.0).abs() > 1e-10 {
                return Err(Error::Argument(format!("posterior row {i} is not a probability vector")));
            }
        }
        Ok(Self {
            n: rows.len(),
            k,
            values: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.k];
        for row in self.values.chunks_exact(self.k) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// Keeps the listed columns without renormalizing rows.
    pub(crate) fn select_columns(&self, keep: &[usize]) -> Self {
        let values = self
            .values
            .chunks_exact(self.k)
            .flat_map(|row| keep.iter().map(move |&k| row[k]))
            .collect();
        Self {
            n: self.n,
            k: keep.len(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmSettings {
    pub lambda: f64,
    pub max_iter: usize,
    /// Relative change `|dQ_P| / (|Q_P| + 1)` at which iteration stops.
    pub tol_obj: f64,
    /// Largest absolute parameter change at which iteration stops.
    pub tol_param: f64,
    pub scoring: ScoringOptions,
    /// Proportions at or below this are pruned.
    pub prune_threshold: f64,
    /// Components with fewer effective subjects (`sum_i u_ik`) are pruned.
    pub min_effective_subjects: f64,
    pub phi_floor: f64,
    /// `eps` used only when evaluating the monitored objective.
    pub objective_epsilon: f64,
    /// Holds every dispersion at this value instead of updating it.
    pub fixed_phi: Option<f64>,
    pub seed: u64,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_iter: 500,
            tol_obj: 1e-8,
            tol_param: 1e-6,
            scoring: ScoringOptions::default(),
            prune_threshold: PRUNE_THRESHOLD,
            min_effective_subjects: MIN_EFFECTIVE_SUBJECTS,
            phi_floor: PHI_FLOOR,
            objective_epsilon: 1e-10,
            fixed_phi: None,
            seed: 0,
        }
    }
}

pub const PRUNE_THRESHOLD: f64 = 1e-8;
pub const MIN_EFFECTIVE_SUBJECTS: f64 = 2.0;
pub const PHI_FLOOR: f64 = 1e-8;

impl EmSettings {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_obj", self.tol_obj),
            ("tol_param", self.tol_param),
            ("score_tol", self.scoring.score_tol),
            ("step_tol", self.scoring.step_tol),
            ("phi_floor", self.phi_floor),
            ("objective_epsilon", self.objective_epsilon),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Settings(format!("{name} must be positive, got {v}")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Settings(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.max_iter == 0 || self.scoring.max_steps == 0 {
            return Err(Error::Settings("iteration caps must be positive".into()));
        }
        if let Some(phi) = self.fixed_phi {
            if !(phi > 0.0) {
                return Err(Error::Settings(format!("fixed dispersion must be positive, got {phi}")));
            }
        }
        Ok(())
    }
}

/// Per-visit means `g(x_ij' beta)` with domain checking.
fn subject_means(family: Family, subject: &SubjectBlock, beta: &[f64]) -> Result<Vec<f64>> {
    subject
        .linear_predictor(beta)
        .into_iter()
        .map(|eta| {
            let mu = family.inverse_link(eta);
            family.check_mean(mu).map(|_| mu)
        })
        .collect()
}

/// `sum_j q(g(x_ij' beta); y_ij)` for one subject.
pub fn subject_quasi_loglik(family: Family, subject: &SubjectBlock, beta: &[f64]) -> Result<f64> {
    let means = subject_means(family, subject, beta)?;
    Ok(means.iter().zip(subject.y()).map(|(&mu, &y)| family.q(mu, y)).sum())
}

/// Log-sum-exp of `log_weights`, returning the maximum as well.
pub(crate) fn log_sum_exp(log_weights: &[f64]) -> f64 {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + log_weights.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

/// Log component scores `log pi_k + sum_j q / phi_k` for one subject. With
/// `phi = None` the undispersed `q` is used.
pub(crate) fn component_log_scores(
    family: Family,
    fit: &MixtureFit,
    subject: &SubjectBlock,
    subject_index: usize,
    dispersed: bool,
) -> Result<Vec<f64>> {
    (0..fit.k())
        .map(|k| {
            let s = subject_quasi_loglik(family, subject, &fit.beta[k])?;
            let s = if dispersed { s / fit.phi[k] } else { s };
            if !s.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite quasi-likelihood for subject {subject_index} ({}) in component {k}",
                    subject.id()
                )));
            }
            Ok(fit.pi[k].ln() + s)
        })
        .collect()
}

/// `Q(theta) = sum_i log sum_k pi_k exp{ sum_j q(mu_ijk; y_ij) }`.
pub fn quasi_likelihood(family: Family, data: &LongitudinalDataset, fit: &MixtureFit) -> Result<f64> {
    data.subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| component_log_scores(family, fit, s, i, false).map(|a| log_sum_exp(&a)))
        .sum()
}

/// The log-proportion penalty `n lambda sum_k {log(eps + pi_k) - log eps}`.
pub fn proportion_penalty(n: usize, pi: &[f64], lambda: f64, epsilon: f64) -> f64 {
    n as f64 * lambda * pi.iter().map(|&p| (epsilon + p).ln() - epsilon.ln()).sum::<f64>()
}

pub fn penalized_objective(
    family: Family,
    data: &LongitudinalDataset,
    fit: &MixtureFit,
    lambda: f64,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(quasi_likelihood(family, data, fit)? - proportion_penalty(data.n(), &fit.pi, lambda, epsilon))
}

/// Posterior membership probabilities using the dispersion-scaled `q / phi_k`.
pub fn e_step(family: Family, data: &LongitudinalDataset, fit: &MixtureFit) -> Result<PosteriorMatrix> {
    let k = fit.k();
    let mut values = Vec::with_capacity(data.n() * k);
    for (i, s) in data.subjects().iter().enumerate() {
        let a = component_log_scores(family, fit, s, i, true)?;
        let lse = log_sum_exp(&a);
        if !lse.is_finite() {
            return Err(Error::Numerical(format!(
                "all component weights vanish for subject {i} ({})",
                s.id()
            )));
        }
        values.extend(a.iter().map(|v| (v - lse).exp()));
    }
    Ok(PosteriorMatrix {
        n: data.n(),
        k,
        values,
    })
}

/// Proportion update `pi_k = max{0, (ubar_k - lambda) / (1 - lambda K)}` with
/// the default pruning rules; see [`m_step_pi_with`].
pub fn m_step_pi(u: &PosteriorMatrix, lambda: f64) -> Result<Vec<f64>> {
    m_step_pi_with(u, lambda, PRUNE_THRESHOLD, MIN_EFFECTIVE_SUBJECTS)
}

/// Proportion update. Entries that are truncated at zero, fall at or below
/// `prune_threshold`, or belong to a component with fewer than
/// `min_effective` effective subjects are set to exactly zero, and the
/// survivors are renormalized. When nothing is pruned the raw values are
/// returned untouched (they sum to one analytically).
pub fn m_step_pi_with(
    u: &PosteriorMatrix,
    lambda: f64,
    prune_threshold: f64,
    min_effective: f64,
) -> Result<Vec<f64>> {
    let k = u.k() as f64;
    if lambda * k >= 1.0 {
        return Err(Error::Settings(format!(
            "lambda * K = {} must be below 1 (lambda {lambda}, K {})",
            lambda * k,
            u.k()
        )));
    }
    let n = u.n() as f64;
    let sums = u.column_sums();
    let mut pi: Vec<f64> = sums
        .iter()
        .map(|&s| ((s / n - lambda) / (1.0 - lambda * k)).max(0.0))
        .collect();
    let mut pruned = false;
    for (p, &s) in pi.iter_mut().zip(&sums) {
        if *p <= prune_threshold || s < min_effective {
            *p = 0.0;
            pruned = true;
        }
    }
    if pruned {
        let total: f64 = pi.iter().sum();
        if total <= 0.0 {
            return Err(Error::Collapse);
        }
        pi.iter_mut().for_each(|p| *p /= total);
    }
    Ok(pi)
}

/// Solves the weighted quasi-score equations for every component, starting
/// from the coefficients in `fit`.
pub fn m_step_beta(
    family: Family,
    data: &LongitudinalDataset,
    u: &PosteriorMatrix,
    fit: &MixtureFit,
    scoring: &ScoringOptions,
) -> Result<Vec<Vec<f64>>> {
    (0..u.k())
        .map(|k| m_step_beta_component(family, data, u, fit, scoring, k))
        .collect()
}

fn m_step_beta_component(
    family: Family,
    data: &LongitudinalDataset,
    u: &PosteriorMatrix,
    fit: &MixtureFit,
    scoring: &ScoringOptions,
    k: usize,
) -> Result<Vec<f64>> {
    let weights = u.column(k);
    let effective: f64 = weights
        .iter()
        .zip(data.subjects())
        .map(|(w, s)| w * s.m() as f64)
        .sum();
    if !(effective > 0.0) {
        return Err(Error::RankDeficient { component: k });
    }
    fit_weighted(family, data, &weights, &fit.beta[k], scoring, k)
}

/// Residual-moment dispersions
/// `phi_k = sum_i u_ik sum_j (y_ij - mu_ijk)^2 / V(mu_ijk) / sum_i m_i u_ik`,
/// evaluated at the coefficients in `fit` and floored at `floor`.
pub fn m_step_phi(
    family: Family,
    data: &LongitudinalDataset,
    u: &PosteriorMatrix,
    fit: &MixtureFit,
    floor: f64,
) -> Result<Vec<f64>> {
    (0..u.k())
        .map(|k| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, s) in data.subjects().iter().enumerate() {
                let w = u.get(i, k);
                if w == 0.0 {
                    continue;
                }
                let means = subject_means(family, s, &fit.beta[k])?;
                let pearson: f64 = means
                    .iter()
                    .zip(s.y())
                    .map(|(&mu, &y)| (y - mu).powi(2) / family.variance(mu))
                    .sum();
                num += w * pearson;
                den += w * s.m() as f64;
            }
            let phi = if den > 0.0 { num / den } else { floor };
            Ok(phi.max(floor))
        })
        .collect()
}

fn max_abs_change(a: &MixtureFit, b: &MixtureFit) -> f64 {
    let pairs = a
        .pi
        .iter()
        .zip(&b.pi)
        .chain(a.phi.iter().zip(&b.phi))
        .chain(a.beta.iter().flatten().zip(b.beta.iter().flatten()));
    pairs.fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Runs the modified EM from `init` until the objective or the parameters
/// settle, or the iteration cap is hit.
///
/// Besides zero proportions, a component whose weighted information matrix
/// becomes singular is treated as degenerate and pruned. The returned fit
/// has its components ordered by [`order_labels`].
pub fn fit_em(
    family: Family,
    data: &LongitudinalDataset,
    init: &MixtureFit,
    settings: &EmSettings,
) -> Result<MixtureFit> {
    settings.validate()?;
    init.validate(Some(data.p()))?;
    let lambda = settings.lambda;
    let eps = settings.objective_epsilon;

    let mut fit = init.clone();
    if let Some(phi) = settings.fixed_phi {
        fit.phi.iter_mut().for_each(|v| *v = phi);
    }
    fit.converged = false;
    let mut objective = penalized_objective(family, data, &fit, lambda, eps)?;
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < settings.max_iter {
        iterations += 1;
        let u = e_step(family, data, &fit)?;
        let mut pi = m_step_pi_with(
            &u,
            lambda,
            settings.prune_threshold,
            settings.min_effective_subjects,
        )?;
        let mut keep: Vec<usize> = (0..pi.len()).filter(|&k| pi[k] > 0.0).collect();
        let mut betas = Vec::with_capacity(keep.len());
        let mut degenerate = Vec::new();
        for &k in &keep {
            match m_step_beta_component(family, data, &u, &fit, &settings.scoring, k) {
                Ok(b) => betas.push(b),
                Err(Error::RankDeficient { .. }) => degenerate.push(k),
                Err(e) => return Err(e),
            }
        }
        if !degenerate.is_empty() {
            keep.retain(|k| !degenerate.contains(k));
            if keep.is_empty() {
                return Err(Error::Collapse);
            }
            let total: f64 = keep.iter().map(|&k| pi[k]).sum();
            for &k in &degenerate {
                pi[k] = 0.0;
            }
            pi.iter_mut().for_each(|p| *p /= total);
        }
        let pruned = keep.len() < fit.k();

        let u_kept = u.select_columns(&keep);
        let old = fit.subset(&keep);
        let phi = match settings.fixed_phi {
            Some(v) => vec![v; keep.len()],
            None => m_step_phi(family, data, &u_kept, &old, settings.phi_floor)?,
        };
        let next = MixtureFit {
            pi: keep.iter().map(|&k| pi[k]).collect(),
            beta: betas,
            phi,
            trace: Vec::new(),
            converged: false,
            iterations,
        };
        let next_objective = penalized_objective(family, data, &next, lambda, eps)?;
        trace.push(next_objective);
        let rel_change = (next_objective - objective).abs() / (next_objective.abs() + 1.0);
        let param_change = if pruned { f64::INFINITY } else { max_abs_change(&old, &next) };
        fit = next;
        objective = next_objective;
        if !pruned && (rel_change <= settings.tol_obj || param_change <= settings.tol_param) {
            converged = true;
            break;
        }
    }
    fit.trace = trace;
    fit.converged = converged;
    fit.iterations = iterations;
    Ok(order_labels(&fit))
}
