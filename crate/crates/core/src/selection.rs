//! Initialization, tuning-parameter selection by BIC, label ordering and
//! classification.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dot, LongitudinalDataset, SubjectBlock};
use crate::em::{component_log_scores, fit_em, log_sum_exp, m_step_phi, EmSettings, MixtureFit, PosteriorMatrix};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::glm::{fit_weighted, naive_start, ScoringOptions};
use crate::kmeans::{kmeans, KMeansOptions};

/// Rule that fixes the order of mixture components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum LabelOrder {
    /// Ascending first coefficient, then second coefficient, then descending
    /// proportion.
    #[default]
    Coefficients,
    /// Ascending linear predictor at a reference covariate vector, then
    /// descending proportion.
    LinearPredictorAt(Vec<f64>),
}

impl LabelOrder {
    fn compare(&self, fit: &MixtureFit, a: usize, b: usize) -> Ordering {
        let primary = match self {
            LabelOrder::Coefficients => {
                let (ba, bb) = (&fit.beta[a], &fit.beta[b]);
                ba[0].total_cmp(&bb[0]).then_with(|| match (ba.get(1), bb.get(1)) {
                    (Some(x), Some(y)) => x.total_cmp(y),
                    _ => Ordering::Equal,
                })
            }
            LabelOrder::LinearPredictorAt(x) => dot(x, &fit.beta[a]).total_cmp(&dot(x, &fit.beta[b])),
        };
        primary.then_with(|| fit.pi[b].total_cmp(&fit.pi[a]))
    }

    /// Component indices in sorted order.
    pub fn permutation(&self, fit: &MixtureFit) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..fit.k()).collect();
        idx.sort_by(|&a, &b| self.compare(fit, a, b));
        idx
    }
}

pub fn order_labels(fit: &MixtureFit) -> MixtureFit {
    order_labels_by(fit, &LabelOrder::Coefficients)
}

/// Reorders components (proportions, coefficients and dispersions together).
pub fn order_labels_by(fit: &MixtureFit, order: &LabelOrder) -> MixtureFit {
    let perm = order.permutation(fit);
    MixtureFit {
        pi: perm.iter().map(|&k| fit.pi[k]).collect(),
        beta: perm.iter().map(|&k| fit.beta[k].clone()).collect(),
        phi: perm.iter().map(|&k| fit.phi[k]).collect(),
        trace: fit.trace.clone(),
        converged: fit.converged,
        iterations: fit.iterations,
    }
}

/// Per-subject features for clustering: individual quasi-GLM coefficients
/// when every subject supports its own fit, otherwise the within-subject
/// mean and standard deviation of the response (zero-padded to `p`). Features
/// stay on the response scale: the standard deviation of a few visits is
/// noisy and would dominate after standardization.
fn subject_features(family: Family, data: &LongitudinalDataset) -> Vec<Vec<f64>> {
    let p = data.p();
    if data.subjects().iter().all(|s| s.m() > p) {
        let opts = ScoringOptions::default();
        let coefficients: Option<Vec<Vec<f64>>> = (0..data.n())
            .map(|i| {
                let single = data.select(&[i]).ok()?;
                let start = naive_start(family, &single, &[1.0]);
                fit_weighted(family, &single, &[1.0], &start, &opts, 0).ok()
            })
            .collect();
        if let Some(c) = coefficients {
            return c;
        }
    }
    data.subjects()
        .iter()
        .map(|s| {
            let m = s.m() as f64;
            let mean = s.y().iter().sum::<f64>() / m;
            let sd = (s.y().iter().map(|y| (y - mean).powi(2)).sum::<f64>() / m).sqrt();
            let mut f = vec![0.0; p.max(2)];
            f[0] = mean;
            f[1] = sd;
            f
        })
        .collect()
}

pub const INIT_RIDGE: f64 = 1e-6;

/// Starting values for the EM: k-means on per-subject features, then a
/// quasi-GLM per cluster.
///
/// Proportions come from cluster sizes floored at `1 / (2n)`; dispersions
/// are per-cluster residual moments. A cluster whose own fit is singular
/// is refit with a tiny ridge and, failing that, borrows the pooled
/// coefficients.
pub fn init_kmeans(family: Family, data: &LongitudinalDataset, k_init: usize, seed: u64) -> Result<MixtureFit> {
    let n = data.n();
    if k_init == 0 || k_init > n {
        return Err(Error::Argument(format!(
            "initial number of components {k_init} must be between 1 and n = {n}"
        )));
    }
    let labels = if k_init == 1 {
        vec![0; n]
    } else {
        let features = subject_features(family, data);
        kmeans(&features, k_init, &KMeansOptions::default(), seed)?.labels
    };

    let opts = ScoringOptions::default();
    let ridged = ScoringOptions {
        ridge: INIT_RIDGE,
        ..opts
    };
    let ones = vec![1.0; n];
    let pooled = fit_weighted(family, data, &ones, &naive_start(family, data, &ones), &opts, 0)?;

    let mut beta = Vec::with_capacity(k_init);
    let mut rows = vec![vec![0.0; k_init]; n];
    for (row, &l) in rows.iter_mut().zip(&labels) {
        row[l] = 1.0;
    }
    let u = PosteriorMatrix::from_rows(&rows)?;
    for k in 0..k_init {
        let w = u.column(k);
        // Clusters can leave a covariate constant (an indicator that is zero
        // throughout, say); a tiny ridge pins its coefficient at zero.
        let fitted = fit_weighted(family, data, &w, &pooled, &opts, k)
            .or_else(|_| fit_weighted(family, data, &w, &pooled, &ridged, k));
        beta.push(fitted.unwrap_or_else(|_| pooled.clone()));
    }
    let floor = 1.0 / (2.0 * n as f64);
    let sizes = u.column_sums();
    let raw: Vec<f64> = sizes.iter().map(|s| (s / n as f64).max(floor)).collect();
    let total: f64 = raw.iter().sum();
    let pi = raw.iter().map(|v| v / total).collect();
    let provisional = MixtureFit {
        pi,
        beta,
        phi: vec![1.0; k_init],
        trace: Vec::new(),
        converged: false,
        iterations: 0,
    };
    let phi = m_step_phi(family, data, &u, &provisional, crate::em::PHI_FLOOR)?;
    Ok(MixtureFit { phi, ..provisional })
}

/// Ordered, strictly increasing set of non-negative tuning parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Settings("lambda grid is empty".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Settings(format!("lambda values must be non-negative: {values:?}")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Settings(format!("lambda grid must be strictly increasing: {values:?}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Errors when some `lambda * k_init >= 1`.
    pub fn check_components(&self, k_init: usize) -> Result<()> {
        match self.values.iter().find(|&&l| l * k_init as f64 >= 1.0) {
            Some(l) => Err(Error::Settings(format!(
                "lambda {l} times K_init {k_init} must be below 1"
            ))),
            None => Ok(()),
        }
    }
}

pub const GRID_POINTS: usize = 20;
pub const GRID_A_MIN: f64 = 0.05;
pub const GRID_A_MAX: f64 = 5.0;

/// `lambda_j = a_j / sqrt(n)` with `a_j` log-spaced on `[0.05, 5]`, keeping
/// only values with `lambda_j * k_init < 0.99`.
pub fn default_lambda_grid(n: usize, k_init: usize) -> Result<LambdaGrid> {
    if n < 2 {
        return Err(Error::Argument(format!("need at least two subjects, got {n}")));
    }
    let ratio = (GRID_A_MAX / GRID_A_MIN).ln() / (GRID_POINTS - 1) as f64;
    let root = (n as f64).sqrt();
    let values: Vec<f64> = (0..GRID_POINTS)
        .map(|j| GRID_A_MIN * (ratio * j as f64).exp() / root)
        .filter(|l| l * (k_init as f64) < 0.99)
        .collect();
    LambdaGrid::new(values)
}

/// How the tuning-parameter grid is chosen.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum GridSpec {
    #[default]
    Auto,
    Values(Vec<f64>),
}

impl GridSpec {
    pub fn resolve(&self, n: usize, k_init: usize) -> Result<LambdaGrid> {
        match self {
            GridSpec::Auto => default_lambda_grid(n, k_init),
            GridSpec::Values(v) => LambdaGrid::new(v.clone()),
        }
    }
}

impl std::fmt::Display for GridSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridSpec::Auto => f.write_str("auto"),
            GridSpec::Values(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(GridSpec::Auto);
        }
        let values = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Settings(format!("bad lambda value `{t}` in grid")))
            })
            .collect::<Result<Vec<_>>>()?;
        LambdaGrid::new(values.clone())?;
        Ok(GridSpec::Values(values))
    }
}

/// The two terms of the BIC: `-2 sum_i log[...]` and `K (p + 2) log n`.
pub fn bic_terms(family: Family, data: &LongitudinalDataset, fit: &MixtureFit) -> Result<(f64, f64)> {
    let mut fit_term = 0.0;
    for (i, s) in data.subjects().iter().enumerate() {
        fit_term += log_sum_exp(&component_log_scores(family, fit, s, i, true)?);
    }
    let penalty = (fit.k() * (data.p() + 2)) as f64 * (data.n() as f64).ln();
    Ok((-2.0 * fit_term, penalty))
}

pub fn bic(family: Family, data: &LongitudinalDataset, fit: &MixtureFit) -> Result<f64> {
    bic_terms(family, data, fit).map(|(a, b)| a + b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSettings {
    pub k_init: usize,
    pub seed: u64,
    /// Template for every per-lambda fit; its `lambda` is overwritten.
    pub em: EmSettings,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self {
            k_init: 10,
            seed: 0,
            em: EmSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub k: Option<usize>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub lambda: f64,
    pub fit: MixtureFit,
    pub bic: f64,
    pub table: Vec<LambdaRow>,
    pub init: MixtureFit,
}

/// Fits every grid point from one shared k-means start and keeps the fit
/// with the smallest BIC among converged rows (larger lambda on ties).
pub fn select_lambda(
    family: Family,
    data: &LongitudinalDataset,
    grid: &LambdaGrid,
    settings: &SelectionSettings,
) -> Result<SelectionResult> {
    grid.check_components(settings.k_init)?;
    settings.em.validate()?;
    let init = init_kmeans(family, data, settings.k_init, settings.seed)?;

    let fits: Vec<Result<(MixtureFit, f64)>> = grid
        .values()
        .par_iter()
        .map(|&lambda| {
            let em = EmSettings {
                lambda,
                ..settings.em.clone()
            };
            let fit = fit_em(family, data, &init, &em)?;
            let b = bic(family, data, &fit)?;
            Ok((fit, b))
        })
        .collect();

    let table: Vec<LambdaRow> = grid
        .values()
        .iter()
        .zip(&fits)
        .map(|(&lambda, r)| match r {
            Ok((fit, b)) => LambdaRow {
                lambda,
                k: Some(fit.k()),
                bic: Some(*b),
                converged: fit.converged,
                error: None,
            },
            Err(e) => LambdaRow {
                lambda,
                k: None,
                bic: None,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let pick = |require_converged: bool| {
        let mut best: Option<usize> = None;
        for (i, r) in fits.iter().enumerate() {
            let Ok((fit, b)) = r else { continue };
            if require_converged && !fit.converged {
                continue;
            }
            // Later grid points carry larger lambda, so `<=` breaks ties toward them.
            if best.is_none_or(|j| *b <= fits[j].as_ref().map(|x| x.1).unwrap_or(f64::INFINITY)) {
                best = Some(i);
            }
        }
        best
    };
    let Some(best) = pick(true).or_else(|| pick(false)) else {
        return Err(Error::AllLambdaFailed(
            table
                .iter()
                .map(|r| format!("lambda {}: {}", r.lambda, r.error.as_deref().unwrap_or("unknown")))
                .collect(),
        ));
    };
    let (fit, b) = fits[best].as_ref().map_err(Clone::clone)?.clone();
    Ok(SelectionResult {
        lambda: grid.values()[best],
        fit,
        bic: b,
        table,
        init,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub posterior: Vec<f64>,
}

/// Assigns a subject to the component with the largest empirical posterior
/// (lowest index on ties).
pub fn classify(family: Family, fit: &MixtureFit, subject: &SubjectBlock) -> Result<Classification> {
    if subject.p() != fit.p() {
        return Err(Error::Argument(format!(
            "subject {} has {} covariates, the fit expects {}",
            subject.id(),
            subject.p(),
            fit.p()
        )));
    }
    let scores = component_log_scores(family, fit, subject, 0, true)?;
    Ok(classify_scores(&scores))
}

/// Argmax and normalized posterior of log component scores.
pub fn classify_scores(scores: &[f64]) -> Classification {
    let mut class = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[class] {
            class = k;
        }
    }
    let lse = log_sum_exp(scores);
    Classification {
        class,
        posterior: scores.iter().map(|s| (s - lse).exp()).collect(),
    }
}

pub fn classify_all(family: Family, fit: &MixtureFit, data: &LongitudinalDataset) -> Result<Vec<usize>> {
    data.subjects()
        .iter()
        .map(|s| classify(family, fit, s).map(|c| c.class))
        .collect()
}

/// Predicted mean response of a subject under its assigned component.
pub fn predict(family: Family, fit: &MixtureFit, subject: &SubjectBlock) -> Result<Vec<f64>> {
    let c = classify(family, fit, subject)?;
    Ok(subject
        .linear_predictor(&fit.beta[c.class])
        .into_iter()
        .map(|eta| family.inverse_link(eta))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fit3() -> MixtureFit {
        MixtureFit::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![3.0, 1.0], vec![-1.0, 2.0], vec![3.0, 0.0]],
            vec![1.0, 2.0, 3.0],
        )
        .unwrap()
    }

    #[test]
    fn ordering_definition_and_idempotence() {
        let fit = MixtureFit::new(vec![0.4, 0.6], vec![vec![3.0, 0.0], vec![-1.0, 0.0]], vec![0.5, 0.8]).unwrap();
        let o = order_labels(&fit);
        assert_eq!(o.beta, vec![vec![-1.0, 0.0], vec![3.0, 0.0]]);
        assert_eq!(o.pi, vec![0.6, 0.4]);
        assert_eq!(o.phi, vec![0.8, 0.5]);
        assert_eq!(order_labels(&o), o);

        let o3 = order_labels(&fit3());
        assert_eq!(o3.beta, vec![vec![-1.0, 2.0], vec![3.0, 0.0], vec![3.0, 1.0]]);
    }

    #[test]
    fn ties_fall_back_to_proportion() {
        let fit = MixtureFit::new(vec![0.3, 0.7], vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![1.0, 1.0]).unwrap();
        assert_eq!(order_labels(&fit).pi, vec![0.7, 0.3]);
    }

    #[test]
    fn grid_rule() {
        let g = default_lambda_grid(300, 10).unwrap();
        assert_eq!(g.len(), 15);
        assert!(g.values().iter().all(|l| l * 10.0 < 0.99));
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
        assert!((g.values()[0] - 0.05 / 300f64.sqrt()).abs() < 1e-15);
        assert_eq!(default_lambda_grid(300, 1).unwrap().len(), 20);
        let big = default_lambda_grid(1_000_000, 1).unwrap();
        assert!(big.values().last().unwrap() < &0.006);
        assert!(default_lambda_grid(1, 1).is_err());
    }

    #[test]
    fn lambda_grid_validation() {
        assert!(LambdaGrid::new(vec![0.1, 0.1]).is_err());
        assert!(LambdaGrid::new(vec![-0.1]).is_err());
        assert!(LambdaGrid::new(vec![]).is_err());
        assert!(LambdaGrid::new(vec![0.0, 0.2]).unwrap().check_components(5).is_err());
    }

    #[test]
    fn classify_examples() {
        let s = SubjectBlock::new("a", vec![1.0], vec![vec![1.0, 0.0]]).unwrap();
        let one = MixtureFit::new(vec![1.0], vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        let c = classify(Family::Gaussian, &one, &s).unwrap();
        assert_eq!((c.class, c.posterior), (0, vec![1.0]));

        let sym = MixtureFit::new(vec![0.5, 0.5], vec![vec![0.0, 0.0], vec![2.0, 0.0]], vec![1.0, 1.0]).unwrap();
        let c = classify(Family::Gaussian, &sym, &s).unwrap();
        assert_eq!(c.class, 0);
        assert_eq!(c.posterior, vec![0.5, 0.5]);

        let wrong = SubjectBlock::new("b", vec![1.0], vec![vec![1.0, 0.0, 2.0]]).unwrap();
        assert!(matches!(classify(Family::Gaussian, &sym, &wrong), Err(Error::Argument(_))));
    }

    #[test]
    fn bic_penalty_arithmetic() {
        let subjects = (0..300)
            .map(|i| SubjectBlock::new(i.to_string(), vec![1.0], vec![vec![1.0, 0.0, 0.0, 0.0]]).unwrap())
            .collect();
        let d = LongitudinalDataset::from_subjects(subjects).unwrap();
        let fit = MixtureFit::new(vec![0.5, 0.5], vec![vec![1.0, 0.0, 0.0, 0.0]; 2], vec![1.0, 1.0]).unwrap();
        let (_, penalty) = bic_terms(Family::Gaussian, &d, &fit).unwrap();
        assert!((penalty - 12.0 * 300f64.ln()).abs() < 1e-12);
        assert!((penalty - 68.45).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn ordering_is_permutation_equivariant(perm_seed in 0usize..6) {
            let perms = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let base = fit3();
            let p = perms[perm_seed];
            let shuffled = MixtureFit {
                pi: p.iter().map(|&k| base.pi[k]).collect(),
                beta: p.iter().map(|&k| base.beta[k].clone()).collect(),
                phi: p.iter().map(|&k| base.phi[k]).collect(),
                ..base.clone()
            };
            prop_assert_eq!(order_labels(&shuffled), order_labels(&base));
        }

        #[test]
        fn shifting_scores_keeps_decision(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -1e3f64..1e3) {
            let base = classify_scores(&[a, b]);
            let shifted = classify_scores(&[a + c, b + c]);
            prop_assert_eq!(base.class, shifted.class);
            for (x, y) in base.posterior.iter().zip(&shifted.posterior) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
