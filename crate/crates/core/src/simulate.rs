//! Simulation designs, data generators and the Monte Carlo replication
//! harness.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, DiscreteCDF, NegativeBinomial, Normal};

use crate::data::{dot, LongitudinalDataset, SubjectBlock};
use crate::em::{EmSettings, MixtureFit};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::gee::{refine, CorrelationKind, WorkingCorrelation};
use crate::metrics::{bias_mse_table, misclassification, quantile, selection_histogram, ParameterSummary};
use crate::selection::{classify, order_labels_by, select_lambda, GridSpec, LabelOrder, SelectionSettings};

/// Counter-based seed derivation: every stream is a pure function of the
/// master seed and a path of indices, so results do not depend on
/// scheduling.
pub mod seeds {
    /// The SplitMix64 finalizer.
    pub fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn derive(master: u64, index: u64) -> u64 {
        mix(master ^ mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }

    pub const TRAIN: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TEST: u64 = 3;

    /// Seed of replication `r`.
    pub fn replication(master: u64, r: u64) -> u64 {
        derive(derive(master, 0), r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ExampleId {
    Ex1,
    Ex2 { rho: f64 },
    Ex3,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentSpec {
    pub pi: f64,
    pub beta: Vec<f64>,
    /// Variance multiplier: `sigma^2` for gaussian responses, `phi` for counts.
    pub dispersion: f64,
    pub correlation: WorkingCorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CovariateLaw {
    /// Treatment and sex indicators, entry age in `U(30, 80)` and visit time
    /// in months: visit 0 at day 0, then uniform days in fixed windows.
    Example1,
    /// An intercept column followed by `count` covariates drawn `U(0, 1)`
    /// independently at every visit.
    UniformWithIntercept { count: usize },
}

pub const EX1_WINDOWS: [(f64, f64); 5] = [(350.0, 390.0), (710.0, 770.0), (1080.0, 1160.0), (1450.0, 1550.0), (1820.0, 1930.0)];
pub const DAYS_PER_MONTH: f64 = 30.5;

impl CovariateLaw {
    pub fn p(&self) -> usize {
        match self {
            CovariateLaw::Example1 => 4,
            CovariateLaw::UniformWithIntercept { count } => count + 1,
        }
    }

    /// Population mean of the covariate vector.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            CovariateLaw::Example1 => {
                let days: f64 = EX1_WINDOWS.iter().map(|(a, b)| (a + b) / 2.0).sum::<f64>() / 6.0;
                vec![0.5, 55.0, 0.5, days / DAYS_PER_MONTH]
            }
            CovariateLaw::UniformWithIntercept { count } => {
                let mut v = vec![0.5; count + 1];
                v[0] = 1.0;
                v
            }
        }
    }

    fn draw(&self, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        match self {
            CovariateLaw::Example1 => {
                let coin = Bernoulli::new(0.5).expect("valid probability");
                let x1 = f64::from(u8::from(coin.sample(rng)));
                let x2 = rng.random_range(30.0..80.0);
                let x3 = f64::from(u8::from(coin.sample(rng)));
                let mut days = vec![0.0];
                days.extend(EX1_WINDOWS.iter().map(|&(a, b)| rng.random_range(a..b)));
                days.iter()
                    .take(m)
                    .map(|d| vec![x1, x2, x3, d / DAYS_PER_MONTH])
                    .collect()
            }
            CovariateLaw::UniformWithIntercept { count } => (0..m)
                .map(|_| {
                    let mut row = vec![1.0];
                    row.extend((0..*count).map(|_| rng.random::<f64>()));
                    row
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum VisitLaw {
    Fixed(usize),
    /// `min + Poisson(mean)` visits.
    ShiftedPoisson { min: usize, mean: f64 },
}

impl VisitLaw {
    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            VisitLaw::Fixed(m) => m,
            VisitLaw::ShiftedPoisson { min, mean } => {
                let extra: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
                min + extra as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimDesign {
    pub example: ExampleId,
    pub name: String,
    /// Gaussian responses use multivariate normals; poisson responses use a
    /// Gaussian copula with negative binomial margins.
    pub family: Family,
    pub n: usize,
    pub components: Vec<ComponentSpec>,
    pub covariates: CovariateLaw,
    pub visits: VisitLaw,
}

fn corr(kind: CorrelationKind, rho: f64) -> WorkingCorrelation {
    WorkingCorrelation { kind, rho }
}

fn component(pi: f64, beta: &[f64], dispersion: f64, correlation: WorkingCorrelation) -> ComponentSpec {
    ComponentSpec {
        pi,
        beta: beta.to_vec(),
        dispersion,
        correlation,
    }
}

impl SimDesign {
    /// Two gaussian components, `n = 300`, six visits, AR(1)(0.6).
    pub fn example1() -> Self {
        let ar = corr(CorrelationKind::Ar1, 0.6);
        Self {
            example: ExampleId::Ex1,
            name: "ex1".into(),
            family: Family::Gaussian,
            n: 300,
            components: vec![
                component(0.5, &[0.08, -0.01, -0.4, 0.06], 0.5, ar),
                component(0.5, &[-0.1, -0.05, 3.0, 0.3], 0.8, ar),
            ],
            covariates: CovariateLaw::Example1,
            visits: VisitLaw::Fixed(6),
        }
    }

    /// Two overdispersed count components, `n = 150`, AR(1)(`rho`) copula.
    pub fn example2(rho: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::Design(format!("copula correlation {rho} must lie in (-1, 1)")));
        }
        let ar = corr(CorrelationKind::Ar1, rho);
        Ok(Self {
            example: ExampleId::Ex2 { rho },
            name: format!("ex2:{rho}"),
            family: Family::Poisson,
            n: 150,
            components: vec![
                component(1.0 / 3.0, &[0.0, 3.0, -1.0, 1.0], 2.0, ar),
                component(2.0 / 3.0, &[4.0, -2.0, 0.0, 1.0], 1.0, ar),
            ],
            covariates: CovariateLaw::UniformWithIntercept { count: 3 },
            visits: VisitLaw::ShiftedPoisson { min: 2, mean: 3.0 },
        })
    }

    /// Five gaussian components with mixed correlation structures, `n = 500`.
    pub fn example3() -> Self {
        let ar = corr(CorrelationKind::Ar1, 0.6);
        let cs = corr(CorrelationKind::Exchangeable, 0.3);
        let ind = WorkingCorrelation::independence();
        Self {
            example: ExampleId::Ex3,
            name: "ex3".into(),
            family: Family::Gaussian,
            n: 500,
            components: vec![
                component(0.25, &[2.0, 1.0, -1.0, 1.5, 1.0], 0.5, ar),
                component(0.25, &[-4.0, 2.0, 1.0, -2.0, 0.0], 0.3, ar),
                component(0.15, &[-2.0, -2.0, 1.0, 0.0, 1.0], 0.1, cs),
                component(0.15, &[0.0, 1.0, 0.0, 1.0, 1.0], 0.15, cs),
                component(0.2, &[-4.0, 0.0, -1.0, -1.0, -1.5], 0.6, ind),
            ],
            covariates: CovariateLaw::UniformWithIntercept { count: 4 },
            visits: VisitLaw::ShiftedPoisson { min: 2, mean: 3.0 },
        }
    }

    pub fn custom(
        family: Family,
        n: usize,
        components: Vec<ComponentSpec>,
        covariates: CovariateLaw,
        visits: VisitLaw,
    ) -> Result<Self> {
        let design = Self {
            example: ExampleId::Custom,
            name: "custom".into(),
            family,
            n,
            components,
            covariates,
            visits,
        };
        design.validate()?;
        Ok(design)
    }

    /// Parses `ex1`, `ex2:<rho>` or `ex3`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.trim() {
            "ex1" => Ok(Self::example1()),
            "ex3" => Ok(Self::example3()),
            other => match other.strip_prefix("ex2:") {
                Some(r) => Self::example2(
                    r.parse()
                        .map_err(|_| Error::Design(format!("bad correlation in `{other}`")))?,
                ),
                None => Err(Error::Design(format!("unknown example `{other}`"))),
            },
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.p()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.components.is_empty() {
            return Err(Error::Design("need at least one subject and one component".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-12 || self.components.iter().any(|c| !(c.pi > 0.0)) {
            return Err(Error::Design(format!("proportions must be positive and sum to 1, got {total}")));
        }
        let p = self.p();
        for (k, c) in self.components.iter().enumerate() {
            if c.beta.len() != p {
                return Err(Error::Design(format!("component {k} has {} coefficients, expected {p}", c.beta.len())));
            }
            match self.family {
                Family::Gaussian if !(c.dispersion >= 0.0) => {
                    return Err(Error::Design(format!("component {k}: variance must be non-negative")));
                }
                Family::Poisson if !(c.dispersion >= 1.0) => {
                    return Err(Error::Design(format!(
                        "component {k}: dispersion {} below 1 cannot be generated with negative binomial margins",
                        c.dispersion
                    )));
                }
                Family::Binomial => {
                    return Err(Error::Design("binomial responses have no generator".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The generating parameters as a mixture fit (unordered).
    pub fn truth(&self) -> MixtureFit {
        MixtureFit {
            pi: self.components.iter().map(|c| c.pi).collect(),
            beta: self.components.iter().map(|c| c.beta.clone()).collect(),
            phi: self.components.iter().map(|c| c.dispersion.max(crate::em::PHI_FLOOR)).collect(),
            trace: Vec::new(),
            converged: true,
            iterations: 0,
        }
    }

    /// Components are ordered by their linear predictor at the population
    /// covariate mean, which separates every built-in design.
    pub fn label_order(&self) -> LabelOrder {
        LabelOrder::LinearPredictorAt(self.covariates.mean())
    }

    /// Default working correlation for the refinement step.
    pub fn refine_kind(&self) -> CorrelationKind {
        match self.example {
            ExampleId::Ex3 | ExampleId::Custom => self.components[0].correlation.kind,
            _ => CorrelationKind::Ar1,
        }
    }
}

/// A generated dataset with its true labels and true means.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub data: LongitudinalDataset,
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

fn draw_label(pis: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in pis.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pis.len() - 1
}

fn correlated_normals(c: &WorkingCorrelation, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !c.is_positive_definite(m) {
        return Err(Error::Design(format!(
            "{} correlation {} is not positive definite for {m} visits",
            c.kind, c.rho
        )));
    }
    let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
    if c.kind == CorrelationKind::Independence {
        return Ok(z.iter().copied().collect());
    }
    let l = c
        .matrix(m)
        .cholesky()
        .ok_or_else(|| Error::Design(format!("{} correlation {} failed to factor", c.kind, c.rho)))?
        .l();
    Ok((l * z).iter().copied().collect())
}

/// Inverse CDF of the count margin with mean `mu` and variance `phi mu`.
fn count_quantile(u: f64, mu: f64, phi: f64) -> Result<f64> {
    let u = u.clamp(1e-15, 1.0 - 1e-15);
    if phi == 1.0 {
        let d = statrs::distribution::Poisson::new(mu).map_err(|e| Error::Design(e.to_string()))?;
        Ok(d.inverse_cdf(u) as f64)
    } else {
        let r = mu / (phi - 1.0);
        let d = NegativeBinomial::new(r, 1.0 / phi).map_err(|e| Error::Design(e.to_string()))?;
        Ok(d.inverse_cdf(u) as f64)
    }
}

fn generate_subjects(design: &SimDesign, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<SimulatedData> {
    design.validate()?;
    let normal = Normal::standard();
    let mut subjects = Vec::with_capacity(labels.len());
    let mut means = Vec::with_capacity(labels.len());
    for (i, &k) in labels.iter().enumerate() {
        let c = &design.components[k];
        let m = design.visits.draw(rng);
        let rows = design.covariates.draw(m, rng);
        let mu: Vec<f64> = rows.iter().map(|r| design.family.inverse_link(dot(r, &c.beta))).collect();
        let z = correlated_normals(&c.correlation, rows.len(), rng)?;
        let y = match design.family {
            Family::Gaussian => {
                let sd = c.dispersion.sqrt();
                mu.iter().zip(&z).map(|(m, z)| m + sd * z).collect()
            }
            _ => mu
                .iter()
                .zip(&z)
                .map(|(&m, &z)| count_quantile(normal.cdf(z), m, c.dispersion))
                .collect::<Result<Vec<_>>>()?,
        };
        subjects.push(SubjectBlock::new(format!("s{i}"), y, rows)?);
        means.push(mu);
    }
    let names = (1..=design.p()).map(|j| format!("x{j}")).collect();
    Ok(SimulatedData {
        data: LongitudinalDataset::with_names(subjects, names, "id".into(), "y".into())?,
        labels: labels.to_vec(),
        means,
    })
}

/// Draws a training set of `design.n` subjects with categorical labels.
pub fn generate(design: &SimDesign, seed: u64) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pis: Vec<f64> = design.components.iter().map(|c| c.pi).collect();
    let labels: Vec<usize> = (0..design.n).map(|_| draw_label(&pis, &mut rng)).collect();
    generate_subjects(design, &labels, &mut rng)
}

pub fn gen_gaussian_mixture(design: &SimDesign, seed: u64) -> Result<SimulatedData> {
    if design.family != Family::Gaussian {
        return Err(Error::Design(format!("{} is not a gaussian design", design.name)));
    }
    generate(design, seed)
}

pub fn gen_count_mixture(design: &SimDesign, seed: u64) -> Result<SimulatedData> {
    if design.family != Family::Poisson {
        return Err(Error::Design(format!("{} is not a count design", design.name)));
    }
    generate(design, seed)
}

/// A test set with exactly `per_component` subjects from each component.
pub fn generate_test_set(design: &SimDesign, per_component: usize, seed: u64) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..design.k()).flat_map(|k| std::iter::repeat_n(k, per_component)).collect();
    generate_subjects(design, &labels, &mut rng)
}

/// Lag-1 correlation of standardized residuals `(y - mu) / sqrt(phi V(mu))`
/// under the generating parameters.
pub fn achieved_lag1_correlation(design: &SimDesign, sim: &SimulatedData) -> Option<f64> {
    let (mut num, mut den_a, mut den_b) = (0.0, 0.0, 0.0);
    for ((s, mu), &k) in sim.data.subjects().iter().zip(&sim.means).zip(&sim.labels) {
        let phi = design.components[k].dispersion;
        if phi <= 0.0 {
            continue;
        }
        let e: Vec<f64> = s
            .y()
            .iter()
            .zip(mu)
            .map(|(y, m)| (y - m) / (phi * design.family.variance(*m)).sqrt())
            .collect();
        for w in e.windows(2) {
            num += w[0] * w[1];
            den_a += w[0] * w[0];
            den_b += w[1] * w[1];
        }
    }
    let den = (den_a * den_b).sqrt();
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub k_init: usize,
    pub grid: GridSpec,
    pub em: EmSettings,
    /// Working correlation of the refinement step; `None` skips it.
    pub refine: Option<CorrelationKind>,
    pub test_per_component: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k_init: 10,
            grid: GridSpec::Auto,
            em: EmSettings::default(),
            refine: Some(CorrelationKind::Ar1),
            test_per_component: 100,
        }
    }
}

/// Layout `beta[1][1..p], ..., beta[K][1..p], phi[1..K], pi[1..K]`.
pub fn parameter_vector(beta: &[Vec<f64>], phi: &[f64], pi: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = beta.iter().flatten().copied().collect();
    v.extend(phi);
    v.extend(pi);
    v
}

pub fn parameter_names(k: usize, p: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(k * (p + 2));
    for c in 1..=k {
        for j in 1..=p {
            names.push(format!("beta[{c}][{j}]"));
        }
    }
    names.extend((1..=k).map(|c| format!("phi[{c}]")));
    names.extend((1..=k).map(|c| format!("pi[{c}]")));
    names
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationOutcome {
    pub index: usize,
    pub seed: u64,
    pub k_hat: Option<usize>,
    pub lambda: Option<f64>,
    pub converged: Option<bool>,
    pub error: Option<String>,
    /// Ordered estimates; present when `k_hat` equals the true `K`.
    pub pql: Option<Vec<f64>>,
    pub pql2: Option<Vec<f64>>,
    pub misclassification_pql: Option<f64>,
    pub misclassification_pql2: Option<f64>,
    pub achieved_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MisclassificationSummary {
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub count: usize,
}

impl MisclassificationSummary {
    fn from_rates(rates: &[f64]) -> Option<Self> {
        Some(Self {
            median: quantile(rates, 0.5)?,
            q025: quantile(rates, 0.025)?,
            q975: quantile(rates, 0.975)?,
            count: rates.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationReport {
    pub design: String,
    pub k_true: usize,
    pub replications: Vec<ReplicationOutcome>,
    /// `(K, count)` over successful replications.
    pub histogram: Vec<(usize, usize)>,
    pub failures: usize,
    pub truth: Vec<f64>,
    pub parameter_names: Vec<String>,
    pub pql: Option<Vec<ParameterSummary>>,
    pub pql2: Option<Vec<ParameterSummary>>,
    pub misclassification_pql: Option<MisclassificationSummary>,
    pub misclassification_pql2: Option<MisclassificationSummary>,
    pub achieved_rho: Option<f64>,
}

impl ReplicationReport {
    /// Share of all replications that selected the true number of components.
    pub fn selection_rate(&self) -> f64 {
        let hits = self.replications.iter().filter(|r| r.k_hat == Some(self.k_true)).count();
        hits as f64 / self.replications.len() as f64
    }
}

fn misclassify(family: Family, fit: &MixtureFit, test: &SimulatedData) -> Result<f64> {
    let predicted = test
        .data
        .subjects()
        .iter()
        .map(|s| classify(family, fit, s).map(|c| c.class))
        .collect::<Result<Vec<_>>>()?;
    misclassification(&test.labels, &predicted, fit.k(), fit.k())?
        .rate()
        .ok_or_else(|| Error::Numerical("class counts differ".into()))
}

/// One replication: generate, select, order, refine and evaluate.
pub fn run_replication(design: &SimDesign, config: &FitConfig, master_seed: u64, index: usize) -> ReplicationOutcome {
    let seed = seeds::replication(master_seed, index as u64);
    let mut outcome = ReplicationOutcome {
        index,
        seed,
        k_hat: None,
        lambda: None,
        converged: None,
        error: None,
        pql: None,
        pql2: None,
        misclassification_pql: None,
        misclassification_pql2: None,
        achieved_rho: None,
    };
    if let Err(e) = replication_body(design, config, seed, &mut outcome) {
        outcome.error = Some(e.to_string());
    }
    outcome
}

fn replication_body(design: &SimDesign, config: &FitConfig, seed: u64, out: &mut ReplicationOutcome) -> Result<()> {
    let train = generate(design, seeds::derive(seed, seeds::TRAIN))?;
    out.achieved_rho = achieved_lag1_correlation(design, &train);
    let k_init = config.k_init.min(train.data.n());
    let grid = config.grid.resolve(train.data.n(), k_init)?;
    let settings = SelectionSettings {
        k_init,
        seed: seeds::derive(seed, seeds::INIT),
        em: config.em.clone(),
    };
    let selected = select_lambda(design.family, &train.data, &grid, &settings)?;
    let fit = order_labels_by(&selected.fit, &design.label_order());
    out.k_hat = Some(fit.k());
    out.lambda = Some(selected.lambda);
    out.converged = Some(fit.converged);
    if fit.k() != design.k() {
        return Ok(());
    }
    out.pql = Some(parameter_vector(&fit.beta, &fit.phi, &fit.pi));
    let test = generate_test_set(design, config.test_per_component, seeds::derive(seed, seeds::TEST))?;
    if config.test_per_component > 0 {
        out.misclassification_pql = Some(misclassify(design.family, &fit, &test)?);
    }
    if let Some(kind) = config.refine {
        let refined = refine(design.family, &train.data, &fit, kind)?;
        out.pql2 = Some(parameter_vector(&refined.beta, &refined.phi, &refined.pi));
        if config.test_per_component > 0 {
            let as_fit = MixtureFit {
                pi: refined.pi.clone(),
                beta: refined.beta.clone(),
                phi: refined.phi.clone(),
                trace: Vec::new(),
                converged: true,
                iterations: 0,
            };
            out.misclassification_pql2 = Some(misclassify(design.family, &as_fit, &test)?);
        }
    }
    Ok(())
}

/// Runs `reps` replications (in parallel) and aggregates them. Bias, MSE and
/// misclassification use only replications that selected the true `K`.
pub fn run_replications(design: &SimDesign, reps: usize, config: &FitConfig, master_seed: u64) -> Result<ReplicationReport> {
    if reps == 0 {
        return Err(Error::Argument("need at least one replication".into()));
    }
    design.validate()?;
    let replications: Vec<ReplicationOutcome> = (0..reps)
        .into_par_iter()
        .map(|r| run_replication(design, config, master_seed, r))
        .collect();
    Ok(aggregate(design, replications))
}

pub fn aggregate(design: &SimDesign, replications: Vec<ReplicationOutcome>) -> ReplicationReport {
    let k = design.k();
    let truth_fit = order_labels_by(&design.truth(), &design.label_order());
    let truth_phi: Vec<f64> = {
        // Keep zero variances as zero rather than the floor.
        let perm = design.label_order().permutation(&design.truth());
        perm.iter().map(|&c| design.components[c].dispersion).collect()
    };
    let truth = parameter_vector(&truth_fit.beta, &truth_phi, &truth_fit.pi);
    let names = parameter_names(k, design.p());

    let hits: Vec<&ReplicationOutcome> = replications.iter().filter(|r| r.k_hat == Some(k)).collect();
    let pql: Vec<Vec<f64>> = hits.iter().filter_map(|r| r.pql.clone()).collect();
    let pql2: Vec<Vec<f64>> = hits.iter().filter_map(|r| r.pql2.clone()).collect();
    let rates: Vec<f64> = hits.iter().filter_map(|r| r.misclassification_pql).collect();
    let rates2: Vec<f64> = hits.iter().filter_map(|r| r.misclassification_pql2).collect();
    let selected: Vec<usize> = replications.iter().filter_map(|r| r.k_hat).collect();
    let rhos: Vec<f64> = replications.iter().filter_map(|r| r.achieved_rho).collect();
    ReplicationReport {
        design: design.name.clone(),
        k_true: k,
        histogram: selection_histogram(&selected),
        failures: replications.iter().filter(|r| r.error.is_some()).count(),
        pql: bias_mse_table(&pql, &truth, &names).ok().flatten(),
        pql2: bias_mse_table(&pql2, &truth, &names).ok().flatten(),
        misclassification_pql: MisclassificationSummary::from_rates(&rates),
        misclassification_pql2: MisclassificationSummary::from_rates(&rates2),
        achieved_rho: (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
        truth,
        parameter_names: names,
        replications,
    }
}
