//! Oracle and property checks shared by the `properties` and `acceptance`
//! targets. Every check panics on failure.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use quasimix::em::{e_step, m_step_pi};
use quasimix::gee::{gee_fit, refine, CorrelationKind};
use quasimix::glm::{fit_weighted, ScoringOptions};
use quasimix::metrics::misclassification;
use quasimix::sandwich::{pack_parameters, sandwich_covariance, subject_gradient, subject_log_psi};
use quasimix::selection::{init_kmeans, order_labels, order_labels_by, LabelOrder};
use quasimix::simulate::{generate, SimDesign};
use quasimix::{fit_em, EmSettings, Family, LongitudinalDataset, MixtureFit, PosteriorMatrix, SubjectBlock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = (&'static str, fn());

pub const CHECKS: &[Check] = &[
    ("quasi-score finite difference", quasi_score_finite_difference),
    ("e-step row normalization", e_step_rows_normalize),
    ("proportion update sums to one", proportion_update_sums_to_one),
    ("monotone ascent at lambda 0, phi 1", monotone_ascent_gaussian),
    ("ols oracle", ols_oracle),
    ("gee independence oracle", gee_independence_oracle),
    ("refine independence oracle", refine_independence_oracle),
    ("sandwich gradient finite difference", sandwich_gradient_finite_difference),
    ("sandwich matches classical robust covariance", sandwich_matches_classical),
    ("label ordering idempotence", label_ordering_idempotent),
    ("misclassification permutation invariance", misclassification_permutation_invariant),
    ("generator seed determinism", generator_determinism),
];

pub fn random_dataset(rng: &mut ChaCha8Rng, family: Family, n: usize, p: usize, beta: &[f64]) -> LongitudinalDataset {
    let subjects = (0..n)
        .map(|i| {
            let m = rng.random_range(1..6);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    let mut r = vec![1.0];
                    r.extend((1..p).map(|_| rng.random_range(-1.0..1.0)));
                    r
                })
                .collect();
            let y = rows
                .iter()
                .map(|r| {
                    let eta: f64 = r.iter().zip(beta).map(|(a, b)| a * b).sum();
                    let mu = family.inverse_link(eta);
                    match family {
                        Family::Gaussian => mu + rng.random_range(-1.0..1.0),
                        Family::Poisson => (mu + rng.random_range(-0.5..2.0) * mu.sqrt()).round().max(0.0),
                        Family::Binomial => f64::from(u8::from(rng.random::<f64>() < mu)),
                    }
                })
                .collect();
            SubjectBlock::new(format!("s{i}"), y, rows).unwrap()
        })
        .collect();
    LongitudinalDataset::from_subjects(subjects).unwrap()
}

pub fn quasi_score_finite_difference() {
    let cases: &[(Family, &[f64], &[f64])] = &[
        (Family::Gaussian, &[-3.0, 0.0, 0.7, 5.0], &[-2.0, 0.0, 1.5]),
        (Family::Poisson, &[0.2, 1.0, 3.5, 20.0], &[0.0, 1.0, 4.0, 17.0]),
        (Family::Binomial, &[0.05, 0.3, 0.5, 0.9], &[0.0, 0.4, 1.0]),
    ];
    for &(family, mus, ys) in cases {
        for &mu in mus {
            for &y in ys {
                let h = 1e-6 * mu.abs().max(1e-2);
                let fd = (family.quasi_log_density(mu + h, y).unwrap() - family.quasi_log_density(mu - h, y).unwrap())
                    / (2.0 * h);
                let exact = (y - mu) / family.variance(mu);
                assert!(
                    (fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()),
                    "{family} mu {mu} y {y}: {fd} vs {exact}"
                );
            }
        }
    }
}

fn random_fit(rng: &mut ChaCha8Rng, k: usize, p: usize) -> MixtureFit {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    MixtureFit::new(
        raw.iter().map(|v| v / total).collect(),
        (0..k).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        (0..k).map(|_| rng.random_range(0.2..3.0)).collect(),
    )
    .unwrap()
}

pub fn e_step_rows_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for family in Family::ALL {
        for k in 1..5 {
            let data = random_dataset(&mut rng, family, 40, 3, &[0.2, 0.5, -0.4]);
            let fit = random_fit(&mut rng, k, 3);
            let u = e_step(family, &data, &fit).unwrap();
            for i in 0..u.n() {
                let s: f64 = u.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{family} row {i} sums to {s}");
                assert!(u.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

pub fn proportion_update_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let k = rng.random_range(1..8);
        let n = rng.random_range(20..200);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let r: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.0)).collect();
                let t: f64 = r.iter().sum();
                r.iter().map(|v| v / t).collect()
            })
            .collect();
        let u = PosteriorMatrix::from_rows(&rows).unwrap();
        let ubar_min = u.column_sums().iter().fold(f64::INFINITY, |m, &s| m.min(s / n as f64));
        // Small enough that nothing is truncated.
        let lambda = rng.random_range(0.0..1.0) * ubar_min.min(0.99 / k as f64) * 0.5;
        let pi = m_step_pi(&u, lambda).unwrap();
        assert!(pi.iter().all(|&p| p > 0.0));
        let total: f64 = pi.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "sum {total}");
    }
}

pub fn monotone_ascent_gaussian() {
    let sim = generate(&SimDesign::example1(), 21).unwrap();
    let init = init_kmeans(Family::Gaussian, &sim.data, 4, 5).unwrap();
    let settings = EmSettings {
        fixed_phi: Some(1.0),
        max_iter: 300,
        ..EmSettings::with_lambda(0.0)
    };
    let fit = fit_em(Family::Gaussian, &sim.data, &init, &settings).unwrap();
    assert!(fit.trace.len() > 2);
    for w in fit.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "objective fell from {} to {}", w[0], w[1]);
    }
}

/// Ordinary least squares by the normal equations.
pub fn ols(data: &LongitudinalDataset) -> Vec<f64> {
    let p = data.p();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for s in data.subjects() {
        for (row, &y) in s.x_rows().zip(s.y()) {
            let x = DVector::from_column_slice(row);
            xtx += &x * x.transpose();
            xty += &x * y;
        }
    }
    xtx.lu().solve(&xty).unwrap().iter().copied().collect()
}

fn assert_vec_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{what}: {a:?} vs {b:?}");
    }
}

pub fn ols_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = random_dataset(&mut rng, Family::Gaussian, 60, 4, &[1.0, -2.0, 0.5, 3.0]);
    let weights = vec![1.0; data.n()];
    let beta = fit_weighted(Family::Gaussian, &data, &weights, &[0.0; 4], &ScoringOptions::default(), 0).unwrap();
    assert_vec_close(&beta, &ols(&data), 1e-8, "OLS");
}

pub fn gee_independence_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (family, truth) in [
        (Family::Gaussian, vec![1.0, -2.0, 0.5]),
        (Family::Poisson, vec![0.5, 0.3, -0.4]),
        (Family::Binomial, vec![0.2, 1.0, -0.8]),
    ] {
        let data = random_dataset(&mut rng, family, 80, 3, &truth);
        let weights = vec![1.0; data.n()];
        let glm = fit_weighted(family, &data, &weights, &[0.0; 3], &ScoringOptions::default(), 0).unwrap();
        let gee = gee_fit(family, &data, CorrelationKind::Independence, &[0.0; 3]).unwrap();
        assert_vec_close(&gee.beta, &glm, 1e-8, &format!("{family} GEE independence"));
        assert_eq!(gee.rho, 0.0);
    }
}

pub fn refine_independence_oracle() {
    let sim = generate(&SimDesign::example1(), 33).unwrap();
    let init = init_kmeans(Family::Gaussian, &sim.data, 2, 3).unwrap();
    let fit = fit_em(Family::Gaussian, &sim.data, &init, &EmSettings::with_lambda(0.0)).unwrap();
    let refined = refine(Family::Gaussian, &sim.data, &fit, CorrelationKind::Independence).unwrap();
    for c in 0..fit.k() {
        let members: Vec<usize> = (0..sim.data.n()).filter(|&i| refined.classes[i] == c).collect();
        let class = sim.data.select(&members).unwrap();
        assert_vec_close(&refined.beta[c], &ols(&class), 1e-6, "hard-assignment OLS");
    }
    assert_eq!(refined.pi, fit.pi);
}

pub fn sandwich_gradient_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for family in Family::ALL {
        let data = random_dataset(&mut rng, family, 10, 3, &[0.3, 0.4, -0.2]);
        let fit = random_fit(&mut rng, 3, 3);
        let theta = pack_parameters(&fit);
        for s in data.subjects() {
            let g = subject_gradient(family, s, &theta, 3, 3).unwrap();
            for j in 0..theta.len() {
                let h = 1e-6;
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (subject_log_psi(family, s, &plus, 3, 3).unwrap()
                    - subject_log_psi(family, s, &minus, 3, 3).unwrap())
                    / (2.0 * h);
                let err = (fd - g[j]).abs() / g[j].abs().max(1e-3);
                assert!(err <= 1e-5, "{family} coordinate {j}: {fd} vs {}", g[j]);
            }
        }
    }
}

/// With one component the sandwich reduces to the robust covariance of a
/// GEE with independence working correlation.
pub fn sandwich_matches_classical() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for (family, truth) in [(Family::Gaussian, vec![1.0, -1.0, 0.5]), (Family::Poisson, vec![0.8, 0.3, -0.5])] {
        let data = random_dataset(&mut rng, family, 120, 3, &truth);
        let weights = vec![1.0; data.n()];
        let opts = ScoringOptions {
            score_tol: 1e-12,
            ..ScoringOptions::default()
        };
        let beta = fit_weighted(family, &data, &weights, &[0.0; 3], &opts, 0).unwrap();
        let fit = MixtureFit::new(vec![1.0], vec![beta.clone()], vec![1.0]).unwrap();
        let sw = sandwich_covariance(family, &data, &fit).unwrap();

        let mut bread = DMatrix::zeros(3, 3);
        let mut meat = DMatrix::zeros(3, 3);
        for s in data.subjects() {
            let mut score = DVector::zeros(3);
            for (row, &y) in s.x_rows().zip(s.y()) {
                let x = DVector::from_column_slice(row);
                let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let mu = family.inverse_link(eta);
                let d = family.mean_deriv(eta);
                let v = family.variance(mu);
                bread += &x * x.transpose() * (d * d / v);
                score += &x * (d * (y - mu) / v);
            }
            meat += &score * score.transpose();
        }
        let b_inv = bread.try_inverse().unwrap();
        let classical = &b_inv * meat * &b_inv;
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (sw.covariance[(i, j)], classical[(i, j)]);
                assert!((a - b).abs() <= 1e-4 * classical[(i, i)].abs().max(classical[(j, j)].abs()), "{family} ({i},{j}): {a} vs {b}");
            }
        }
    }
}

pub fn label_ordering_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let k = rng.random_range(1..6);
        let fit = random_fit(&mut rng, k, 3);
        let once = order_labels(&fit);
        assert_eq!(order_labels(&once), once);
        let at = LabelOrder::LinearPredictorAt(vec![1.0, 0.5, -0.5]);
        let once = order_labels_by(&fit, &at);
        assert_eq!(order_labels_by(&once, &at), once);
    }
}

pub fn misclassification_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..100 {
        let k = rng.random_range(1..6);
        let n = rng.random_range(1..80);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let a = misclassification(&truth, &pred, k, k).unwrap().rate().unwrap();
        let b = misclassification(&truth, &relabeled, k, k).unwrap().rate().unwrap();
        assert_eq!(a, b);
    }
}

pub fn generator_determinism() {
    for design in [SimDesign::example1(), SimDesign::example2(0.6).unwrap(), SimDesign::example3()] {
        let a = generate(&design, 99).unwrap();
        let b = generate(&design, 99).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.labels, b.labels);
        let c = generate(&design, 100).unwrap();
        assert_ne!(a.data, c.data);
    }
}
