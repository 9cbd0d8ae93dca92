//! Mean/variance families for marginal regression.
//!
//! A family pairs a link with a variance function. Everything downstream only
//! needs the first two moments, so the quasi-likelihood integral
//!
//! ```text
//! q(mu; y) = integral from y to mu of (y - t) / V(t) dt
//! ```
//!
//! is all a family has to provide beyond the link. The lower limit is pinned
//! at `y`, so `q(y; y) = 0` for every family and `q <= 0` everywhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Identity link, constant variance.
    Gaussian,
    /// Log link, `V(mu) = mu`.
    Poisson,
    /// Logit link, `V(mu) = mu (1 - mu)`.
    Binomial,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::Poisson, Family::Binomial];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
        }
    }

    /// Maps a mean onto the linear-predictor scale.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Binomial => (mu / (1.0 - mu)).ln(),
        }
    }

    /// Derivative of [`Family::link`] with respect to the mean.
    pub fn link_deriv(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => 1.0 / mu,
            Family::Binomial => 1.0 / (mu * (1.0 - mu)),
        }
    }

    /// Mean as a function of the linear predictor.
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Binomial => logistic(eta),
        }
    }

    /// `d mu / d eta`, the derivative of the inverse link.
    pub fn mean_deriv(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => eta.exp(),
            Family::Binomial => {
                let mu = logistic(eta);
                mu * (1.0 - mu)
            }
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::Binomial => mu * (1.0 - mu),
        }
    }

    pub fn in_mean_domain(self, mu: f64) -> bool {
        match self {
            Family::Gaussian => mu.is_finite(),
            Family::Poisson => mu.is_finite() && mu > 0.0,
            Family::Binomial => mu > 0.0 && mu < 1.0,
        }
    }

    pub fn in_response_domain(self, y: f64) -> bool {
        match self {
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y.is_finite() && y >= 0.0,
            Family::Binomial => (0.0..=1.0).contains(&y),
        }
    }

    pub fn check_mean(self, mu: f64) -> Result<()> {
        if self.in_mean_domain(mu) {
            Ok(())
        } else {
            Err(Error::MeanDomain {
                family: self.name(),
                mu,
            })
        }
    }

    pub fn check_response(self, y: f64) -> Result<()> {
        if self.in_response_domain(y) {
            Ok(())
        } else {
            Err(Error::ResponseDomain {
                family: self.name(),
                y,
            })
        }
    }

    /// Quasi-log-density `q(mu; y)`.
    pub fn quasi_log_density(self, mu: f64, y: f64) -> Result<f64> {
        self.check_mean(mu)?;
        self.check_response(y)?;
        Ok(self.q(mu, y))
    }

    /// Dispersion-scaled quasi-log-density `q(mu; y) / phi`.
    pub fn quasi_log_density_dispersed(self, mu: f64, phi: f64, y: f64) -> Result<f64> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::Argument(format!(
                "dispersion must be positive and finite, got {phi}"
            )));
        }
        Ok(self.quasi_log_density(mu, y)? / phi)
    }

    /// Unchecked `q(mu; y)`; callers guarantee both arguments are in domain.
    #[inline]
    pub(crate) fn q(self, mu: f64, y: f64) -> f64 {
        match self {
            Family::Gaussian => {
                let r = y - mu;
                -0.5 * r * r
            }
            Family::Poisson => xlogy_ratio(y, mu) - (mu - y),
            Family::Binomial => xlogy_ratio(y, mu) + xlogy_ratio(1.0 - y, 1.0 - mu),
        }
    }
}

/// `a ln(b / a)` with the convention `0 ln(.) = 0`.
#[inline]
fn xlogy_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (b / a).ln()
    }
}

#[inline]
fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "binomial" => Ok(Family::Binomial),
            other => Err(Error::Argument(format!("unknown family `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mean_grid(family: Family) -> Vec<f64> {
        match family {
            Family::Gaussian => (-20..=20).map(|i| i as f64 * 0.37).collect(),
            Family::Poisson => (1..=40).map(|i| i as f64 * 0.21).collect(),
            Family::Binomial => (1..40).map(|i| i as f64 / 40.0).collect(),
        }
    }

    fn response_grid(family: Family) -> Vec<f64> {
        match family {
            Family::Gaussian => vec![-3.0, -0.5, 0.0, 1.2, 4.0],
            Family::Poisson => vec![0.0, 1.0, 2.0, 5.0, 11.0],
            Family::Binomial => vec![0.0, 0.25, 0.5, 1.0],
        }
    }

    #[test]
    fn spec_values() {
        assert_eq!(Family::Gaussian.quasi_log_density(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(Family::Gaussian.quasi_log_density(1.0, 3.0).unwrap(), -2.0);
        assert_eq!(Family::Poisson.quasi_log_density(1.0, 0.0).unwrap(), -1.0);
        assert_eq!(
            Family::Gaussian
                .quasi_log_density_dispersed(1.0, 2.0, 3.0)
                .unwrap(),
            -1.0
        );
        assert_eq!(
            Family::Poisson
                .quasi_log_density_dispersed(1.0, 2.0, 0.0)
                .unwrap(),
            -0.5
        );
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let err = Family::Poisson.quasi_log_density(0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::MeanDomain { family: "poisson", .. }));
        assert!(Family::Binomial.quasi_log_density(1.0, 1.0).is_err());
        assert!(Family::Binomial.quasi_log_density(0.5, 2.0).is_err());
        assert!(Family::Gaussian
            .quasi_log_density_dispersed(0.0, 0.0, 0.0)
            .is_err());
        assert!(Family::Gaussian
            .quasi_log_density_dispersed(0.0, -1.0, 0.0)
            .is_err());
    }

    #[test]
    fn quasi_score_matches_finite_difference() {
        for family in Family::ALL {
            for &mu in &mean_grid(family) {
                for &y in &response_grid(family) {
                    let h = 1e-5 * mu.abs().max(1e-2);
                    let h = match family {
                        Family::Binomial => h.min(mu / 4.0).min((1.0 - mu) / 4.0),
                        Family::Poisson => h.min(mu / 4.0),
                        Family::Gaussian => h,
                    };
                    let fd = (family.quasi_log_density(mu + h, y).unwrap()
                        - family.quasi_log_density(mu - h, y).unwrap())
                        / (2.0 * h);
                    let exact = (y - mu) / family.variance(mu);
                    let err = (fd - exact).abs() / exact.abs().max(1.0);
                    assert!(err <= 1e-6, "{family} mu={mu} y={y}: fd {fd} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn link_derivatives_match_finite_difference() {
        for family in Family::ALL {
            for &mu in &mean_grid(family) {
                let h = match family {
                    Family::Binomial => 1e-6 * mu.min(1.0 - mu),
                    _ => 1e-6 * mu.abs().max(1e-2),
                };
                let fd = (family.link(mu + h) - family.link(mu - h)) / (2.0 * h);
                let exact = family.link_deriv(mu);
                assert!((fd - exact).abs() / exact.abs() <= 1e-6, "{family} mu={mu}");

                let eta = family.link(mu);
                let fd = (family.inverse_link(eta + 1e-6) - family.inverse_link(eta - 1e-6)) / 2e-6;
                let exact = family.mean_deriv(eta);
                assert!((fd - exact).abs() / exact.abs() <= 1e-6, "{family} eta={eta}");
            }
        }
    }

    #[test]
    fn variance_positive_and_link_roundtrip() {
        for family in Family::ALL {
            for &mu in &mean_grid(family) {
                assert!(family.variance(mu) > 0.0);
                let back = family.inverse_link(family.link(mu));
                assert!((back - mu).abs() <= 1e-12 * mu.abs().max(1.0), "{family} {mu}");
            }
        }
    }

    #[test]
    fn parse_names() {
        for family in Family::ALL {
            assert_eq!(family.name().parse::<Family>().unwrap(), family);
        }
        assert!("gamma".parse::<Family>().is_err());
    }

    proptest! {
        #[test]
        fn maximum_at_mu_equals_y(y in 0.01f64..0.99, mu in 0.01f64..0.99, which in 0usize..3) {
            let family = Family::ALL[which];
            let y = if family == Family::Poisson { y * 10.0 } else { y };
            let mu = if family == Family::Poisson { mu * 10.0 } else { mu };
            let at_y = family.quasi_log_density(y, y).unwrap();
            prop_assert_eq!(at_y, 0.0);
            prop_assert!(family.quasi_log_density(mu, y).unwrap() <= at_y);
        }

        #[test]
        fn dispersed_is_exact_quotient(mu in 0.01f64..0.99, y in 0.0f64..1.0, phi in 0.01f64..10.0, which in 0usize..3) {
            let family = Family::ALL[which];
            let q = family.quasi_log_density(mu, y).unwrap();
            prop_assert_eq!(family.quasi_log_density_dispersed(mu, phi, y).unwrap(), q / phi);
            prop_assert_eq!(family.quasi_log_density_dispersed(mu, 1.0, y).unwrap(), q);
        }
    }
}
