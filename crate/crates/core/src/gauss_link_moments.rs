//! Gaussian link-moment functionals `f_k(λ, γ²) = E[φ^(k)(Z)]`, `Z ~ N(λ, γ²)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::link::LinkSpec;
use crate::quadrature;

/// Absolute tolerance between successive quadrature refinements.
pub const TOL_QUAD: f64 = 1e-10;
/// Slack allowed when projecting a bivariate covariance onto the PSD cone.
pub const TOL_PSD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexLaw {
    pub lambda: f64,
    pub gamma2: f64,
}

impl IndexLaw {
    pub fn new(lambda: f64, gamma2: f64) -> Result<Self> {
        let law = IndexLaw { lambda, gamma2 };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || !self.gamma2.is_finite() {
            return Err(Error::NonFiniteValue("index law".into()));
        }
        if self.gamma2 < 0.0 {
            return Err(Error::NonPSDCovariance(format!(
                "index variance {} is negative",
                self.gamma2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateIndexLaw {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma11: f64,
    pub gamma22: f64,
    pub gamma12: f64,
}

impl BivariateIndexLaw {
    /// Returns a copy whose covariance is PSD, clipping small violations.
    pub fn projected(&self) -> Result<Self> {
        let vals = [
            self.lambda1,
            self.lambda2,
            self.gamma11,
            self.gamma22,
            self.gamma12,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("bivariate index law".into()));
        }
        let mut out = *self;
        for g in [&mut out.gamma11, &mut out.gamma22] {
            if *g < -TOL_PSD {
                return Err(Error::NonPSDCovariance(format!("negative variance {g}")));
            }
            *g = g.max(0.0);
        }
        let bound = out.gamma11 * out.gamma22;
        let excess = out.gamma12 * out.gamma12 - bound;
        if excess > TOL_PSD {
            return Err(Error::NonPSDCovariance(format!(
                "cross term {} exceeds the Cauchy-Schwarz bound by {excess:e}",
                out.gamma12
            )));
        }
        if excess > 0.0 {
            out.gamma12 = out.gamma12.signum() * bound.sqrt();
        }
        Ok(out)
    }
}

/// `E[φ^(k)(Z)]` for `Z ~ N(λ, γ²)`.
pub fn eval_fk(link: &LinkSpec, k: usize, law: &IndexLaw) -> Result<f64> {
    let g = link.handle(k)?;
    law.validate()?;
    if law.gamma2 == 0.0 {
        return Ok(g(law.lambda));
    }
    let scale = (2.0 * law.gamma2).sqrt();
    let (value, _) = quadrature::adaptive(TOL_QUAD, |rule| {
        let mut s = 0.0;
        for (u, w) in rule.nodes.iter().zip(&rule.weights) {
            if *w != 0.0 {
                s += w * g(law.lambda + scale * u);
            }
        }
        s / PI.sqrt()
    });
    if !value.is_finite() {
        return Err(Error::NonFiniteIntegral {
            link: link.name().to_string(),
            order: k,
        });
    }
    Ok(value)
}

/// `(∂f_k/∂λ, ∂f_k/∂γ²) = (f_{k+1}, f_{k+2}/2)` by Stein's identity.
pub fn eval_fk_grad(link: &LinkSpec, k: usize, law: &IndexLaw) -> Result<(f64, f64)> {
    if k > 1 {
        return Err(Error::InvalidOrder(k));
    }
    Ok((
        eval_fk(link, k + 1, law)?,
        0.5 * eval_fk(link, k + 2, law)?,
    ))
}

/// `(f_0, f_1, f_2, f_3)` at one law.
pub fn eval_all(link: &LinkSpec, law: &IndexLaw) -> Result<[f64; 4]> {
    Ok([
        eval_fk(link, 0, law)?,
        eval_fk(link, 1, law)?,
        eval_fk(link, 2, law)?,
        eval_fk(link, 3, law)?,
    ])
}

/// `E[η(Z₁) φ(Z₂)]` under the bivariate normal law.
pub fn eval_bivariate(link1: &LinkSpec, link2: &LinkSpec, law: &BivariateIndexLaw) -> Result<f64> {
    let law = law.projected()?;
    let l11 = law.gamma11.sqrt();
    let l21 = if l11 > 0.0 { law.gamma12 / l11 } else { 0.0 };
    let l22 = (law.gamma22 - l21 * l21).max(0.0).sqrt();
    // Z₁ = λ₁ + √2·l11·u,  Z₂ = λ₂ + √2·(l21·u + l22·v)
    let (a11, a21, a22) = (l11 / FRAC_1_SQRT_2, l21 / FRAC_1_SQRT_2, l22 / FRAC_1_SQRT_2);
    let (value, _) = quadrature::adaptive(TOL_QUAD, |rule| {
        let mut total = 0.0;
        for (u, wu) in rule.nodes.iter().zip(&rule.weights) {
            if *wu == 0.0 {
                continue;
            }
            let eta = link1.value(law.lambda1 + a11 * u);
            if eta == 0.0 {
                continue;
            }
            let base = law.lambda2 + a21 * u;
            let mut inner = 0.0;
            if a22 == 0.0 {
                inner = PI.sqrt() * link2.value(base);
            } else {
                for (v, wv) in rule.nodes.iter().zip(&rule.weights) {
                    if *wv != 0.0 {
                        inner += wv * link2.value(base + a22 * v);
                    }
                }
            }
            total += wu * eta * inner;
        }
        total / PI
    });
    if !value.is_finite() {
        return Err(Error::NonFiniteIntegral {
            link: format!("{} x {}", link1.name(), link2.name()),
            order: 0,
        });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn law(l: f64, g: f64) -> IndexLaw {
        IndexLaw::new(l, g).unwrap()
    }

    #[test]
    fn logistic_mean_is_half_under_symmetric_law() {
        let v = eval_fk(&LinkSpec::logistic(), 0, &law(0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn lognormal_mean() {
        let v = eval_fk(&LinkSpec::log_linear(), 0, &law(0.3, 0.8)).unwrap();
        assert_abs_diff_eq!(v, 0.7f64.exp(), epsilon = 1e-10);
    }

    #[test]
    fn probit_gaussian_convolution() {
        let v = eval_fk(&LinkSpec::probit(), 0, &law(0.5, 2.0)).unwrap();
        let n = Normal::new(0.0, 1.0).unwrap();
        assert_abs_diff_eq!(v, n.cdf(0.5 / 3f64.sqrt()), epsilon = 1e-8);
    }

    #[test]
    fn identity_slope_is_one() {
        for (l, g) in [(0.0, 0.0), (-2.0, 3.0), (1.5, 0.1)] {
            assert_abs_diff_eq!(
                eval_fk(&LinkSpec::identity(), 1, &law(l, g)).unwrap(),
                1.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn zero_variance_is_pointwise() {
        let link = LinkSpec::logistic();
        for k in 0..4 {
            assert_eq!(
                eval_fk(&link, k, &law(0.7, 0.0)).unwrap(),
                link.deriv(k, 0.7).unwrap()
            );
        }
    }

    #[test]
    fn grad_examples() {
        let (dl, dg) = eval_fk_grad(&LinkSpec::identity(), 0, &law(0.4, 2.0)).unwrap();
        assert_abs_diff_eq!(dl, 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(dg, 0.0, epsilon = 1e-13);
        assert_eq!(
            eval_fk_grad(&LinkSpec::log_linear(), 0, &law(0.0, 0.0)).unwrap(),
            (1.0, 0.5)
        );
        assert!(matches!(
            eval_fk_grad(&LinkSpec::identity(), 2, &law(0.0, 1.0)),
            Err(Error::InvalidOrder(2))
        ));
    }

    #[test]
    fn invalid_order_and_bad_law() {
        assert!(matches!(
            eval_fk(&LinkSpec::logistic(), 4, &law(0.0, 1.0)),
            Err(Error::InvalidOrder(4))
        ));
        assert!(IndexLaw::new(0.0, -1.0).is_err());
        assert!(IndexLaw::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn divergent_link_is_reported() {
        use std::sync::Arc;
        let f: crate::link::ScalarFn = Arc::new(|t: f64| (t * t).exp());
        let bad = LinkSpec::new("exp-square", f.clone(), f.clone(), f.clone(), f, (0.0, f64::INFINITY));
        assert!(matches!(
            eval_fk(&bad, 0, &law(0.0, 4.0)),
            Err(Error::NonFiniteIntegral { .. })
        ));
    }

    #[test]
    fn bivariate_identity_gives_covariance() {
        let id = LinkSpec::identity();
        let b = BivariateIndexLaw {
            lambda1: 0.0,
            lambda2: 0.0,
            gamma11: 1.3,
            gamma22: 0.7,
            gamma12: -0.4,
        };
        assert_abs_diff_eq!(eval_bivariate(&id, &id, &b).unwrap(), -0.4, epsilon = 1e-12);
    }

    #[test]
    fn bivariate_independent_logistic() {
        let lg = LinkSpec::logistic();
        let b = BivariateIndexLaw {
            lambda1: 0.0,
            lambda2: 0.0,
            gamma11: 1.0,
            gamma22: 1.0,
            gamma12: 0.0,
        };
        assert_abs_diff_eq!(eval_bivariate(&lg, &lg, &b).unwrap(), 0.25, epsilon = 1e-10);
    }

    #[test]
    fn bivariate_perfect_correlation_collapses() {
        let lg = LinkSpec::logistic();
        let b = BivariateIndexLaw {
            lambda1: 0.3,
            lambda2: 0.3,
            gamma11: 1.5,
            gamma22: 1.5,
            gamma12: 1.5,
        };
        let two_d = eval_bivariate(&lg, &lg, &b).unwrap();
        let sq = LinkSpec::new(
            "sq",
            std::sync::Arc::new(|t| {
                let e = crate::link::expit(t);
                e * e
            }),
            std::sync::Arc::new(|_| 0.0),
            std::sync::Arc::new(|_| 0.0),
            std::sync::Arc::new(|_| 0.0),
            (0.0, 1.0),
        );
        let one_d = eval_fk(&sq, 0, &law(0.3, 1.5)).unwrap();
        assert_abs_diff_eq!(two_d, one_d, epsilon = 1e-8);
    }

    #[test]
    fn psd_projection_clips_small_excess_and_rejects_large() {
        let mut b = BivariateIndexLaw {
            lambda1: 0.0,
            lambda2: 0.0,
            gamma11: 1.0,
            gamma22: 1.0,
            gamma12: 1.0 + 1e-9,
        };
        assert_eq!(b.projected().unwrap().gamma12, 1.0);
        b.gamma12 = 1.1;
        assert!(matches!(b.projected(), Err(Error::NonPSDCovariance(_))));
        b.gamma12 = 0.0;
        b.gamma11 = -0.5;
        assert!(matches!(b.projected(), Err(Error::NonPSDCovariance(_))));
    }
}
