//! Data-generating processes for the simulation settings.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::config::{is_probability_link, CoefScheme, CovSpec, DesignKind, MeanSpec, SimConfig, SimEstimand};
use super::rng::{stream, Purpose};
use crate::error::{Error, Result};
use crate::link::LinkSpec;
use crate::moment_systems::GcmParams;
use crate::ustat::{Dataset, DesignModel};

/// Covariate law at one dimension. `sigma = None` means the identity.
#[derive(Debug, Clone)]
pub struct Population {
    pub mu: DVector<f64>,
    pub sigma: Option<DMatrix<f64>>,
    chol: Option<DMatrix<f64>>,
    rademacher: bool,
}

impl Population {
    pub fn for_design(design: &DesignKind, p: usize) -> Result<Self> {
        let zero = DVector::zeros(p);
        match design {
            DesignKind::GaussianIdentity => Ok(Population {
                mu: zero,
                sigma: None,
                chol: None,
                rademacher: false,
            }),
            DesignKind::Rademacher => Ok(Population {
                mu: zero,
                sigma: None,
                chol: None,
                rademacher: true,
            }),
            DesignKind::GaussianGeneral { mu, sigma } => {
                let mu = match mu {
                    MeanSpec::Zero => zero,
                    MeanSpec::Constant(c) => DVector::from_element(p, c / (p as f64).sqrt()),
                    MeanSpec::Explicit(m) => m.clone(),
                };
                let sigma = match sigma {
                    CovSpec::Identity => None,
                    CovSpec::Ar1(r) => Some(DMatrix::from_fn(p, p, |i, j| {
                        r.powi((i as i64 - j as i64).unsigned_abs() as i32)
                    })),
                    CovSpec::Equicorrelated(r) => {
                        Some(DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { *r }))
                    }
                    CovSpec::Explicit(s) => Some(s.clone()),
                };
                let chol = match &sigma {
                    Some(s) => Some(
                        s.clone()
                            .cholesky()
                            .ok_or_else(|| Error::ConfigInvalid("design covariance is not positive definite".into()))?
                            .l(),
                    ),
                    None => None,
                };
                Ok(Population {
                    mu,
                    sigma,
                    chol,
                    rademacher: false,
                })
            }
        }
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn mean_is_zero(&self) -> bool {
        self.mu.iter().all(|v| *v == 0.0)
    }

    /// `uᵀΣv`.
    pub fn quad(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        match &self.sigma {
            None => u.dot(v),
            Some(s) => u.dot(&(s * v)),
        }
    }

    /// `μᵀu`.
    pub fn lin(&self, u: &DVector<f64>) -> f64 {
        self.mu.dot(u)
    }

    /// `μᵀΣ⁻¹μ`.
    pub fn m_x2(&self) -> f64 {
        match &self.chol {
            None => self.mu.norm_squared(),
            Some(l) => l
                .solve_lower_triangular(&self.mu)
                .map(|w| w.norm_squared())
                .unwrap_or(f64::NAN),
        }
    }

    fn trace(&self) -> f64 {
        match &self.sigma {
            None => self.p() as f64,
            Some(s) => s.trace(),
        }
    }

    fn sigma11(&self) -> f64 {
        self.sigma.as_ref().map_or(1.0, |s| s[(0, 0)])
    }

    /// The design model an estimator with full knowledge of the law would use.
    pub fn design_model(&self, mu_known_zero: bool) -> Result<DesignModel> {
        match &self.sigma {
            None => Ok(DesignModel::identity(self.p(), mu_known_zero)),
            Some(s) => DesignModel::known(s.clone(), mu_known_zero),
        }
    }

    /// `n` covariate rows.
    pub fn sample_design<R: RngCore>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let p = self.p();
        let mut buf = vec![0.0; n * p];
        if self.rademacher {
            for chunk in buf.chunks_mut(64) {
                let bits = rng.next_u64();
                for (k, v) in chunk.iter_mut().enumerate() {
                    *v = if (bits >> k) & 1 == 1 { 1.0 } else { -1.0 };
                }
            }
        } else {
            for v in buf.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
        let mut x = DMatrix::from_vec(n, p, buf);
        if let Some(l) = &self.chol {
            x = &x * l.transpose();
        }
        if !self.mean_is_zero() {
            for (j, mut col) in x.column_iter_mut().enumerate() {
                col.add_scalar_mut(self.mu[j]);
            }
        }
        x
    }

    /// Rescales a scheme draw so its quadratic form has expectation one.
    fn normalize(&self, scheme: CoefScheme, mut v: DVector<f64>) -> DVector<f64> {
        let denom = match scheme {
            CoefScheme::DenseUniform | CoefScheme::SparseRootP => self.trace() / self.p() as f64,
            CoefScheme::SingleSpike => self.sigma11(),
        };
        if denom != 1.0 {
            v /= denom.sqrt();
        }
        v
    }
}

/// A coefficient vector from `scheme` (calibrated for Σ = I).
pub fn draw_coefficients<R: Rng>(scheme: CoefScheme, p: usize, rng: &mut R) -> DVector<f64> {
    match scheme {
        CoefScheme::DenseUniform => {
            let h = (3.0 / p as f64).sqrt();
            DVector::from_fn(p, |_, _| rng.random_range(-h..=h))
        }
        CoefScheme::SparseRootP => {
            let s = ((p as f64).sqrt().round() as usize).clamp(1, p);
            let value = (p as f64).powf(-0.25);
            let mut v = DVector::zeros(p);
            for j in sample(rng, p, s) {
                v[j] = value;
            }
            v
        }
        CoefScheme::SingleSpike => {
            let mut v = DVector::zeros(p);
            v[0] = 1.0;
            v
        }
    }
}

/// One outcome draw given its linear index.
pub fn sample_outcome<R: Rng>(link: &LinkSpec, index: f64, noise_sd: f64, rng: &mut R) -> f64 {
    if is_probability_link(link) {
        let prob = link.value(index);
        return if rng.random::<f64>() < prob { 1.0 } else { 0.0 };
    }
    if link.name() == "log-linear" {
        let rate = index.exp();
        return match Poisson::new(rate) {
            Ok(d) => d.sample(rng),
            Err(_) => 0.0,
        };
    }
    let noise: f64 = if noise_sd > 0.0 {
        noise_sd * Distribution::<f64>::sample(&StandardNormal, rng)
    } else {
        0.0
    };
    link.value(index) + noise
}

/// Coefficients for one replicate: explicit values when given, else a scheme
/// draw (from replicate 0 when frozen), normalized against the population.
pub fn coefficients(
    config: &SimConfig,
    pop: &Population,
    n: usize,
    replicate: usize,
    purpose: Purpose,
) -> DVector<f64> {
    let explicit = config.true_params.as_ref().and_then(|t| match purpose {
        Purpose::CoefAlpha => t.alpha.clone(),
        _ => t.beta.clone(),
    });
    if let Some(v) = explicit {
        return v;
    }
    let rep = if config.freeze_coefficients { 0 } else { replicate };
    let mut rng = stream(config.seed, n, rep, purpose);
    pop.normalize(config.coef_scheme, draw_coefficients(config.coef_scheme, pop.p(), &mut rng))
}

pub type Truth = BTreeMap<String, f64>;

/// Dataset and realized truth for `(n, replicate)`.
pub fn generate(config: &SimConfig, n: usize, replicate: usize) -> Result<(Dataset, Truth)> {
    config.validate()?;
    let pop = Population::for_design(&config.design, config.dimension(n))?;
    generate_with(config, &pop, n, replicate)
}

/// As [`generate`] with a prebuilt population (the config is assumed valid).
pub fn generate_with(
    config: &SimConfig,
    pop: &Population,
    n: usize,
    replicate: usize,
) -> Result<(Dataset, Truth)> {
    let x = pop.sample_design(n, &mut stream(config.seed, n, replicate, Purpose::Design));
    let beta = coefficients(config, pop, n, replicate, Purpose::CoefBeta);
    let idx_beta = &x * &beta;
    let mut truth = Truth::new();
    let mut y_rng = stream(config.seed, n, replicate, Purpose::Response);
    let mut a_rng = stream(config.seed, n, replicate, Purpose::Treatment);

    let (y, a) = match config.estimand {
        SimEstimand::Glm | SimEstimand::GlmUnknownSigma | SimEstimand::LinearUnknownSigma => {
            let y = idx_beta.map(|t| sample_outcome(&config.link, t, config.noise_sd, &mut y_rng));
            let g2 = pop.quad(&beta, &beta);
            let lb = pop.lin(&beta);
            match config.estimand {
                SimEstimand::Glm => {
                    if pop.mean_is_zero() {
                        truth.insert("gamma2_beta".into(), g2);
                    }
                    truth.insert("gamma2_beta_mu_unknown".into(), g2);
                    truth.insert("lambda_beta_mu_unknown".into(), lb);
                    for &j in &config.coords {
                        if pop.mean_is_zero() {
                            truth.insert(format!("beta_{j}"), beta[j - 1]);
                        }
                        truth.insert(format!("beta_{j}_mu_unknown"), beta[j - 1]);
                    }
                }
                _ => {
                    truth.insert("gamma2_beta".into(), g2);
                    if config.estimand == SimEstimand::LinearUnknownSigma {
                        truth.insert("lambda_beta".into(), lb);
                    }
                    for &j in &config.coords {
                        truth.insert(format!("beta_{j}"), beta[j - 1]);
                    }
                }
            }
            (y, None)
        }
        SimEstimand::Ce | SimEstimand::Mar | SimEstimand::Gcm => {
            let alpha = coefficients(config, pop, n, replicate, Purpose::CoefAlpha);
            let idx_alpha = &x * &alpha;
            let a = idx_alpha.map(|t| sample_outcome(&config.link_a, t, 0.0, &mut a_rng));
            let la = pop.lin(&alpha);
            let ga = pop.quad(&alpha, &alpha);
            let gab = pop.quad(&alpha, &beta);
            let lb = pop.lin(&beta);
            truth.insert("lambda_alpha".into(), la);
            truth.insert("gamma2_alpha".into(), ga);
            truth.insert("gamma_alpha_beta".into(), gab);
            let y = match config.estimand {
                SimEstimand::Ce => {
                    truth.insert("psi".into(), config.psi);
                    truth.insert("lambda_beta".into(), lb);
                    DVector::from_fn(n, |i, _| {
                        let noise: f64 = StandardNormal.sample(&mut y_rng);
                        config.psi * a[i] + idx_beta[i] + config.noise_sd * noise
                    })
                }
                SimEstimand::Mar => {
                    truth.insert("psi".into(), lb);
                    DVector::from_fn(n, |i, _| {
                        let noise: f64 = StandardNormal.sample(&mut y_rng);
                        if a[i] == 0.0 {
                            0.0
                        } else {
                            idx_beta[i] + config.noise_sd * noise
                        }
                    })
                }
                _ => {
                    let gb = pop.quad(&beta, &beta);
                    truth.insert("lambda_beta".into(), lb);
                    truth.insert("gamma2_beta".into(), gb);
                    let params = GcmParams {
                        lambda_alpha: la,
                        gamma2_alpha: ga,
                        lambda_beta: lb,
                        gamma2_beta: gb,
                        gamma_alpha_beta: gab,
                        m_x2: pop.m_x2(),
                    };
                    truth.insert("psi".into(), params.psi(&config.link_a, &config.link)?);
                    idx_beta.map(|t| sample_outcome(&config.link, t, config.noise_sd, &mut y_rng))
                }
            };
            (y, Some(a))
        }
    };
    Ok((Dataset::new(x, y, a)?, truth))
}
