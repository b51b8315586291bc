//! Sampling checks of the population moment identities.
//!
//! Each registered identity pairs a sample estimate (a U-statistic, a
//! smooth function of several, or a plain row mean) with its closed form
//! evaluated by quadrature. The estimate's standard error comes from the
//! first-order influence values, and the check reports the z-score.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::config::{CovSpec, DesignKind, MeanSpec};
use super::dgp::{sample_outcome, Population};
use super::rng::{stream, Purpose};
use crate::error::{Error, Result};
use crate::gauss_link_moments::{eval_fk, IndexLaw};
use crate::link::LinkSpec;
use crate::moment_systems::{
    forward_ce, forward_gcm, forward_glm, forward_glm0, forward_mar, mar_alt_coefficients, CeParams,
    GcmParams, MarParams,
};
use crate::ustat::{moment_influence, Dataset, DesignModel, Estimand, MomentEngine, MomentKey, MomentSet};

/// Pass threshold on `|z|`.
pub const Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    /// Zero-mean GLM.
    Glm0,
    Glm,
    Ce,
    Mar,
    Gcm,
}

impl Family {
    fn prefix(self) -> &'static str {
        match self {
            Family::Glm0 => "glm0",
            Family::Glm => "glm",
            Family::Ce => "ce",
            Family::Mar => "mar",
            Family::Gcm => "gcm",
        }
    }
}

/// A fully specified population with `p` small enough for brute-force sampling.
#[derive(Debug, Clone)]
pub struct OraclePoint {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    /// CE treatment effect.
    pub psi: f64,
    pub noise_sd: f64,
    pub link_a: LinkSpec,
    pub link_y: LinkSpec,
}

impl OraclePoint {
    fn quad(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.dot(&(&self.sigma * v))
    }

    fn nu(&self) -> Result<DVector<f64>> {
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularSigma("oracle covariance".into()))?;
        Ok(chol.solve(&self.mu))
    }

    fn m_x2(&self) -> Result<f64> {
        Ok(self.mu.dot(&self.nu()?))
    }

    pub fn lambda_alpha(&self) -> f64 {
        self.alpha.dot(&self.mu)
    }
    pub fn lambda_beta(&self) -> f64 {
        self.beta.dot(&self.mu)
    }
    pub fn gamma2_alpha(&self) -> f64 {
        self.quad(&self.alpha, &self.alpha)
    }
    pub fn gamma2_beta(&self) -> f64 {
        self.quad(&self.beta, &self.beta)
    }
    pub fn gamma_alpha_beta(&self) -> f64 {
        self.quad(&self.alpha, &self.beta)
    }

    fn beta_law(&self) -> Result<IndexLaw> {
        IndexLaw::new(self.lambda_beta(), self.gamma2_beta())
    }

    fn ce_params(&self) -> Result<CeParams> {
        Ok(CeParams {
            psi: self.psi,
            lambda_alpha: self.lambda_alpha(),
            gamma2_alpha: self.gamma2_alpha(),
            lambda_beta: self.lambda_beta(),
            gamma_alpha_beta: self.gamma_alpha_beta(),
            m_x2: self.m_x2()?,
        })
    }

    fn mar_params(&self) -> Result<MarParams> {
        Ok(MarParams {
            psi: self.lambda_beta(),
            lambda_alpha: self.lambda_alpha(),
            gamma2_alpha: self.gamma2_alpha(),
            gamma_alpha_beta: self.gamma_alpha_beta(),
            m_x2: self.m_x2()?,
        })
    }

    fn gcm_params(&self) -> Result<GcmParams> {
        Ok(GcmParams {
            lambda_alpha: self.lambda_alpha(),
            gamma2_alpha: self.gamma2_alpha(),
            lambda_beta: self.lambda_beta(),
            gamma2_beta: self.gamma2_beta(),
            gamma_alpha_beta: self.gamma_alpha_beta(),
            m_x2: self.m_x2()?,
        })
    }

    /// Population GLM chain including the first coordinate moments.
    fn forward_glm_chain(&self) -> Result<MomentSet> {
        let law = self.beta_law()?;
        let (f0, f1) = (eval_fk(&self.link_y, 0, &law)?, eval_fk(&self.link_y, 1, &law)?);
        let (lb, gb, mx2) = (law.lambda, law.gamma2, self.m_x2()?);
        let nu1 = self.nu()?[0];
        Ok(MomentSet::new()
            .with(MomentKey::Y, f0)
            .with(MomentKey::X2, mx2)
            .with(MomentKey::XYX, f0 * mx2 + f1 * lb)
            .with(MomentKey::XY2, f0 * f0 * mx2 + 2.0 * f0 * f1 * lb + f1 * f1 * gb)
            .with(MomentKey::Beta(1), f0 * nu1 + f1 * self.beta[0])
            .with(MomentKey::Nu(1), nu1))
    }

    fn forward(&self, family: Family) -> Result<MomentSet> {
        match family {
            Family::Glm0 => {
                let gb = self.gamma2_beta();
                let f1 = eval_fk(&self.link_y, 1, &IndexLaw::new(0.0, gb)?)?;
                Ok(MomentSet::new()
                    .with(MomentKey::XY2, forward_glm0(&self.link_y, gb)?)
                    .with(MomentKey::Beta(1), f1 * self.beta[0]))
            }
            Family::Glm => self.forward_glm_chain(),
            Family::Ce => forward_ce(&self.link_a, &self.ce_params()?),
            Family::Mar => forward_mar(&self.link_a, &self.mar_params()?),
            Family::Gcm => forward_gcm(&self.link_a, &self.link_y, &self.gcm_params()?),
        }
    }

    /// `samples` draws of `(X, A, Y)` from the family's model.
    pub fn sample(&self, family: Family, samples: usize, seed: u64) -> Result<Dataset> {
        let design = DesignKind::GaussianGeneral {
            mu: MeanSpec::Explicit(self.mu.clone()),
            sigma: CovSpec::Explicit(self.sigma.clone()),
        };
        let pop = Population::for_design(&design, self.mu.len())?;
        let x = pop.sample_design(samples, &mut stream(seed, samples, 0, Purpose::Oracle));
        let ia = &x * &self.alpha;
        let ib = &x * &self.beta;
        let mut a_rng = stream(seed, samples, 0, Purpose::Treatment);
        let mut y_rng = stream(seed, samples, 0, Purpose::Response);
        let draw_a = |rng: &mut _| ia.map(|t| sample_outcome(&self.link_a, t, 0.0, rng));
        let noise = |rng: &mut _| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            self.noise_sd * z
        };
        let (y, a) = match family {
            Family::Glm0 | Family::Glm => (
                ib.map(|t| sample_outcome(&self.link_y, t, self.noise_sd, &mut y_rng)),
                None,
            ),
            Family::Ce => {
                let a = draw_a(&mut a_rng);
                let y = DVector::from_fn(samples, |i, _| self.psi * a[i] + ib[i] + noise(&mut y_rng));
                (y, Some(a))
            }
            Family::Mar => {
                let a = draw_a(&mut a_rng);
                let y = DVector::from_fn(samples, |i, _| {
                    let v = ib[i] + noise(&mut y_rng);
                    if a[i] == 1.0 {
                        v
                    } else {
                        0.0
                    }
                });
                (y, Some(a))
            }
            Family::Gcm => {
                let a = draw_a(&mut a_rng);
                let y = ib.map(|t| sample_outcome(&self.link_y, t, self.noise_sd, &mut y_rng));
                (y, Some(a))
            }
        };
        Dataset::new(x, y, a)
    }
}

type RhsFn = fn(&OraclePoint) -> Result<f64>;
type ComboFn = fn(&[f64]) -> f64;
type RowFn = fn(&OraclePoint, &[f64], f64, f64) -> f64;

#[derive(Clone)]
enum Lhs {
    /// A smooth function of sample moments.
    Moments(Vec<MomentKey>, ComboFn),
    /// Mean of a per-row function of `(x, a, y)`.
    Row(RowFn),
}

#[derive(Clone)]
struct Identity {
    id: String,
    family: Family,
    lhs: Lhs,
    rhs: Rhs,
}

#[derive(Clone)]
enum Rhs {
    /// The family's forward map at this key.
    Chain(MomentKey),
    Custom(RhsFn),
}

fn first(v: &[f64]) -> f64 {
    v[0]
}

fn registry() -> Vec<Identity> {
    let mut out = Vec::new();
    let chain = |family: Family, keys: &[MomentKey], out: &mut Vec<Identity>| {
        for &k in keys {
            out.push(Identity {
                id: format!("{}.{k}", family.prefix()),
                family,
                lhs: Lhs::Moments(vec![k], first),
                rhs: Rhs::Chain(k),
            });
        }
    };
    chain(Family::Glm0, &[MomentKey::XY2, MomentKey::Beta(1)], &mut out);
    let mut glm_keys = Estimand::Glm.chain_keys().to_vec();
    glm_keys.extend([MomentKey::Beta(1), MomentKey::Nu(1)]);
    chain(Family::Glm, &glm_keys, &mut out);
    out.push(Identity {
        id: "glm.reduced_m2".into(),
        family: Family::Glm,
        lhs: Lhs::Moments(
            vec![MomentKey::XY2, MomentKey::Y, MomentKey::X2, MomentKey::XYX],
            |v| v[0] + v[1] * v[1] * v[2] - 2.0 * v[1] * v[3],
        ),
        rhs: Rhs::Custom(|pt| Ok(forward_glm(&pt.link_y, &pt.beta_law()?)?.1)),
    });
    chain(Family::Ce, Estimand::Ce.chain_keys(), &mut out);
    chain(Family::Mar, Estimand::Mar.chain_keys(), &mut out);
    out.push(Identity {
        id: "mar.alt_m_XAY_XA".into(),
        family: Family::Mar,
        lhs: Lhs::Moments(vec![MomentKey::XAYXA], first),
        rhs: Rhs::Custom(|pt| mar_alt_rhs(pt, true)),
    });
    chain(Family::Gcm, Estimand::Gcm.chain_keys(), &mut out);
    out.push(Identity {
        id: "gcm.psi".into(),
        family: Family::Gcm,
        lhs: Lhs::Row(|pt, x, _, _| {
            let (ta, tb) = (dot(&pt.alpha, x), dot(&pt.beta, x));
            pt.link_a.value(ta) * pt.link_y.value(tb)
        }),
        rhs: Rhs::Custom(|pt| pt.gcm_params()?.psi(&pt.link_a, &pt.link_y)),
    });
    out.push(Identity {
        id: "stein.first_order".into(),
        family: Family::Glm,
        lhs: Lhs::Row(|pt, x, _, _| x[0] * pt.link_y.value(dot(&pt.beta, x))),
        rhs: Rhs::Custom(|pt| {
            let law = pt.beta_law()?;
            let sb = &pt.sigma * &pt.beta;
            Ok(pt.mu[0] * eval_fk(&pt.link_y, 0, &law)? + sb[0] * eval_fk(&pt.link_y, 1, &law)?)
        }),
    });
    out
}

/// Identities that are not expected to hold; reported by the self-test only.
fn diagnostic_registry() -> Vec<Identity> {
    vec![Identity {
        id: "mar.alt_m_XAY_XA_without_cross_term".into(),
        family: Family::Mar,
        lhs: Lhs::Moments(vec![MomentKey::XAYXA], first),
        rhs: Rhs::Custom(|pt| mar_alt_rhs(pt, false)),
    }]
}

fn mar_alt_rhs(pt: &OraclePoint, include_cross: bool) -> Result<f64> {
    let params = pt.mar_params()?;
    let (c_psi, c_gamma) = mar_alt_coefficients(&pt.link_a, &params, include_cross)?;
    Ok(c_psi * params.psi + c_gamma * params.gamma_alpha_beta)
}

fn dot(v: &DVector<f64>, x: &[f64]) -> f64 {
    v.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn lookup(id: &str) -> Result<Identity> {
    registry()
        .into_iter()
        .chain(diagnostic_registry())
        .find(|i| i.id == id)
        .ok_or_else(|| Error::UnknownIdentity(id.to_string()))
}

/// Ids of every identity the oracle suite must pass.
pub fn registered_identities() -> Vec<String> {
    registry().into_iter().map(|i| i.id).collect()
}

/// Ids of identities kept for comparison only (expected to fail).
pub fn diagnostic_identities() -> Vec<String> {
    diagnostic_registry().into_iter().map(|i| i.id).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub id: String,
    pub point: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub z: f64,
    pub samples: usize,
}

impl OracleReport {
    pub fn passes(&self) -> bool {
        self.z.abs() <= Z_THRESHOLD
    }
}

fn sample_estimate(identity: &Identity, pt: &OraclePoint, ds: &Dataset, engine: &MomentEngine<'_>) -> Result<(f64, f64)> {
    let n = ds.n() as f64;
    let influence_se = |psi: &DVector<f64>| {
        let m = psi.mean();
        (psi.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    };
    match &identity.lhs {
        Lhs::Moments(keys, combo) => {
            let mut values = Vec::with_capacity(keys.len());
            let mut infl = Vec::with_capacity(keys.len());
            for &k in keys {
                let (v, psi) = moment_influence(engine, ds, k)?;
                values.push(v);
                infl.push(psi);
            }
            let value = combo(&values);
            let mut total = DVector::zeros(ds.n());
            for k in 0..keys.len() {
                let h = 1e-6 * values[k].abs().max(1.0);
                let mut up = values.clone();
                let mut dn = values.clone();
                up[k] += h;
                dn[k] -= h;
                let grad = (combo(&up) - combo(&dn)) / (2.0 * h);
                total.axpy(grad, &infl[k], 1.0);
            }
            Ok((value, influence_se(&total)))
        }
        Lhs::Row(f) => {
            let x = ds.x();
            let mut row = vec![0.0; ds.p()];
            let zero = DVector::zeros(ds.n());
            let a = ds.a().unwrap_or(&zero);
            let vals = DVector::from_fn(ds.n(), |i, _| {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = x[(i, j)];
                }
                f(pt, &row, a[i], ds.y()[i])
            });
            Ok((vals.mean(), influence_se(&vals)))
        }
    }
}

fn evaluate(identity: &Identity, point: usize, pt: &OraclePoint, ds: &Dataset, engine: &MomentEngine<'_>) -> Result<OracleReport> {
    let (lhs, se) = sample_estimate(identity, pt, ds, engine)?;
    let rhs = match &identity.rhs {
        Rhs::Chain(k) => pt.forward(identity.family)?.get(*k)?,
        Rhs::Custom(f) => f(pt)?,
    };
    let diff = lhs - rhs;
    let z = if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    };
    Ok(OracleReport {
        id: identity.id.clone(),
        point,
        lhs,
        rhs,
        se,
        z,
        samples: ds.n(),
    })
}

/// The two parameter points used for identities of `family` (`index` 0 or 1).
pub fn oracle_point(family: Family, index: usize) -> OraclePoint {
    let v = |s: &[f64]| DVector::from_column_slice(s);
    let ar = DMatrix::from_fn(3, 3, |i, j| 0.3f64.powi((i as i32 - j as i32).abs()));
    let general = DMatrix::from_row_slice(3, 3, &[1.2, 0.2, -0.1, 0.2, 0.8, 0.15, -0.1, 0.15, 1.5]);
    let mut pt = if index == 0 {
        OraclePoint {
            mu: v(&[0.3, -0.2, 0.1]),
            sigma: ar,
            alpha: v(&[0.5, -0.4, 0.3]),
            beta: v(&[0.4, 0.6, -0.2]),
            psi: 0.7,
            noise_sd: 0.5,
            link_a: LinkSpec::logistic(),
            link_y: LinkSpec::logistic(),
        }
    } else {
        OraclePoint {
            mu: v(&[-0.1, 0.4, 0.2]),
            sigma: general,
            alpha: v(&[-0.3, 0.7, 0.2]),
            beta: v(&[0.8, -0.1, 0.5]),
            psi: -0.4,
            noise_sd: 1.0,
            link_a: LinkSpec::logistic(),
            link_y: LinkSpec::probit(),
        }
    };
    match (family, index) {
        (Family::Glm0, _) => pt.mu.fill(0.0),
        (Family::Mar, 0) => pt.link_a = LinkSpec::bounded_logistic(),
        (Family::Gcm, 1) => {
            pt.link_a = LinkSpec::probit();
            pt.link_y = LinkSpec::logistic();
        }
        _ => {}
    }
    pt
}

/// Checks one identity at a given population with `samples` draws.
pub fn stein_oracle_check(id: &str, pt: &OraclePoint, samples: usize, seed: u64) -> Result<OracleReport> {
    let identity = lookup(id)?;
    if samples < 2 {
        return Err(Error::EmptyDataset("the oracle needs at least two samples".into()));
    }
    let ds = pt.sample(identity.family, samples, seed)?;
    let design = DesignModel::known(pt.sigma.clone(), false)?;
    let engine = MomentEngine::new(ds.x(), &design)?;
    evaluate(&identity, 0, pt, &ds, &engine)
}

/// Every registered identity (plus the diagnostic ones when asked) at both
/// oracle points, sharing one sample per family and point.
pub fn run_oracle_suite(samples: usize, seed: u64, include_diagnostic: bool) -> Result<Vec<OracleReport>> {
    let mut ids = registry();
    if include_diagnostic {
        ids.extend(diagnostic_registry());
    }
    let mut families: Vec<Family> = ids.iter().map(|i| i.family).collect();
    families.sort();
    families.dedup();
    let mut out = Vec::new();
    for family in families {
        for index in 0..2 {
            let pt = oracle_point(family, index);
            let ds = pt.sample(family, samples, seed.wrapping_add(index as u64))?;
            let design = DesignModel::known(pt.sigma.clone(), false)?;
            let engine = MomentEngine::new(ds.x(), &design)?;
            for identity in ids.iter().filter(|i| i.family == family) {
                out.push(evaluate(identity, index, &pt, &ds, &engine)?);
            }
        }
    }
    Ok(out)
}
