//! Simulation settings and their validation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::link::LinkSpec;
use crate::moment_systems::SolveOptions;

/// Covariate mean as a function of the dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanSpec {
    Zero,
    /// Every coordinate equal to `c/√p`, so that `‖μ‖ = |c|`.
    Constant(f64),
    Explicit(DVector<f64>),
}

/// Covariate covariance as a function of the dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum CovSpec {
    Identity,
    /// `Σ_ij = ρ^|i−j|`.
    Ar1(f64),
    /// Unit diagonal, `ρ` off the diagonal.
    Equicorrelated(f64),
    Explicit(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DesignKind {
    GaussianIdentity,
    GaussianGeneral { mu: MeanSpec, sigma: CovSpec },
    /// I.i.d. ±1 coordinates (mean 0, identity covariance).
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefScheme {
    /// I.i.d. `Uniform[−√(3/p), √(3/p)]`.
    DenseUniform,
    /// `round(√p)` coordinates equal to `p^{−1/4}` on a random support.
    SparseRootP,
    /// First coordinate one, the rest zero.
    SingleSpike,
}

impl CoefScheme {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "dense" | "dense-uniform" => Ok(CoefScheme::DenseUniform),
            "sparse" | "sparse-root-p" => Ok(CoefScheme::SparseRootP),
            "spike" | "single-spike" => Ok(CoefScheme::SingleSpike),
            other => Err(Error::ConfigInvalid(format!("unknown coefficient scheme `{other}`"))),
        }
    }
}

/// Which estimator the experiment exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEstimand {
    /// Known Σ. The zero-mean path runs whenever the design mean is zero and
    /// the general path always runs; its parameters carry a `_mu_unknown` suffix.
    Glm,
    GlmUnknownSigma,
    LinearUnknownSigma,
    /// Needs a treatment index away from the symmetry point of the link: with
    /// a zero-mean design and `λ_α = 0` the linear stage is singular.
    Ce,
    Mar,
    Gcm,
}

impl SimEstimand {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "glm" => Ok(SimEstimand::Glm),
            "glm-unknown-sigma" => Ok(SimEstimand::GlmUnknownSigma),
            "linear-unknown-sigma" => Ok(SimEstimand::LinearUnknownSigma),
            "ce" => Ok(SimEstimand::Ce),
            "mar" => Ok(SimEstimand::Mar),
            "gcm" => Ok(SimEstimand::Gcm),
            other => Err(Error::ConfigInvalid(format!("unknown simulation estimand `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimEstimand::Glm => "glm",
            SimEstimand::GlmUnknownSigma => "glm-unknown-sigma",
            SimEstimand::LinearUnknownSigma => "linear-unknown-sigma",
            SimEstimand::Ce => "ce",
            SimEstimand::Mar => "mar",
            SimEstimand::Gcm => "gcm",
        }
    }

    fn uses_treatment(self) -> bool {
        matches!(self, SimEstimand::Ce | SimEstimand::Mar | SimEstimand::Gcm)
    }
}

/// Coefficient vectors held fixed instead of drawn from the scheme.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrueParams {
    pub alpha: Option<DVector<f64>>,
    pub beta: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub estimand: SimEstimand,
    pub design: DesignKind,
    pub coef_scheme: CoefScheme,
    /// Outcome link `φ`.
    pub link: LinkSpec,
    /// Treatment or missingness link `η` (CE, MAR, GCM).
    pub link_a: LinkSpec,
    pub n_grid: Vec<usize>,
    /// `p/n`.
    pub ratio: f64,
    pub replicates: usize,
    pub seed: u64,
    pub true_params: Option<TrueParams>,
    /// Reuse the replicate-0 coefficients for every replicate.
    pub freeze_coefficients: bool,
    /// Standard deviation of additive Gaussian noise on continuous outcomes.
    pub noise_sd: f64,
    /// Treatment effect in the CE outcome model `Y = ψA + Xᵀβ + ε`.
    pub psi: f64,
    /// Coordinates `j` (1-based) whose `β̂_j` are recorded.
    pub coords: Vec<usize>,
    pub solve: SolveOptions,
}

impl SimConfig {
    /// Logistic GLM on an identity Gaussian design with dense coefficients.
    pub fn new(estimand: SimEstimand) -> Self {
        let (link_a, noise_sd) = match estimand {
            SimEstimand::Mar => (LinkSpec::bounded_logistic(), 0.2),
            _ => (LinkSpec::logistic(), 1.0),
        };
        let link = match estimand {
            SimEstimand::LinearUnknownSigma | SimEstimand::Ce | SimEstimand::Mar => LinkSpec::identity(),
            _ => LinkSpec::logistic(),
        };
        SimConfig {
            estimand,
            design: DesignKind::GaussianIdentity,
            coef_scheme: CoefScheme::DenseUniform,
            link,
            link_a,
            n_grid: vec![1000],
            ratio: 1.2,
            replicates: 100,
            seed: 20240501,
            true_params: None,
            freeze_coefficients: false,
            noise_sd,
            psi: 0.0,
            coords: Vec::new(),
            solve: SolveOptions::default(),
        }
    }

    pub fn dimension(&self, n: usize) -> usize {
        (n as f64 * self.ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.ratio.is_finite() && self.ratio > 0.0) {
            return bad(format!("ratio must be positive, got {}", self.ratio));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.n_grid.is_empty() {
            return bad("n_grid is empty".into());
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise_sd must be non-negative, got {}", self.noise_sd));
        }
        if !self.psi.is_finite() {
            return bad("psi must be finite".into());
        }
        self.solve.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        if self.estimand.uses_treatment() && !is_probability_link(&self.link_a) {
            return bad(format!(
                "treatment link `{}` must map into [0, 1]",
                self.link_a.name()
            ));
        }
        for &n in &self.n_grid {
            let p = self.dimension(n);
            if n < 2 {
                return bad(format!("sample size {n} is too small"));
            }
            if p == 0 {
                return bad(format!("n = {n} with ratio {} gives p = 0", self.ratio));
            }
            if let Some(&j) = self.coords.iter().find(|&&j| j == 0 || j > p) {
                return bad(format!("coordinate {j} is outside 1..={p} at n = {n}"));
            }
            self.check_design_dims(p)?;
            if let Some(tp) = &self.true_params {
                for (name, v) in [("alpha", &tp.alpha), ("beta", &tp.beta)] {
                    if let Some(v) = v {
                        if v.len() != p {
                            return bad(format!(
                                "true {name} has length {} but p = {p} at n = {n}",
                                v.len()
                            ));
                        }
                    }
                }
            }
            match self.estimand {
                SimEstimand::GlmUnknownSigma if n % 2 != 0 || p + 3 >= n / 2 => {
                    return bad(format!(
                        "the unknown-sigma split needs even n and p + 3 < n/2 (n = {n}, p = {p})"
                    ));
                }
                SimEstimand::GlmUnknownSigma | SimEstimand::LinearUnknownSigma
                    if !self.design_mean_is_zero() =>
                {
                    return bad("the unknown-sigma estimators assume a zero-mean design".into());
                }
                SimEstimand::LinearUnknownSigma if p >= n => {
                    return bad(format!("least squares needs p < n (n = {n}, p = {p})"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn design_mean_is_zero(&self) -> bool {
        match &self.design {
            DesignKind::GaussianGeneral { mu: MeanSpec::Constant(c), .. } => *c == 0.0,
            DesignKind::GaussianGeneral { mu: MeanSpec::Explicit(m), .. } => m.iter().all(|v| *v == 0.0),
            _ => true,
        }
    }

    fn check_design_dims(&self, p: usize) -> Result<()> {
        if let DesignKind::GaussianGeneral { mu, sigma } = &self.design {
            if let MeanSpec::Explicit(m) = mu {
                if m.len() != p {
                    return Err(Error::ConfigInvalid(format!(
                        "explicit mean has length {} but p = {p}",
                        m.len()
                    )));
                }
            }
            match sigma {
                CovSpec::Explicit(s) if s.shape() != (p, p) => {
                    return Err(Error::ConfigInvalid(format!(
                        "explicit covariance is {}x{} but p = {p}",
                        s.nrows(),
                        s.ncols()
                    )));
                }
                CovSpec::Ar1(r) if !(r.abs() < 1.0) => {
                    return Err(Error::ConfigInvalid(format!("AR(1) coefficient {r} must be in (-1, 1)")));
                }
                CovSpec::Equicorrelated(r) if !(*r < 1.0 && *r > -1.0 / (p.max(2) as f64 - 1.0)) => {
                    return Err(Error::ConfigInvalid(format!(
                        "equicorrelation {r} is not positive definite at p = {p}"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub(crate) fn is_probability_link(link: &LinkSpec) -> bool {
    let (lo, hi) = link.range();
    lo >= 0.0 && hi <= 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for e in [
            SimEstimand::Glm,
            SimEstimand::Ce,
            SimEstimand::Mar,
            SimEstimand::Gcm,
        ] {
            SimConfig::new(e).validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = SimConfig::new(SimEstimand::Glm);
        c.ratio = 0.0;
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        let mut c = SimConfig::new(SimEstimand::Glm);
        c.replicates = 0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::new(SimEstimand::Glm);
        c.n_grid = vec![10];
        c.ratio = 0.01;
        assert!(c.validate().is_err());
        let mut c = SimConfig::new(SimEstimand::Glm);
        c.coords = vec![5000];
        assert!(c.validate().is_err());
        let mut c = SimConfig::new(SimEstimand::GlmUnknownSigma);
        c.n_grid = vec![400];
        c.ratio = 0.5;
        assert!(c.validate().is_err());
        let mut c = SimConfig::new(SimEstimand::Mar);
        c.link_a = LinkSpec::identity();
        assert!(c.validate().is_err());
    }

    #[test]
    fn scheme_names() {
        assert_eq!(CoefScheme::from_name("sparse").unwrap(), CoefScheme::SparseRootP);
        assert!(CoefScheme::from_name("nope").is_err());
        assert_eq!(SimEstimand::from_name("mar").unwrap().name(), "mar");
    }
}
