//! Link functions with analytic derivatives up to third order.

use std::fmt;
use std::sync::Arc;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A link φ together with φ′, φ″, φ‴ and the interval of values φ can attain.
#[derive(Clone)]
pub struct LinkSpec {
    name: String,
    value: ScalarFn,
    d1: ScalarFn,
    d2: ScalarFn,
    d3: ScalarFn,
    range: (f64, f64),
}

impl fmt::Debug for LinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkSpec")
            .field("name", &self.name)
            .field("range", &self.range)
            .finish()
    }
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

impl LinkSpec {
    /// Builds a user-supplied link. The caller is responsible for the
    /// derivative handles being consistent with `value`.
    pub fn new(
        name: impl Into<String>,
        value: ScalarFn,
        d1: ScalarFn,
        d2: ScalarFn,
        d3: ScalarFn,
        range: (f64, f64),
    ) -> Self {
        LinkSpec {
            name: name.into(),
            value,
            d1,
            d2,
            d3,
            range,
        }
    }

    pub fn logistic() -> Self {
        Self::scaled_logistic("logistic", 0.0, 1.0)
    }

    /// `lo + (hi - lo) * expit(t)`, a logistic link squeezed into `(lo, hi)`.
    pub fn scaled_logistic(name: impl Into<String>, lo: f64, hi: f64) -> Self {
        let s = hi - lo;
        LinkSpec::new(
            name,
            Arc::new(move |t| lo + s * expit(t)),
            Arc::new(move |t| {
                let e = expit(t);
                s * e * (1.0 - e)
            }),
            Arc::new(move |t| {
                let e = expit(t);
                s * e * (1.0 - e) * (1.0 - 2.0 * e)
            }),
            Arc::new(move |t| {
                let e = expit(t);
                s * e * (1.0 - e) * (1.0 - 6.0 * e + 6.0 * e * e)
            }),
            (lo, hi),
        )
    }

    /// Missingness link used in the MAR experiments: `0.1 + 0.9 * expit(t)`.
    pub fn bounded_logistic() -> Self {
        Self::scaled_logistic("bounded-logistic", 0.1, 1.0)
    }

    pub fn probit() -> Self {
        LinkSpec::new(
            "probit",
            Arc::new(|t| std_normal().cdf(t)),
            Arc::new(|t| std_normal().pdf(t)),
            Arc::new(|t| -t * std_normal().pdf(t)),
            Arc::new(|t| (t * t - 1.0) * std_normal().pdf(t)),
            (0.0, 1.0),
        )
    }

    pub fn log_linear() -> Self {
        let e: ScalarFn = Arc::new(f64::exp);
        LinkSpec::new(
            "log-linear",
            e.clone(),
            e.clone(),
            e.clone(),
            e,
            (0.0, f64::INFINITY),
        )
    }

    pub fn identity() -> Self {
        LinkSpec::new(
            "identity",
            Arc::new(|t| t),
            Arc::new(|_| 1.0),
            Arc::new(|_| 0.0),
            Arc::new(|_| 0.0),
            (f64::NEG_INFINITY, f64::INFINITY),
        )
    }

    /// Resolves one of the registered link names.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "logistic" | "logit" => Ok(Self::logistic()),
            "probit" => Ok(Self::probit()),
            "log-linear" | "loglinear" | "log" | "poisson" => Ok(Self::log_linear()),
            "identity" | "linear" => Ok(Self::identity()),
            "bounded-logistic" => Ok(Self::bounded_logistic()),
            other => Err(Error::UnknownLink(other.to_string())),
        }
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["logistic", "probit", "log-linear", "identity", "bounded-logistic"]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn value(&self, t: f64) -> f64 {
        (self.value)(t)
    }

    pub fn d1(&self, t: f64) -> f64 {
        (self.d1)(t)
    }

    pub fn d2(&self, t: f64) -> f64 {
        (self.d2)(t)
    }

    pub fn d3(&self, t: f64) -> f64 {
        (self.d3)(t)
    }

    /// φ^(k)(t) for k in 0..=3.
    pub fn deriv(&self, k: usize, t: f64) -> Result<f64> {
        match k {
            0 => Ok(self.value(t)),
            1 => Ok(self.d1(t)),
            2 => Ok(self.d2(t)),
            3 => Ok(self.d3(t)),
            _ => Err(Error::InvalidOrder(k)),
        }
    }

    /// Handle for φ^(k), used by the quadrature loops to avoid a per-node match.
    pub(crate) fn handle(&self, k: usize) -> Result<&ScalarFn> {
        match k {
            0 => Ok(&self.value),
            1 => Ok(&self.d1),
            2 => Ok(&self.d2),
            3 => Ok(&self.d3),
            _ => Err(Error::InvalidOrder(k)),
        }
    }
}
