//! Replicate summaries and normal QQ diagnostics.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const MIN_QQ_REPLICATES: usize = 30;

/// Error metrics of one parameter at one sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `√n · (mean estimate − mean truth)`.
    pub sqrtn_bias: f64,
    /// Mean squared deviation of the errors from their mean.
    pub variance: f64,
    /// Mean squared error against the realized truth.
    pub mse: f64,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    pub count: usize,
}

/// Metrics over `(estimate, truth)` pairs. With these definitions
/// `mse = variance + (sqrtn_bias/√n)²` holds up to rounding.
pub fn metrics(n: usize, pairs: &[(f64, f64)]) -> Option<Metrics> {
    if pairs.is_empty() {
        return None;
    }
    let m = pairs.len() as f64;
    let mean_estimate = pairs.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_truth = pairs.iter().map(|p| p.1).sum::<f64>() / m;
    let bias = pairs.iter().map(|p| p.0 - p.1).sum::<f64>() / m;
    let variance = pairs.iter().map(|p| (p.0 - p.1 - bias).powi(2)).sum::<f64>() / m;
    let mse = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum::<f64>() / m;
    Some(Metrics {
        sqrtn_bias: (n as f64).sqrt() * bias,
        variance,
        mse,
        mean_estimate,
        mean_truth,
        count: pairs.len(),
    })
}

/// Plot-ready QQ data: sorted standardized values against normal quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct QqData {
    pub qq_correlation: f64,
    pub standardized: Vec<f64>,
    pub normal_quantiles: Vec<f64>,
}

/// Standardizes `estimates − truth` by its empirical mean and standard
/// deviation and correlates the sorted values with the normal quantiles at
/// plotting positions `(i − 0.5)/m`.
pub fn normality_diagnostics(estimates: &[f64], truth: f64) -> Result<QqData> {
    let m = estimates.len();
    if m < MIN_QQ_REPLICATES {
        return Err(Error::TooFewReplicates {
            needed: MIN_QQ_REPLICATES,
            got: m,
        });
    }
    if estimates.iter().any(|v| !v.is_finite()) || !truth.is_finite() {
        return Err(Error::NonFiniteValue("QQ input".into()));
    }
    let mf = m as f64;
    let centered: Vec<f64> = estimates.iter().map(|v| v - truth).collect();
    let mean = centered.iter().sum::<f64>() / mf;
    let sd = (centered.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (mf - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::NonFiniteValue(
            "standardized values (zero standard deviation)".into(),
        ));
    }
    let mut standardized: Vec<f64> = centered.iter().map(|v| (v - mean) / sd).collect();
    standardized.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let normal_quantiles: Vec<f64> = (1..=m)
        .map(|i| normal.inverse_cdf((i as f64 - 0.5) / mf))
        .collect();
    Ok(QqData {
        qq_correlation: pearson(&standardized, &normal_quantiles),
        standardized,
        normal_quantiles,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
