//! End-to-end estimation pipelines: moment collection followed by inversion.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gauss_link_moments::{eval_fk, IndexLaw};
use crate::link::LinkSpec;
use crate::moment_systems::{
    invert_glm, invert_glm0, reduce_glm_moments, solve_ce, solve_gcm, solve_mar, SolveOptions,
    SolveReport,
};
use crate::ustat::{collect_moments, Dataset, DesignModel, Estimand, MomentKey, MomentSet, SigmaMode};

const F1_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMode {
    KnownSigma,
    UnknownSigmaSplit,
    UnknownSigmaLinear,
}

impl fmt::Display for EstimationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimationMode::KnownSigma => "known-sigma",
            EstimationMode::UnknownSigmaSplit => "unknown-sigma-split",
            EstimationMode::UnknownSigmaLinear => "unknown-sigma-linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimand: String,
    pub parameters: BTreeMap<String, f64>,
    pub moments_used: MomentSet,
    pub solver: SolveReport,
    pub mode: EstimationMode,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    fn new(
        estimand: &str,
        parameters: BTreeMap<String, f64>,
        moments_used: MomentSet,
        solver: SolveReport,
        mode: EstimationMode,
    ) -> Result<Self> {
        if let Some((k, _)) = parameters.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("estimate `{k}`")));
        }
        let mut warnings = Vec::new();
        if solver.projected {
            warnings.push(
                "input moments were outside the attainable range; the estimate was projected onto the boundary"
                    .to_string(),
            );
        }
        Ok(EstimateReport {
            estimand: estimand.to_string(),
            parameters,
            moments_used,
            solver,
            mode,
            warnings,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.parameters.get(name).copied()
    }

    /// Flat `(key, value)` rows: parameters, moments, then solver diagnostics.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("estimand".to_string(), self.estimand.clone()),
            ("mode".to_string(), self.mode.to_string()),
        ];
        for (k, v) in &self.parameters {
            out.push((k.clone(), format!("{v:e}")));
        }
        for (k, v) in self.moments_used.iter() {
            out.push((k.to_string(), format!("{:e}", v.value)));
        }
        out.push(("solver_residual_norm".into(), format!("{:e}", self.solver.residual_norm)));
        out.push(("solver_iterations".into(), self.solver.iterations.to_string()));
        out.push(("solver_projected".into(), self.solver.projected.to_string()));
        out.push((
            "solver_jacobian_condition".into(),
            format!("{:e}", self.solver.jacobian_condition),
        ));
        for (i, w) in self.warnings.iter().enumerate() {
            out.push((format!("warning_{}", i + 1), w.clone()));
        }
        out
    }
}

fn beta_name(j: usize) -> String {
    format!("beta_{j}")
}

fn require_known(design: &DesignModel) -> Result<()> {
    if design.mode() != SigmaMode::KnownSigma {
        return Err(Error::InvalidOption(
            "this estimator needs a design with known sigma".into(),
        ));
    }
    Ok(())
}

fn f1_at(link: &LinkSpec, lambda: f64, gamma2: f64) -> Result<f64> {
    let f1 = eval_fk(link, 1, &IndexLaw::new(lambda, gamma2)?)?;
    if f1.abs() < F1_FLOOR {
        return Err(Error::DegenerateF1(f1));
    }
    Ok(f1)
}

/// Zero-mean path: `γ̂²` from `m_XY2`, then `β̂_j = m_β_j / f_1(0, γ̂²)`.
fn glm0_from_moments(
    ms: &MomentSet,
    link: &LinkSpec,
    coords: &[usize],
    opts: &SolveOptions,
) -> Result<(BTreeMap<String, f64>, SolveReport)> {
    let rep = invert_glm0(link, ms.get(MomentKey::XY2)?, opts)?;
    let g2 = rep.get("gamma2");
    let mut params = BTreeMap::from([("gamma2_beta".to_string(), g2)]);
    if !coords.is_empty() {
        let f1 = f1_at(link, 0.0, g2)?;
        for &j in coords {
            params.insert(beta_name(j), ms.get(MomentKey::Beta(j))? / f1);
        }
    }
    Ok((params, rep))
}

pub fn estimate_glm(
    ds: &Dataset,
    design: &DesignModel,
    link: &LinkSpec,
    coords: &[usize],
    opts: &SolveOptions,
) -> Result<EstimateReport> {
    require_known(design)?;
    if design.mu_known_zero {
        let ms = collect_moments(ds, design, Estimand::Glm0, coords)?;
        let (params, rep) = glm0_from_moments(&ms, link, coords, opts)?;
        return EstimateReport::new("glm0", params, ms, rep, EstimationMode::KnownSigma);
    }
    let ms = collect_moments(ds, design, Estimand::Glm, coords)?;
    let (m1, m2) = reduce_glm_moments(&ms)?;
    let rep = invert_glm(link, m1, m2, opts)?;
    let (lambda, g2) = (rep.get("lambda"), rep.get("gamma2"));
    let mut params = BTreeMap::from([
        ("lambda_beta".to_string(), lambda),
        ("gamma2_beta".to_string(), g2),
    ]);
    if !coords.is_empty() {
        let law = IndexLaw::new(lambda, g2)?;
        let f0 = eval_fk(link, 0, &law)?;
        let f1 = f1_at(link, lambda, g2)?;
        for &j in coords {
            let b = (ms.get(MomentKey::Beta(j))? - f0 * ms.get(MomentKey::Nu(j))?) / f1;
            params.insert(beta_name(j), b);
        }
    }
    EstimateReport::new("glm", params, ms, rep, EstimationMode::KnownSigma)
}

/// `(m − p − 1)/m`: makes `vᵀΣ̃⁻¹v` unbiased for `vᵀΣ⁻¹v` when Σ̃ is the
/// average of `m` Gaussian outer products.
pub fn wishart_rescale_factor(m: usize, p: usize) -> f64 {
    (m as f64 - p as f64 - 1.0) / m as f64
}

/// Zero-mean GLM with Σ replaced by the Gram matrix of the second half of the
/// sample; moments are formed on the first half.
pub fn estimate_glm_unknown_sigma(
    ds: &Dataset,
    link: &LinkSpec,
    coords: &[usize],
    opts: &SolveOptions,
) -> Result<EstimateReport> {
    let (n, p) = (ds.n(), ds.p());
    if n % 2 != 0 {
        return Err(Error::InsufficientSamples(format!(
            "the sample split needs an even number of rows, got {n}"
        )));
    }
    let half = n / 2;
    if p + 3 >= half {
        return Err(Error::InsufficientSamples(format!(
            "need p + 3 < n/2, got p = {p}, n/2 = {half}"
        )));
    }
    let held_out = ds.x().rows(half, half);
    let gram = held_out.tr_mul(&held_out) / half as f64;
    let gram = (&gram + gram.transpose()) * 0.5;
    let design = DesignModel::known(gram, true).map_err(|e| match e {
        Error::SingularSigma(_) => Error::SingularGram,
        other => other,
    })?;
    let first = ds.rows(0, half)?;
    let raw = collect_moments(&first, &design, Estimand::Glm0, coords)?;
    let ms = raw.scaled(wishart_rescale_factor(half, p));
    let (params, rep) = glm0_from_moments(&ms, link, coords, opts)?;
    EstimateReport::new("glm0", params, ms, rep, EstimationMode::UnknownSigmaSplit)
}

/// Linear model with unknown Σ (requires `p < n`): least squares plus the
/// residual-corrected quadratic form `Yᵀ(H − (p/n)I)Y / (n − p)`.
pub fn estimate_linear_unknown_sigma(ds: &Dataset, coords: &[usize]) -> Result<EstimateReport> {
    let (n, p) = (ds.n(), ds.p());
    if p >= n {
        return Err(Error::RankDeficientDesign);
    }
    for &j in coords {
        if j == 0 || j > p {
            return Err(Error::IndexOutOfRange { index: j, p });
        }
    }
    let qr = ds.x().clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if rmax == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-12 * rmax) {
        return Err(Error::RankDeficientDesign);
    }
    let mut qty = ds.y().clone();
    qr.q_tr_mul(&mut qty);
    let head: DVector<f64> = qty.rows(0, p).into_owned();
    let hy_norm2 = head.norm_squared();
    let y_norm2 = ds.y().norm_squared();
    let gamma2 = (hy_norm2 - (p as f64 / n as f64) * y_norm2) / (n - p) as f64;
    let beta = r
        .solve_upper_triangular(&head)
        .ok_or(Error::RankDeficientDesign)?;
    let mean_y = ds.y().mean();

    let mut params = BTreeMap::from([
        ("lambda_beta".to_string(), mean_y),
        ("gamma2_beta".to_string(), gamma2),
    ]);
    for &j in coords {
        params.insert(beta_name(j), beta[j - 1]);
    }
    let moments = MomentSet::new().with(MomentKey::Y, mean_y);
    let solver = SolveReport {
        solution: BTreeMap::new(),
        residual_norm: 0.0,
        iterations: 0,
        projected: false,
        jacobian_condition: rmax / r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
    };
    EstimateReport::new("linear", params, moments, solver, EstimationMode::UnknownSigmaLinear)
}

/// `U_{n,2}[Y₁X₁ᵀX₂Y₂]`, which estimates `βᵀΣ²β` without knowledge of Σ.
pub fn null_test_statistic(ds: &Dataset) -> Result<f64> {
    if ds.n() < 2 {
        return Err(Error::EmptyDataset("null test needs n >= 2".into()));
    }
    let design = DesignModel::identity(ds.p(), true);
    crate::ustat::ustat2_bilinear(ds, ds.y(), ds.y(), &design)
}

fn require_binary(a: &DVector<f64>) -> Result<()> {
    match a.iter().find(|v| **v != 0.0 && **v != 1.0) {
        Some(v) => Err(Error::NonBinaryA(*v)),
        None => Ok(()),
    }
}

fn report_from_solution(
    name: &str,
    ms: MomentSet,
    rep: SolveReport,
) -> Result<EstimateReport> {
    let params = rep.solution.clone();
    EstimateReport::new(name, params, ms, rep, EstimationMode::KnownSigma)
}

pub fn estimate_ce(
    ds: &Dataset,
    design: &DesignModel,
    link: &LinkSpec,
    opts: &SolveOptions,
) -> Result<EstimateReport> {
    require_known(design)?;
    require_binary(ds.require_a()?)?;
    let ms = collect_moments(ds, design, Estimand::Ce, &[])?;
    let rep = solve_ce(&ms, link, opts)?;
    report_from_solution("ce", ms, rep)
}

pub fn estimate_mar(
    ds: &Dataset,
    design: &DesignModel,
    link: &LinkSpec,
    opts: &SolveOptions,
) -> Result<EstimateReport> {
    require_known(design)?;
    require_binary(ds.require_a()?)?;
    let ms = collect_moments(ds, design, Estimand::Mar, &[])?;
    let rep = solve_mar(&ms, link, opts)?;
    report_from_solution("mar", ms, rep)
}

pub fn estimate_gcm(
    ds: &Dataset,
    design: &DesignModel,
    link_a: &LinkSpec,
    link_y: &LinkSpec,
    opts: &SolveOptions,
) -> Result<EstimateReport> {
    require_known(design)?;
    ds.require_a()?;
    let ms = collect_moments(ds, design, Estimand::Gcm, &[])?;
    let rep = solve_gcm(&ms, link_a, link_y, opts)?;
    report_from_solution("gcm", ms, rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn zero_response_projects_and_zeroes_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 50, 4);
        let ds = Dataset::new(x, DVector::zeros(50), None).unwrap();
        let design = DesignModel::identity(4, true);
        let rep = estimate_glm(&ds, &design, &LinkSpec::logistic(), &[1, 3], &SolveOptions::default()).unwrap();
        assert_eq!(rep.get("gamma2_beta"), Some(1e-8));
        assert_eq!(rep.get("beta_1"), Some(0.0));
        assert!(rep.solver.projected);
        assert!(!rep.warnings.is_empty());
    }

    #[test]
    fn identity_link_recovers_signal_in_large_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, p) = (5000, 10);
        let x = gaussian(&mut rng, n, p);
        let beta = DVector::from_fn(p, |i, _| 0.1 * (i as f64 + 1.0) / 3.0);
        let y = &x * &beta;
        let ds = Dataset::new(x, y, None).unwrap();
        let design = DesignModel::identity(p, true);
        let rep = estimate_glm(&ds, &design, &LinkSpec::identity(), &[2], &SolveOptions::default()).unwrap();
        let truth = beta.norm_squared();
        assert!((rep.get("gamma2_beta").unwrap() - truth).abs() < 0.1 * truth);
        assert!((rep.get("beta_2").unwrap() - beta[1]).abs() < 0.02);
    }

    #[test]
    fn scale_covariance_for_identity_link() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, p) = (80, 5);
        let x = gaussian(&mut rng, n, p);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] - 0.5 * x[(i, 2)] + 0.3);
        let sigma = DMatrix::from_fn(p, p, |i, j| 0.4f64.powi((i as i32 - j as i32).abs()));
        let c: f64 = 2.7;
        let d1 = DesignModel::known(sigma.clone(), false).unwrap();
        let d2 = DesignModel::known(sigma * c, false).unwrap();
        let ds1 = Dataset::new(x.clone(), y.clone(), None).unwrap();
        let ds2 = Dataset::new(x * c.sqrt(), y, None).unwrap();
        let opts = SolveOptions::default();
        let r1 = estimate_glm(&ds1, &d1, &LinkSpec::identity(), &[], &opts).unwrap();
        let r2 = estimate_glm(&ds2, &d2, &LinkSpec::identity(), &[], &opts).unwrap();
        for k in ["gamma2_beta", "lambda_beta"] {
            assert_abs_diff_eq!(r1.get(k).unwrap(), r2.get(k).unwrap(), epsilon = 1e-10);
        }
    }

    #[test]
    fn wishart_prefactor_arithmetic() {
        assert_abs_diff_eq!(wishart_rescale_factor(1000, 499), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn unknown_sigma_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = Dataset::new(gaussian(&mut rng, 20, 8), DVector::zeros(20), None).unwrap();
        assert!(matches!(
            estimate_glm_unknown_sigma(&ds, &LinkSpec::identity(), &[], &SolveOptions::default()),
            Err(Error::InsufficientSamples(_))
        ));
        let ds = Dataset::new(gaussian(&mut rng, 21, 2), DVector::zeros(21), None).unwrap();
        assert!(matches!(
            estimate_glm_unknown_sigma(&ds, &LinkSpec::identity(), &[], &SolveOptions::default()),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn unknown_sigma_is_invariant_to_within_half_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, p) = (60, 4);
        let x = gaussian(&mut rng, n, p);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + 0.5 * x[(i, 1)]);
        let ds = Dataset::new(x, y, None).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm[..30].reverse();
        perm[30..].rotate_left(7);
        let opts = SolveOptions::default();
        let a = estimate_glm_unknown_sigma(&ds, &LinkSpec::identity(), &[1], &opts).unwrap();
        let b = estimate_glm_unknown_sigma(&ds.permuted(&perm).unwrap(), &LinkSpec::identity(), &[1], &opts).unwrap();
        for (k, v) in &a.parameters {
            assert_abs_diff_eq!(*v, b.parameters[k], epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_unknown_sigma_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, p) = (40, 6);
        let x = gaussian(&mut rng, n, p);
        let beta = DVector::from_fn(p, |i, _| i as f64 - 2.0);
        let y = &x * &beta;
        let ds = Dataset::new(x.clone(), y.clone(), None).unwrap();
        let rep = estimate_linear_unknown_sigma(&ds, &[1, 6]).unwrap();
        assert_abs_diff_eq!(rep.get("gamma2_beta").unwrap(), y.norm_squared() / n as f64, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.get("beta_6").unwrap(), 3.0, epsilon = 1e-9);

        let ds0 = Dataset::new(x.clone(), DVector::zeros(n), None).unwrap();
        let rep = estimate_linear_unknown_sigma(&ds0, &[2]).unwrap();
        for v in rep.parameters.values() {
            assert_eq!(*v, 0.0);
        }

        let mut xd = x;
        let c0 = xd.column(0).clone_owned();
        xd.set_column(1, &c0);
        let dsr = Dataset::new(xd, y, None).unwrap();
        assert_eq!(estimate_linear_unknown_sigma(&dsr, &[]).unwrap_err(), Error::RankDeficientDesign);
    }

    #[test]
    fn null_statistic_hand_instance() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 2.0, -1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let ds = Dataset::new(x.clone(), y.clone(), None).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    total += y[i] * x.row(i).dot(&x.row(j)) * y[j];
                }
            }
        }
        assert_abs_diff_eq!(null_test_statistic(&ds).unwrap(), total / 6.0, epsilon = 1e-14);
        let ds0 = Dataset::new(x, DVector::zeros(3), None).unwrap();
        assert_eq!(null_test_statistic(&ds0).unwrap(), 0.0);
    }

    #[test]
    fn observational_estimands_validate_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(&mut rng, 30, 3);
        let design = DesignModel::identity(3, false);
        let opts = SolveOptions::default();
        let no_a = Dataset::new(x.clone(), DVector::zeros(30), None).unwrap();
        assert_eq!(
            estimate_mar(&no_a, &design, &LinkSpec::logistic(), &opts).unwrap_err(),
            Error::MissingResponseA
        );
        let half = DVector::from_element(30, 0.5);
        let bad = Dataset::new(x, DVector::zeros(30), Some(half)).unwrap();
        assert_eq!(
            estimate_ce(&bad, &design, &LinkSpec::logistic(), &opts).unwrap_err(),
            Error::NonBinaryA(0.5)
        );
    }
}
