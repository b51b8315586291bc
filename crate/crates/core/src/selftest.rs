//! Built-in numerical checks run by the `selftest` command.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::gauss_link_moments::{eval_fk, eval_fk_grad, IndexLaw};
use crate::link::LinkSpec;
use crate::moment_systems::{
    forward_ce, forward_gcm, forward_glm, forward_glm0, forward_mar, glm_jacobian, invert_glm, invert_glm0,
    reduce_glm_moments, solve_ce, solve_gcm, solve_mar, CeParams, GcmParams, MarParams, SolveOptions,
};
use crate::simlab::{diagnostic_identities, run_oracle_suite};
use crate::ustat::{collect_moments, reference, Dataset, DesignModel, Estimand, MomentKey, MomentSet};

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Reported for information; does not affect the verdict.
    pub informational: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<SelftestCheck>,
}

impl SelftestReport {
    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(SelftestCheck {
            name: name.into(),
            passed,
            detail: detail.into(),
            informational: false,
        });
    }

    fn note(&mut self, name: impl Into<String>, detail: impl Into<String>) {
        self.checks.push(SelftestCheck {
            name: name.into(),
            passed: true,
            detail: detail.into(),
            informational: true,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || c.informational)
    }

    pub fn failures(&self) -> Vec<&SelftestCheck> {
        self.checks
            .iter()
            .filter(|c| !c.passed && !c.informational)
            .collect()
    }
}

fn max_err<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> f64 {
    pairs
        .into_iter()
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn law(l: f64, g: f64) -> IndexLaw {
    IndexLaw { lambda: l, gamma2: g }
}

fn quadrature_checks(r: &mut SelftestReport) {
    let ll = LinkSpec::log_linear();
    let mut pairs = Vec::new();
    for &(l, g) in &[(-0.5, 0.3), (0.0, 1.0), (0.8, 2.0)] {
        for k in 0..4 {
            pairs.push((eval_fk(&ll, k, &law(l, g)).unwrap_or(f64::NAN), (l + g / 2.0f64).exp()));
        }
    }
    let e = max_err(pairs);
    r.push("quadrature: log-linear closed form", e <= 1e-10, format!("max err {e:.2e}"));

    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let pr = LinkSpec::probit();
    let mut pairs = Vec::new();
    for &(l, g) in &[(-0.5f64, 0.3f64), (0.5, 2.0)] {
        let s = (1.0 + g).sqrt();
        pairs.push((eval_fk(&pr, 0, &law(l, g)).unwrap_or(f64::NAN), n.cdf(l / s)));
        pairs.push((eval_fk(&pr, 1, &law(l, g)).unwrap_or(f64::NAN), n.pdf(l / s) / s));
    }
    let e = max_err(pairs);
    r.push("quadrature: probit closed forms", e <= 1e-8, format!("max err {e:.2e}"));
}

fn derivative_checks(r: &mut SelftestReport) {
    let h = 1e-4;
    for name in LinkSpec::builtin_names() {
        let link = LinkSpec::from_name(name).expect("builtin link");
        let mut worst = 0.0f64;
        for &(l, g) in &[(-0.7, 0.5), (0.2, 1.3)] {
            for k in 0..2 {
                let f = |l: f64, g: f64| eval_fk(&link, k, &law(l, g)).unwrap_or(f64::NAN);
                let (dl, dg) = eval_fk_grad(&link, k, &law(l, g)).unwrap_or((f64::NAN, f64::NAN));
                worst = worst.max(max_err([
                    (dl, (f(l + h, g) - f(l - h, g)) / (2.0 * h)),
                    (dg, (f(l, g + h) - f(l, g - h)) / (2.0 * h)),
                ]));
            }
        }
        r.push(format!("Stein derivatives vs finite differences: {name}"), worst <= 1e-6, format!("max err {worst:.2e}"));
    }
    let link = LinkSpec::logistic();
    let mut worst = 0.0f64;
    for &(l, g) in &[(0.3, 1.0), (-1.0, 2.5)] {
        let j = glm_jacobian(&link, &law(l, g)).unwrap_or_else(|_| nalgebra::Matrix2::from_element(f64::NAN));
        let f = |l: f64, g: f64| forward_glm(&link, &law(l, g)).unwrap_or((f64::NAN, f64::NAN));
        let (lp, lm) = (f(l + h, g), f(l - h, g));
        let (gp, gm) = (f(l, g + h), f(l, g - h));
        worst = worst.max(max_err([
            (j[(0, 0)], (lp.0 - lm.0) / (2.0 * h)),
            (j[(0, 1)], (gp.0 - gm.0) / (2.0 * h)),
            (j[(1, 0)], (lp.1 - lm.1) / (2.0 * h)),
            (j[(1, 1)], (gp.1 - gm.1) / (2.0 * h)),
        ]));
    }
    r.push("GLM Jacobian vs finite differences", worst <= 1e-6, format!("max err {worst:.2e}"));
}

fn ustat_checks(r: &mut SelftestReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(3..=25);
        let p = rng.random_range(1..=5);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let y = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-1.0..2.0));
        let a = nalgebra::DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let b = DMatrix::from_fn(p, p, |_, _| rng.random_range(-0.5..0.5));
        let sigma = &b * b.transpose() + DMatrix::identity(p, p);
        let ds = match Dataset::new(x, y, Some(a)) {
            Ok(d) => d,
            Err(_) => continue,
        };
        let Ok(design) = DesignModel::known(sigma.clone(), false) else { continue };
        for e in [Estimand::Glm, Estimand::Ce, Estimand::Mar, Estimand::Gcm] {
            let (Ok(fast), Ok(slow)) = (
                collect_moments(&ds, &design, e, &[1]),
                reference::collect_moments(&ds, &sigma, e, &[1]),
            ) else {
                worst = f64::INFINITY;
                continue;
            };
            for (k, v) in fast.iter() {
                worst = worst.max(max_err([(v.value, slow.get(k).unwrap_or(f64::NAN))]));
            }
        }
    }
    r.push("U-statistics vs pair enumeration", worst <= 1e-12, format!("max rel err {worst:.2e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
    let y = nalgebra::DVector::from_fn(6, |_, _| rng.random_range(0.0..1.0));
    let a = nalgebra::DVector::from_fn(6, |i, _| (i % 2) as f64);
    let ok = Dataset::new(x, y, Some(a))
        .and_then(|ds| {
            let mut buf = Vec::new();
            ds.to_csv_writer(&mut buf)?;
            let back = Dataset::from_csv_reader(buf.as_slice())?;
            Ok(back.x() == ds.x() && back.y() == ds.y() && back.a() == ds.a())
        })
        .unwrap_or(false);
    r.push("dataset CSV round trip", ok, if ok { "bit-identical" } else { "mismatch" });
}

fn round_trip_checks(r: &mut SelftestReport) {
    let opts = SolveOptions::default();
    let lg = LinkSpec::logistic();
    let e0 = forward_glm0(&lg, 1.3)
        .and_then(|m| invert_glm0(&lg, m, &opts))
        .map(|s| (s.get("gamma2") - 1.3).abs())
        .unwrap_or(f64::INFINITY);
    r.push("round trip: GLM, zero mean", e0 <= 1e-7, format!("err {e0:.2e}"));

    let e1 = forward_glm(&lg, &law(0.4, 1.7))
        .and_then(|(m1, m2)| invert_glm(&lg, m1, m2, &opts))
        .map(|s| (s.get("lambda") - 0.4).abs().max((s.get("gamma2") - 1.7).abs()))
        .unwrap_or(f64::INFINITY);
    r.push("round trip: GLM, unknown mean", e1 <= 1e-7, format!("err {e1:.2e}"));

    let ce = CeParams {
        psi: 0.7,
        lambda_alpha: 0.2,
        gamma2_alpha: 0.8,
        lambda_beta: -0.3,
        gamma_alpha_beta: 0.25,
        m_x2: 0.4,
    };
    let e = forward_ce(&lg, &ce)
        .and_then(|ms| solve_ce(&ms, &lg, &opts))
        .map(|s| (s.get("psi") - ce.psi).abs().max((s.get("gamma_alpha_beta") - ce.gamma_alpha_beta).abs()))
        .unwrap_or(f64::INFINITY);
    r.push("round trip: CE staged solve", e <= 1e-7, format!("err {e:.2e}"));

    let mar = MarParams {
        psi: -0.4,
        lambda_alpha: 0.3,
        gamma2_alpha: 1.1,
        gamma_alpha_beta: 0.2,
        m_x2: 0.6,
    };
    let bl = LinkSpec::bounded_logistic();
    let e = forward_mar(&bl, &mar)
        .and_then(|ms| solve_mar(&ms, &bl, &opts))
        .map(|s| (s.get("psi") - mar.psi).abs().max((s.get("gamma_alpha_beta") - mar.gamma_alpha_beta).abs()))
        .unwrap_or(f64::INFINITY);
    r.push("round trip: MAR staged solve", e <= 1e-7, format!("err {e:.2e}"));

    let gcm = GcmParams {
        lambda_alpha: 0.2,
        gamma2_alpha: 0.8,
        lambda_beta: -0.3,
        gamma2_beta: 1.1,
        gamma_alpha_beta: 0.3,
        m_x2: 0.4,
    };
    let pr = LinkSpec::probit();
    let e = forward_gcm(&lg, &pr, &gcm)
        .and_then(|ms| solve_gcm(&ms, &lg, &pr, &opts))
        .and_then(|s| Ok((s.get("psi") - gcm.psi(&lg, &pr)?).abs()))
        .unwrap_or(f64::INFINITY);
    r.push("round trip: GCM staged solve", e <= 1e-7, format!("err {e:.2e}"));
}

/// Three independent routes to the reduced second GLM moment, each of which
/// singles out `f_1²γ²` over `f_1γ²`.
fn m2_form_checks(r: &mut SelftestReport) {
    let lg = LinkSpec::logistic();
    let (l, g, mx2) = (0.3, 1.0, 0.5);
    let Ok(f0) = eval_fk(&lg, 0, &law(l, g)) else { return r.push("m2 form", false, "quadrature failed") };
    let Ok(f1) = eval_fk(&lg, 1, &law(l, g)) else { return r.push("m2 form", false, "quadrature failed") };
    let squared = f1 * f1 * g;
    let printed = f1 * g;

    let ms = MomentSet::new()
        .with(MomentKey::Y, f0)
        .with(MomentKey::X2, mx2)
        .with(MomentKey::XYX, f0 * mx2 + f1 * l)
        .with(MomentKey::XY2, f0 * f0 * mx2 + f1 * f1 * g + 2.0 * f0 * f1 * l);
    let reduced = reduce_glm_moments(&ms).map(|v| v.1).unwrap_or(f64::NAN);
    r.push(
        "m2 form (substitution of the moment chain)",
        (reduced - squared).abs() <= 1e-12,
        format!("reduced {reduced:.10}, f1²γ² {squared:.10}, f1·γ² {printed:.10}"),
    );

    let zero = forward_glm(&lg, &law(0.0, g)).map(|v| v.1).unwrap_or(f64::NAN);
    let glm0 = forward_glm0(&lg, g).unwrap_or(f64::NAN);
    let f1z = eval_fk(&lg, 1, &law(0.0, g)).unwrap_or(f64::NAN);
    r.push(
        "m2 form (zero-mean specialization)",
        (zero - glm0).abs() <= 1e-12 && (zero - f1z * g).abs() > 1e-3,
        format!("λ = 0 gives {zero:.10}, zero-mean map {glm0:.10}, f1·γ² {:.10}", f1z * g),
    );

    let h = 1e-5;
    let m2 = |g: f64| forward_glm(&lg, &law(l, g)).map(|v| v.1).unwrap_or(f64::NAN);
    let fd = (m2(g + h) - m2(g - h)) / (2.0 * h);
    let j22 = glm_jacobian(&lg, &law(l, g)).map(|j| j[(1, 1)]).unwrap_or(f64::NAN);
    let f1_at = |g: f64| eval_fk(&lg, 1, &law(l, g)).unwrap_or(f64::NAN);
    let fd_printed = (f1_at(g + h) * (g + h) - f1_at(g - h) * (g - h)) / (2.0 * h);
    r.push(
        "m2 form (Jacobian entry f1(f1 + γ²f3))",
        (fd - j22).abs() <= 1e-6 && (fd_printed - j22).abs() > 1e-3,
        format!("J22 {j22:.8}, d(f1²γ²)/dγ² {fd:.8}, d(f1·γ²)/dγ² {fd_printed:.8}"),
    );
}

fn oracle_checks(r: &mut SelftestReport) {
    match run_oracle_suite(1_000_000, 20240617, true) {
        Ok(reports) => {
            let diagnostic = diagnostic_identities();
            for rep in reports {
                let detail = format!(
                    "lhs {:.6}, rhs {:.6}, se {:.2e}, z {:+.2}",
                    rep.lhs, rep.rhs, rep.se, rep.z
                );
                let name = format!("Stein oracle {} (point {})", rep.id, rep.point);
                if diagnostic.contains(&rep.id) {
                    r.note(name, format!("{detail} (expected to fail)"));
                } else {
                    r.push(name, rep.passes(), detail);
                }
            }
        }
        Err(e) => r.push("Stein oracle suite", false, e.to_string()),
    }
}

/// Runs the checks; `quick` skips the Monte-Carlo oracle suite.
pub fn run_selftest(quick: bool) -> SelftestReport {
    let mut r = SelftestReport::default();
    quadrature_checks(&mut r);
    derivative_checks(&mut r);
    ustat_checks(&mut r);
    round_trip_checks(&mut r);
    m2_form_checks(&mut r);
    if !quick {
        oracle_checks(&mut r);
    }
    r
}
