//! Forward moment maps and their inversion.
//!
//! The GLM index system `(λ, γ²) ↦ (f_0, f_1²γ²)` is inverted by a projected,
//! damped Newton iteration with the analytic Jacobian. The observational-study
//! systems reuse it for each nonlinear index and finish with small linear
//! solves.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::gauss_link_moments::{eval_all, eval_bivariate, eval_fk, BivariateIndexLaw, IndexLaw};
use crate::link::LinkSpec;
use crate::ustat::{MomentKey, MomentSet};

const DET_FLOOR: f64 = 1e-14;
const LINEAR_COND_MAX: f64 = 1e12;
const F1_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub tol_solve: f64,
    pub max_iter: usize,
    pub lambda_bounds: (f64, f64),
    pub gamma2_bounds: (f64, f64),
    /// Step shrink factor used by the backtracking line search.
    pub damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_solve: 1e-10,
            max_iter: 100,
            lambda_bounds: (-6.0, 6.0),
            gamma2_bounds: (1e-8, 25.0),
            damping: 0.5,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let (l0, l1) = self.lambda_bounds;
        let (g0, g1) = self.gamma2_bounds;
        if !(l0 < l1) || !(g0 < g1) || g0 < 0.0 {
            return Err(Error::InvalidOption("solver bounds must be non-empty intervals".into()));
        }
        if !(self.tol_solve > 0.0) {
            return Err(Error::InvalidOption("tol_solve must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::InvalidOption("damping factor must lie in (0, 1)".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidOption("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: BTreeMap<String, f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub projected: bool,
    pub jacobian_condition: f64,
}

impl SolveReport {
    pub fn get(&self, name: &str) -> f64 {
        *self
            .solution
            .get(name)
            .unwrap_or_else(|| panic!("solution has no parameter `{name}`"))
    }

    fn from_pairs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

fn cond2(m: &Matrix2<f64>) -> f64 {
    let sv = m.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn cond4(m: &Matrix4<f64>) -> f64 {
    let sv = m.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

// ---------------------------------------------------------------------------
// Zero-mean GLM

/// `f_1(0, γ²)² · γ²`.
pub fn forward_glm0(link: &LinkSpec, gamma2: f64) -> Result<f64> {
    let f1 = eval_fk(link, 1, &IndexLaw::new(0.0, gamma2)?)?;
    Ok(f1 * f1 * gamma2)
}

fn forward_glm0_with_slope(link: &LinkSpec, gamma2: f64) -> Result<(f64, f64)> {
    let law = IndexLaw::new(0.0, gamma2)?;
    let f1 = eval_fk(link, 1, &law)?;
    let f3 = eval_fk(link, 3, &law)?;
    Ok((f1 * f1 * gamma2, f1 * (f1 + gamma2 * f3)))
}

/// Inverts the monotone zero-mean map, clamping out-of-range input.
pub fn invert_glm0(link: &LinkSpec, m_xy2: f64, opts: &SolveOptions) -> Result<SolveReport> {
    opts.validate()?;
    if !m_xy2.is_finite() {
        return Err(Error::NonFiniteValue("m_XY2".into()));
    }
    let (lo, hi) = opts.gamma2_bounds;
    const GRID: usize = 64;
    let grid: Vec<f64> = (0..GRID)
        .map(|i| {
            let t = i as f64 / (GRID - 1) as f64;
            if lo > 0.0 {
                lo * (hi / lo).powf(t)
            } else {
                lo + (hi - lo) * t
            }
        })
        .collect();
    let values = grid
        .iter()
        .map(|&g| forward_glm0(link, g))
        .collect::<Result<Vec<_>>>()?;
    for i in 1..GRID {
        if values[i] <= values[i - 1] {
            return Err(Error::NonMonotoneMap(format!(
                "link `{}` decreases between gamma2 = {} and {}",
                link.name(),
                grid[i - 1],
                grid[i]
            )));
        }
    }
    let report = |g: f64, residual: f64, iterations: usize, projected: bool| -> Result<SolveReport> {
        let (_, slope) = forward_glm0_with_slope(link, g)?;
        Ok(SolveReport {
            solution: SolveReport::from_pairs(&[("gamma2", g)]),
            residual_norm: residual,
            iterations,
            projected,
            jacobian_condition: if slope != 0.0 { 1.0 } else { f64::INFINITY },
        })
    };
    if m_xy2 <= values[0] {
        return report(lo, (values[0] - m_xy2).abs(), 0, m_xy2 < values[0] - opts.tol_solve);
    }
    if m_xy2 >= values[GRID - 1] {
        return report(
            hi,
            (m_xy2 - values[GRID - 1]).abs(),
            0,
            m_xy2 > values[GRID - 1] + opts.tol_solve,
        );
    }
    let k = values.iter().position(|&v| v > m_xy2).expect("bracketed");
    let (mut a, mut b) = (grid[k - 1], grid[k]);
    let mut x = a + (b - a) * (m_xy2 - values[k - 1]) / (values[k] - values[k - 1]);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < opts.max_iter.max(200) {
        iterations += 1;
        let (v, slope) = forward_glm0_with_slope(link, x)?;
        let r = v - m_xy2;
        residual = r.abs();
        if r == 0.0 {
            break;
        }
        if r > 0.0 {
            b = x;
        } else {
            a = x;
        }
        let newton = x - r / slope;
        let next = if slope > 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - x).abs() <= 1e-15 * x.abs().max(1e-300) || b - a <= 1e-15 * b {
            x = next;
            residual = (forward_glm0(link, x)? - m_xy2).abs();
            break;
        }
        x = next;
    }
    if residual > opts.tol_solve {
        return Err(Error::NoConvergence {
            iterations,
            residual,
        });
    }
    report(x, residual, iterations, false)
}

// ---------------------------------------------------------------------------
// General-mean GLM

/// `(f_0(λ, γ²), f_1(λ, γ²)² γ²)`.
pub fn forward_glm(link: &LinkSpec, law: &IndexLaw) -> Result<(f64, f64)> {
    let f0 = eval_fk(link, 0, law)?;
    let f1 = eval_fk(link, 1, law)?;
    Ok((f0, f1 * f1 * law.gamma2))
}

fn jacobian_from(f: &[f64; 4], gamma2: f64) -> Matrix2<f64> {
    Matrix2::new(
        f[1],
        0.5 * f[2],
        2.0 * gamma2 * f[1] * f[2],
        f[1] * (f[1] + gamma2 * f[3]),
    )
}

/// Jacobian of [`forward_glm`]; row `i` holds the derivatives of output `i`
/// with respect to `(λ, γ²)`.
pub fn glm_jacobian(link: &LinkSpec, law: &IndexLaw) -> Result<Matrix2<f64>> {
    Ok(jacobian_from(&eval_all(link, law)?, law.gamma2))
}

/// `f_1 {f_1² + γ² (f_1 f_3 − f_2²)}`.
pub fn glm_jacobian_det(link: &LinkSpec, law: &IndexLaw) -> Result<f64> {
    let f = eval_all(link, law)?;
    Ok(f[1] * (f[1] * f[1] + law.gamma2 * (f[1] * f[3] - f[2] * f[2])))
}

/// Index system moments `(m_1, m_2)` from a moment set; `response` picks the
/// Y-side (`m_Y`, `m_XY_X`, `m_XY2`) or the A-side keys.
fn reduce_with(ms: &MomentSet, mean: MomentKey, cross: MomentKey, quad: MomentKey) -> Result<(f64, f64)> {
    let m = ms.get(mean)?;
    let mx2 = ms.get(MomentKey::X2)?;
    let mc = ms.get(cross)?;
    let mq = ms.get(quad)?;
    Ok((m, mq + m * m * mx2 - 2.0 * m * mc))
}

/// `(m_Y, m_XY2 + m_Y² m_X2 − 2 m_Y m_XY_X)`.
pub fn reduce_glm_moments(ms: &MomentSet) -> Result<(f64, f64)> {
    reduce_with(ms, MomentKey::Y, MomentKey::XYX, MomentKey::XY2)
}

/// The same reduction with A in place of Y.
pub fn reduce_treatment_moments(ms: &MomentSet) -> Result<(f64, f64)> {
    reduce_with(ms, MomentKey::A, MomentKey::XAX, MomentKey::XA2)
}

fn clamp(v: f64, (lo, hi): (f64, f64)) -> f64 {
    v.max(lo).min(hi)
}

/// Solves `f_0(λ, γ²) = m1` for λ within the bounds (clamping when the value
/// is out of reach); `f_0` is increasing in λ for monotone links.
fn invert_mean(link: &LinkSpec, m1: f64, gamma2: f64, bounds: (f64, f64)) -> Result<f64> {
    let f0 = |l: f64| eval_fk(link, 0, &IndexLaw { lambda: l, gamma2 });
    let (mut a, mut b) = bounds;
    if m1 <= f0(a)? {
        return Ok(a);
    }
    if m1 >= f0(b)? {
        return Ok(b);
    }
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        if f0(mid)? < m1 {
            a = mid;
        } else {
            b = mid;
        }
        if b - a < 1e-14 {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

enum StartOutcome {
    Converged { theta: Vector2<f64>, residual: f64, iterations: usize },
    Stalled { theta: Vector2<f64>, residual: f64, iterations: usize },
    Singular { det: f64, theta: Vector2<f64>, iterations: usize },
}

fn residual_at(link: &LinkSpec, theta: &Vector2<f64>, target: &Vector2<f64>) -> Result<(Vector2<f64>, [f64; 4])> {
    let f = eval_all(link, &IndexLaw { lambda: theta[0], gamma2: theta[1] })?;
    let r = Vector2::new(f[0] - target[0], f[1] * f[1] * theta[1] - target[1]);
    Ok((r, f))
}

fn newton_from(
    link: &LinkSpec,
    start: Vector2<f64>,
    target: &Vector2<f64>,
    opts: &SolveOptions,
) -> Result<StartOutcome> {
    let project = |v: Vector2<f64>| Vector2::new(clamp(v[0], opts.lambda_bounds), clamp(v[1], opts.gamma2_bounds));
    let mut theta = project(start);
    let (mut r, mut f) = residual_at(link, &theta, target)?;
    let mut norm = r.norm();
    let mut iterations = 0;
    let mut converged_at: Option<usize> = None;
    while iterations < opts.max_iter {
        if norm <= opts.tol_solve && converged_at.is_none() {
            converged_at = Some(iterations);
        }
        // A few extra steps after reaching tolerance polish the last digits.
        if let Some(at) = converged_at {
            if iterations >= at + 3 || norm == 0.0 {
                break;
            }
        }
        iterations += 1;
        let j = jacobian_from(&f, theta[1]);
        let det = j.determinant();
        if det.abs() < DET_FLOOR || !det.is_finite() {
            if converged_at.is_some() {
                break;
            }
            return Ok(StartOutcome::Singular { det, theta, iterations });
        }
        let step = -(j.try_inverse().expect("nonzero determinant") * r);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand = project(theta + step * t);
            let (rc, fc) = residual_at(link, &cand, target)?;
            let nc = rc.norm();
            if nc < norm {
                theta = cand;
                r = rc;
                f = fc;
                norm = nc;
                accepted = true;
                break;
            }
            t *= opts.damping;
        }
        if !accepted {
            break;
        }
    }
    if norm <= opts.tol_solve {
        Ok(StartOutcome::Converged { theta, residual: norm, iterations })
    } else {
        Ok(StartOutcome::Stalled { theta, residual: norm, iterations })
    }
}

fn on_boundary(theta: &Vector2<f64>, opts: &SolveOptions) -> bool {
    let tol = 1e-12;
    (theta[0] - opts.lambda_bounds.0).abs() <= tol
        || (theta[0] - opts.lambda_bounds.1).abs() <= tol
        || (theta[1] - opts.gamma2_bounds.0).abs() <= tol * opts.gamma2_bounds.0.max(1e-300)
        || (theta[1] - opts.gamma2_bounds.1).abs() <= tol
}

/// Best points on the edges of the box, used when the moments are outside the
/// image of the bounded parameter domain.
fn boundary_candidates(link: &LinkSpec, target: &Vector2<f64>, opts: &SolveOptions) -> Result<Vec<(Vector2<f64>, f64)>> {
    let mut out = Vec::new();
    for g in [opts.gamma2_bounds.0, opts.gamma2_bounds.1] {
        let l = invert_mean(link, target[0], g, opts.lambda_bounds)?;
        let theta = Vector2::new(l, g);
        let (r, _) = residual_at(link, &theta, target)?;
        out.push((theta, r.norm()));
    }
    for l in [opts.lambda_bounds.0, opts.lambda_bounds.1] {
        let (g0, g1) = opts.gamma2_bounds;
        let mut best: Option<(Vector2<f64>, f64)> = None;
        for i in 0..64 {
            let g = g0 + (g1 - g0) * i as f64 / 63.0;
            let theta = Vector2::new(l, g);
            let (r, _) = residual_at(link, &theta, target)?;
            let nr = r.norm();
            if best.as_ref().is_none_or(|b| nr < b.1) {
                best = Some((theta, nr));
            }
        }
        out.extend(best);
    }
    Ok(out)
}

/// Inverts the general-mean GLM index system.
pub fn invert_glm(link: &LinkSpec, m1: f64, m2: f64, opts: &SolveOptions) -> Result<SolveReport> {
    opts.validate()?;
    if !m1.is_finite() || !m2.is_finite() {
        return Err(Error::NonFiniteValue("index moments".into()));
    }
    let target = Vector2::new(m1, m2);
    let finish = |theta: Vector2<f64>, residual: f64, iterations: usize, projected: bool| -> Result<SolveReport> {
        let j = glm_jacobian(link, &IndexLaw { lambda: theta[0], gamma2: theta[1] })?;
        Ok(SolveReport {
            solution: SolveReport::from_pairs(&[("lambda", theta[0]), ("gamma2", theta[1])]),
            residual_norm: residual,
            iterations,
            projected,
            jacobian_condition: cond2(&j),
        })
    };

    let mut total_iter = 0;
    let mut best_stalled: Option<(Vector2<f64>, f64)> = None;
    let mut singular: Option<(f64, Vector2<f64>)> = None;

    // The quadratic moment is nonnegative on the whole domain, so a
    // nonpositive estimate can only be met on the boundary.
    if m2 > 0.0 {
        let lambda0 = invert_mean(link, m1, 1.0, opts.lambda_bounds)?;
        let mut starts = vec![Vector2::new(lambda0, clamp(1.0, opts.gamma2_bounds))];
        let (l0, l1) = opts.lambda_bounds;
        let (g0, g1) = opts.gamma2_bounds;
        for i in 0..8 {
            for k in 0..8 {
                starts.push(Vector2::new(
                    l0 + (l1 - l0) * (i as f64 + 0.5) / 8.0,
                    g0 + (g1 - g0) * (k as f64 + 0.5) / 8.0,
                ));
            }
        }
        for start in starts {
            match newton_from(link, start, &target, opts)? {
                StartOutcome::Converged { theta, residual, iterations } => {
                    total_iter += iterations;
                    return finish(theta, residual, total_iter, false);
                }
                StartOutcome::Stalled { theta, residual, iterations } => {
                    total_iter += iterations;
                    if best_stalled.as_ref().is_none_or(|b| residual < b.1) {
                        best_stalled = Some((theta, residual));
                    }
                }
                StartOutcome::Singular { det, theta, iterations } => {
                    total_iter += iterations;
                    singular.get_or_insert((det, theta));
                }
            }
        }
    }

    let mut best_boundary: Option<(Vector2<f64>, f64)> = None;
    for cand in boundary_candidates(link, &target, opts)? {
        if best_boundary.as_ref().is_none_or(|b| cand.1 < b.1) {
            best_boundary = Some(cand);
        }
    }
    if let Some((theta, res)) = best_stalled {
        if on_boundary(&theta, opts) && best_boundary.as_ref().is_none_or(|b| res < b.1) {
            best_boundary = Some((theta, res));
        }
    }
    let boundary_wins = match (&best_boundary, &best_stalled) {
        (Some(b), Some(s)) => b.1 <= s.1 * (1.0 + 1e-9) || on_boundary(&s.0, opts),
        (Some(_), None) => true,
        _ => false,
    };
    if boundary_wins {
        let (theta, res) = best_boundary.expect("checked above");
        return finish(theta, res, total_iter, true);
    }
    if let Some((det, theta)) = singular {
        if best_stalled.is_none() {
            return Err(Error::SingularJacobian {
                det,
                lambda: theta[0],
                gamma2: theta[1],
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: total_iter,
        residual: best_stalled.map_or(f64::INFINITY, |b| b.1),
    })
}

// ---------------------------------------------------------------------------
// Causal effect under a linear structural model

/// Population parameters of the causal-effect model. The auxiliary linear
/// forms `λ_{α,1}`, `λ_{β,1}` are implied by these under a Gaussian design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeParams {
    pub psi: f64,
    pub lambda_alpha: f64,
    pub gamma2_alpha: f64,
    pub lambda_beta: f64,
    pub gamma_alpha_beta: f64,
    /// `μᵀΣ⁻¹μ`.
    pub m_x2: f64,
}

impl CeParams {
    /// `(λ_{α,1}, λ_{β,1}) = (αᵀE[XA], βᵀE[XA])`.
    pub fn auxiliary(&self, link: &LinkSpec) -> Result<(f64, f64)> {
        let f = eval_all(link, &IndexLaw::new(self.lambda_alpha, self.gamma2_alpha)?)?;
        Ok((
            self.lambda_alpha * f[0] + f[1] * self.gamma2_alpha,
            self.lambda_beta * f[0] + f[1] * self.gamma_alpha_beta,
        ))
    }
}

/// Population moments of the causal-effect chain.
pub fn forward_ce(link: &LinkSpec, p: &CeParams) -> Result<MomentSet> {
    let f = eval_all(link, &IndexLaw::new(p.lambda_alpha, p.gamma2_alpha)?)?;
    let (la1, lb1) = p.auxiliary(link)?;
    let m_a = f[0];
    let m_xa_x = m_a * p.m_x2 + f[1] * p.lambda_alpha;
    let m_xa2 = m_a * m_xa_x + f[1] * la1;
    let mut ms = MomentSet::new();
    ms.insert(MomentKey::A, m_a);
    ms.insert(MomentKey::Y, p.psi * m_a + p.lambda_beta);
    ms.insert(MomentKey::AY, (p.psi + p.lambda_beta) * m_a + p.gamma_alpha_beta * f[1]);
    ms.insert(MomentKey::X2, p.m_x2);
    ms.insert(MomentKey::XAX, m_xa_x);
    ms.insert(MomentKey::XA2, m_xa2);
    ms.insert(MomentKey::XAXY, p.psi * m_xa2 + lb1 + p.lambda_beta * m_xa_x);
    ms.insert(
        MomentKey::XAYXA,
        p.psi * m_xa2
            + m_a * lb1
            + p.lambda_beta * m_a * m_xa_x
            + f[1] * (p.lambda_beta * la1 + p.gamma_alpha_beta * m_xa_x)
            + f[2] * p.gamma_alpha_beta * la1,
    );
    Ok(ms)
}

/// Stage (i): the treatment index `(λ_α, γ_α²)` and its link moments.
fn solve_treatment_index(ms: &MomentSet, link: &LinkSpec, opts: &SolveOptions) -> Result<(SolveReport, [f64; 4])> {
    let (m1, m2) = reduce_treatment_moments(ms)?;
    let rep = invert_glm(link, m1, m2, opts)?;
    let f = eval_all(link, &IndexLaw::new(rep.get("lambda"), rep.get("gamma2"))?)?;
    Ok((rep, f))
}

pub fn solve_ce(ms: &MomentSet, link: &LinkSpec, opts: &SolveOptions) -> Result<SolveReport> {
    let (idx, f) = solve_treatment_index(ms, link, opts)?;
    if f[1].abs() < F1_FLOOR {
        return Err(Error::DegenerateF1(f[1]));
    }
    let m_a = ms.get(MomentKey::A)?;
    let m_y = ms.get(MomentKey::Y)?;
    let m_ay = ms.get(MomentKey::AY)?;
    let m_xa_x = ms.get(MomentKey::XAX)?;
    let m_xa2 = ms.get(MomentKey::XA2)?;
    let m_xa_xy = ms.get(MomentKey::XAXY)?;
    let m_xay_xa = ms.get(MomentKey::XAYXA)?;
    let la1 = (m_xa2 - m_a * m_xa_x) / f[1];

    // Unknowns: (ψ, λ_β, γ_{α,β}, λ_{β,1}).
    let m = Matrix4::new(
        m_a, 1.0, 0.0, 0.0,
        m_a, m_a, f[1], 0.0,
        m_xa2, m_xa_x, 0.0, 1.0,
        m_xa2, m_a * m_xa_x + f[1] * la1, f[1] * m_xa_x + f[2] * la1, m_a,
    );
    let rhs = Vector4::new(m_y, m_ay, m_xa_xy, m_xay_xa);
    let cond = cond4(&m);
    if !(cond <= LINEAR_COND_MAX) {
        return Err(Error::SingularLinearStage { condition: cond });
    }
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularLinearStage { condition: cond })?;
    let lin_res = (m * sol - rhs).norm();
    Ok(SolveReport {
        solution: SolveReport::from_pairs(&[
            ("psi", sol[0]),
            ("lambda_alpha", idx.get("lambda")),
            ("gamma2_alpha", idx.get("gamma2")),
            ("lambda_beta", sol[1]),
            ("gamma_alpha_beta", sol[2]),
            ("lambda_alpha_1", la1),
            ("lambda_beta_1", sol[3]),
        ]),
        residual_norm: idx.residual_norm.hypot(lin_res),
        iterations: idx.iterations,
        projected: idx.projected,
        jacobian_condition: idx.jacobian_condition.max(cond),
    })
}

// ---------------------------------------------------------------------------
// Mean estimation under missingness at random

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarParams {
    pub psi: f64,
    pub lambda_alpha: f64,
    pub gamma2_alpha: f64,
    pub gamma_alpha_beta: f64,
    /// `μᵀΣ⁻¹μ`.
    pub m_x2: f64,
}

/// Population moments of the missing-at-random chain.
pub fn forward_mar(link: &LinkSpec, p: &MarParams) -> Result<MomentSet> {
    let f = eval_all(link, &IndexLaw::new(p.lambda_alpha, p.gamma2_alpha)?)?;
    let m_a = f[0];
    let m_xa_x = m_a * p.m_x2 + f[1] * p.lambda_alpha;
    let mut ms = MomentSet::new();
    ms.insert(MomentKey::A, m_a);
    ms.insert(MomentKey::X2, p.m_x2);
    ms.insert(MomentKey::XAX, m_xa_x);
    ms.insert(
        MomentKey::XA2,
        m_a * m_a * p.m_x2 + f[1] * f[1] * p.gamma2_alpha + 2.0 * m_a * f[1] * p.lambda_alpha,
    );
    ms.insert(MomentKey::AY, m_a * p.psi + f[1] * p.gamma_alpha_beta);
    ms.insert(
        MomentKey::XAYX,
        (m_a + m_xa_x) * p.psi + (p.m_x2 * f[1] + f[2] * p.lambda_alpha) * p.gamma_alpha_beta,
    );
    Ok(ms)
}

/// Coefficients `(c_ψ, c_γ)` of the alternative identity
/// `m_XAY_XA = c_ψ ψ + c_γ γ_{α,β}`. With `include_cross = false` the
/// `m_A f_1` contribution to `c_γ` is dropped, which reproduces the form in
/// which this identity is sometimes written; the MC oracle tells them apart.
pub fn mar_alt_coefficients(link: &LinkSpec, p: &MarParams, include_cross: bool) -> Result<(f64, f64)> {
    let f = eval_all(link, &IndexLaw::new(p.lambda_alpha, p.gamma2_alpha)?)?;
    let m_a = f[0];
    let c_psi = m_a * m_a * p.m_x2
        + 2.0 * m_a * f[1] * p.lambda_alpha
        + m_a * m_a
        + f[1] * f[1] * p.gamma2_alpha;
    let mut c_gamma = m_a * (f[1] * p.m_x2 + f[2] * p.lambda_alpha)
        + f[1] * f[1] * p.lambda_alpha
        + f[1] * f[2] * p.gamma2_alpha;
    if include_cross {
        c_gamma += m_a * f[1];
    }
    Ok((c_psi, c_gamma))
}

pub fn solve_mar(ms: &MomentSet, link: &LinkSpec, opts: &SolveOptions) -> Result<SolveReport> {
    let (idx, f) = solve_treatment_index(ms, link, opts)?;
    let m_a = ms.get(MomentKey::A)?;
    let m_x2 = ms.get(MomentKey::X2)?;
    let m_xa_x = ms.get(MomentKey::XAX)?;
    let m_ay = ms.get(MomentKey::AY)?;
    let m_xay_x = ms.get(MomentKey::XAYX)?;
    let lambda_alpha = idx.get("lambda");
    let m = Matrix2::new(
        m_a,
        f[1],
        m_a + m_xa_x,
        m_x2 * f[1] + f[2] * lambda_alpha,
    );
    let rhs = Vector2::new(m_ay, m_xay_x);
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let det = m.determinant();
    let cond = cond2(&m);
    if !(det.abs() >= 1e-12 * scale * scale) || scale == 0.0 {
        return Err(Error::SingularLinearStage { condition: cond });
    }
    let sol = m.try_inverse().expect("nonzero determinant") * rhs;
    let lin_res = (m * sol - rhs).norm();
    Ok(SolveReport {
        solution: SolveReport::from_pairs(&[
            ("psi", sol[0]),
            ("lambda_alpha", lambda_alpha),
            ("gamma2_alpha", idx.get("gamma2")),
            ("gamma_alpha_beta", sol[1]),
        ]),
        residual_norm: idx.residual_norm.hypot(lin_res),
        iterations: idx.iterations,
        projected: idx.projected,
        jacobian_condition: idx.jacobian_condition.max(cond),
    })
}

// ---------------------------------------------------------------------------
// Generalized covariance measure

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcmParams {
    pub lambda_alpha: f64,
    pub gamma2_alpha: f64,
    pub lambda_beta: f64,
    pub gamma2_beta: f64,
    pub gamma_alpha_beta: f64,
    /// `μᵀΣ⁻¹μ`.
    pub m_x2: f64,
}

impl GcmParams {
    pub fn bivariate_law(&self) -> BivariateIndexLaw {
        BivariateIndexLaw {
            lambda1: self.lambda_alpha,
            lambda2: self.lambda_beta,
            gamma11: self.gamma2_alpha,
            gamma22: self.gamma2_beta,
            gamma12: self.gamma_alpha_beta,
        }
    }

    /// `E[η(αᵀX) φ(βᵀX)]`.
    pub fn psi(&self, link_a: &LinkSpec, link_y: &LinkSpec) -> Result<f64> {
        eval_bivariate(link_a, link_y, &self.bivariate_law())
    }
}

/// Population moments of the generalized-covariance chain.
pub fn forward_gcm(link_a: &LinkSpec, link_y: &LinkSpec, p: &GcmParams) -> Result<MomentSet> {
    let g = eval_all(link_a, &IndexLaw::new(p.lambda_alpha, p.gamma2_alpha)?)?;
    let f = eval_all(link_y, &IndexLaw::new(p.lambda_beta, p.gamma2_beta)?)?;
    let (m_a, m_y) = (g[0], f[0]);
    let mut ms = MomentSet::new();
    ms.insert(MomentKey::A, m_a);
    ms.insert(MomentKey::Y, m_y);
    ms.insert(MomentKey::X2, p.m_x2);
    ms.insert(MomentKey::XAX, m_a * p.m_x2 + g[1] * p.lambda_alpha);
    ms.insert(MomentKey::XYX, m_y * p.m_x2 + f[1] * p.lambda_beta);
    ms.insert(
        MomentKey::XA2,
        m_a * m_a * p.m_x2 + g[1] * g[1] * p.gamma2_alpha + 2.0 * m_a * g[1] * p.lambda_alpha,
    );
    ms.insert(
        MomentKey::XY2,
        m_y * m_y * p.m_x2 + f[1] * f[1] * p.gamma2_beta + 2.0 * m_y * f[1] * p.lambda_beta,
    );
    ms.insert(
        MomentKey::XAXY,
        m_a * m_y * p.m_x2
            + m_a * f[1] * p.lambda_beta
            + m_y * g[1] * p.lambda_alpha
            + g[1] * f[1] * p.gamma_alpha_beta,
    );
    Ok(ms)
}

pub fn solve_gcm(ms: &MomentSet, link_a: &LinkSpec, link_y: &LinkSpec, opts: &SolveOptions) -> Result<SolveReport> {
    let (a_side, g) = solve_treatment_index(ms, link_a, opts)?;
    let (m1, m2) = reduce_glm_moments(ms)?;
    let y_side = invert_glm(link_y, m1, m2, opts)?;
    let (lb, gb) = (y_side.get("lambda"), y_side.get("gamma2"));
    let f = eval_all(link_y, &IndexLaw::new(lb, gb)?)?;
    let (la, ga) = (a_side.get("lambda"), a_side.get("gamma2"));

    let m_a = ms.get(MomentKey::A)?;
    let m_y = ms.get(MomentKey::Y)?;
    let m_x2 = ms.get(MomentKey::X2)?;
    let m_xa_xy = ms.get(MomentKey::XAXY)?;
    let denom = g[1] * f[1];
    if denom.abs() < 1e-12 {
        return Err(Error::DegenerateG1(denom));
    }
    let gab = (m_xa_xy - m_a * m_y * m_x2 - m_a * f[1] * lb - m_y * g[1] * la) / denom;
    let params = GcmParams {
        lambda_alpha: la,
        gamma2_alpha: ga,
        lambda_beta: lb,
        gamma2_beta: gb,
        gamma_alpha_beta: gab,
        m_x2,
    };
    let psi = params.psi(link_a, link_y)?;
    Ok(SolveReport {
        solution: SolveReport::from_pairs(&[
            ("lambda_alpha", la),
            ("gamma2_alpha", ga),
            ("lambda_beta", lb),
            ("gamma2_beta", gb),
            ("gamma_alpha_beta", gab),
            ("psi", psi),
        ]),
        residual_norm: a_side.residual_norm.hypot(y_side.residual_norm),
        iterations: a_side.iterations + y_side.iterations,
        projected: a_side.projected || y_side.projected,
        jacobian_condition: a_side.jacobian_condition.max(y_side.jacobian_condition),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn glm0_forward_examples() {
        assert_abs_diff_eq!(forward_glm0(&LinkSpec::identity(), 2.5).unwrap(), 2.5, epsilon = 1e-12);
        assert_eq!(forward_glm0(&LinkSpec::logistic(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn glm0_inverse_examples() {
        let r = invert_glm0(&LinkSpec::identity(), 2.5, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("gamma2"), 2.5, epsilon = 1e-10);
        assert!(!r.projected);

        let r = invert_glm0(&LinkSpec::logistic(), -0.1, &opts()).unwrap();
        assert_eq!(r.get("gamma2"), 1e-8);
        assert!(r.projected);

        let m = forward_glm0(&LinkSpec::logistic(), 1.7).unwrap();
        let r = invert_glm0(&LinkSpec::logistic(), m, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("gamma2"), 1.7, epsilon = 1e-8);
        assert!(!r.projected);
    }

    #[test]
    fn glm0_rejects_non_monotone_link() {
        use std::sync::Arc;
        // φ' = cos makes f_1(0, γ²) = exp(−γ²/2), so f_1²γ² peaks at γ² = 1.
        let link = LinkSpec::new(
            "sine",
            Arc::new(f64::sin),
            Arc::new(f64::cos),
            Arc::new(|t: f64| -t.sin()),
            Arc::new(|t: f64| -t.cos()),
            (-1.0, 1.0),
        );
        assert!(matches!(
            invert_glm0(&link, 0.1, &opts()),
            Err(Error::NonMonotoneMap(_))
        ));
    }

    #[test]
    fn glm_forward_examples() {
        let (a, b) = forward_glm(&LinkSpec::identity(), &IndexLaw::new(0.3, 2.0).unwrap()).unwrap();
        assert_abs_diff_eq!(a, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 2.0, epsilon = 1e-12);

        let (a, b) = forward_glm(&LinkSpec::logistic(), &IndexLaw::new(0.0, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(a, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b, forward_glm0(&LinkSpec::logistic(), 1.0).unwrap(), epsilon = 1e-15);

        let (a, b) = forward_glm(&LinkSpec::log_linear(), &IndexLaw::new(0.2, 0.5).unwrap()).unwrap();
        assert_abs_diff_eq!(a, 0.45f64.exp(), epsilon = 1e-10);
        assert_abs_diff_eq!(b, 0.9f64.exp() * 0.5, epsilon = 1e-10);
    }

    #[test]
    fn glm_inverse_examples() {
        let r = invert_glm(&LinkSpec::identity(), 0.3, 2.0, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("lambda"), 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(r.get("gamma2"), 2.0, epsilon = 1e-9);

        let n = Normal::new(0.0, 1.0).unwrap();
        let f1 = (2.0 * std::f64::consts::PI * 3.0).powf(-0.5) * (-0.25f64 / 6.0).exp();
        let r = invert_glm(&LinkSpec::probit(), n.cdf(0.5 / 3f64.sqrt()), f1 * f1 * 2.0, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("lambda"), 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(r.get("gamma2"), 2.0, epsilon = 1e-7);

        let link = LinkSpec::logistic();
        let (m1, m2) = forward_glm(&link, &IndexLaw::new(-0.8, 1.4).unwrap()).unwrap();
        let r = invert_glm(&link, m1, m2, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("lambda"), -0.8, epsilon = 1e-7);
        assert_abs_diff_eq!(r.get("gamma2"), 1.4, epsilon = 1e-7);
        assert!(!r.projected);
    }

    #[test]
    fn glm_inverse_projects_negative_quadratic_moment() {
        let r = invert_glm(&LinkSpec::logistic(), 0.6, -0.02, &opts()).unwrap();
        assert!(r.projected);
        assert_eq!(r.get("gamma2"), 1e-8);
        let back = eval_fk(&LinkSpec::logistic(), 0, &IndexLaw::new(r.get("lambda"), 1e-8).unwrap()).unwrap();
        assert_abs_diff_eq!(back, 0.6, epsilon = 1e-10);
    }

    #[test]
    fn reduce_examples() {
        let ms = MomentSet::new()
            .with(MomentKey::Y, 0.0)
            .with(MomentKey::X2, 0.0)
            .with(MomentKey::XYX, 0.0)
            .with(MomentKey::XY2, 0.7);
        assert_eq!(reduce_glm_moments(&ms).unwrap(), (0.0, 0.7));
        assert!(matches!(
            reduce_glm_moments(&MomentSet::new().with(MomentKey::Y, 1.0)),
            Err(Error::MissingMoment(_))
        ));

        // Population moments at (λ, γ², μᵀΣ⁻¹μ) = (0.3, 1, 0.5).
        let link = LinkSpec::logistic();
        let f = eval_all(&link, &IndexLaw::new(0.3, 1.0).unwrap()).unwrap();
        let ms = MomentSet::new()
            .with(MomentKey::Y, f[0])
            .with(MomentKey::X2, 0.5)
            .with(MomentKey::XYX, f[0] * 0.5 + f[1] * 0.3)
            .with(MomentKey::XY2, f[0] * f[0] * 0.5 + 2.0 * f[0] * f[1] * 0.3 + f[1] * f[1]);
        let (m1, m2) = reduce_glm_moments(&ms).unwrap();
        assert_abs_diff_eq!(m1, f[0], epsilon = 1e-15);
        assert_abs_diff_eq!(m2, f[1] * f[1], epsilon = 1e-14);
    }

    #[test]
    fn ce_round_trip_and_null_effect() {
        let link = LinkSpec::logistic();
        let p = CeParams {
            psi: 0.7,
            lambda_alpha: 0.2,
            gamma2_alpha: 1.0,
            lambda_beta: 0.1,
            gamma_alpha_beta: 0.3,
            m_x2: 0.25,
        };
        let ms = forward_ce(&link, &p).unwrap();
        let r = solve_ce(&ms, &link, &opts()).unwrap();
        let (la1, lb1) = p.auxiliary(&link).unwrap();
        for (name, truth) in [
            ("psi", p.psi),
            ("lambda_alpha", p.lambda_alpha),
            ("gamma2_alpha", p.gamma2_alpha),
            ("lambda_beta", p.lambda_beta),
            ("gamma_alpha_beta", p.gamma_alpha_beta),
            ("lambda_alpha_1", la1),
            ("lambda_beta_1", lb1),
        ] {
            assert_abs_diff_eq!(r.get(name), truth, epsilon = 1e-7);
        }

        let null = CeParams { psi: 0.0, lambda_beta: 0.0, gamma_alpha_beta: 0.0, ..p };
        let r = solve_ce(&forward_ce(&link, &null).unwrap(), &link, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("psi"), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn ce_identity_propensity_hand_solve() {
        // Identity link: f_1 = 1, f_2 = 0. With λ_α = 0.4, γ_α² = 0.5,
        // m_X2 = 1: m_A = 0.4, m_XA_X = 0.8, λ_{α,1} = 0.66, m_XA2 = 0.98.
        // For (ψ, λ_β, γ_{α,β}, λ_{β,1}) = (2, 0.5, 0.1, 0.3) the four linear
        // equations evaluate to m_Y = 1.3, m_AY = 1.1, m_XA_XY = 2.66 and
        // m_XAY_XA = 1.96 + 0.12 + 0.16 + 0.33 + 0.08 = 2.65.
        let link = LinkSpec::identity();
        let ms = MomentSet::new()
            .with(MomentKey::A, 0.4)
            .with(MomentKey::X2, 1.0)
            .with(MomentKey::XAX, 0.8)
            .with(MomentKey::XA2, 0.98)
            .with(MomentKey::Y, 1.3)
            .with(MomentKey::AY, 1.1)
            .with(MomentKey::XAXY, 2.66)
            .with(MomentKey::XAYXA, 2.65);
        let r = solve_ce(&ms, &link, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("lambda_alpha"), 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(r.get("gamma2_alpha"), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(r.get("lambda_alpha_1"), 0.66, epsilon = 1e-9);
        assert_abs_diff_eq!(r.get("psi"), 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.get("lambda_beta"), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(r.get("gamma_alpha_beta"), 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(r.get("lambda_beta_1"), 0.3, epsilon = 1e-9);
    }

    #[test]
    fn mar_round_trip_and_collapse() {
        let link = LinkSpec::bounded_logistic();
        let p = MarParams {
            psi: 0.7,
            lambda_alpha: 0.3,
            gamma2_alpha: 1.0,
            gamma_alpha_beta: 0.4,
            m_x2: 0.2,
        };
        let r = solve_mar(&forward_mar(&link, &p).unwrap(), &link, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("psi"), 0.7, epsilon = 1e-8);
        assert_abs_diff_eq!(r.get("lambda_alpha"), 0.3, epsilon = 1e-8);
        assert_abs_diff_eq!(r.get("gamma2_alpha"), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(r.get("gamma_alpha_beta"), 0.4, epsilon = 1e-8);

        let p0 = MarParams { gamma_alpha_beta: 0.0, ..p };
        let ms = forward_mar(&link, &p0).unwrap();
        let r = solve_mar(&ms, &link, &opts()).unwrap();
        assert_abs_diff_eq!(
            r.get("psi"),
            ms.get(MomentKey::AY).unwrap() / ms.get(MomentKey::A).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn mar_without_missingness_is_flagged() {
        let ms = MomentSet::new()
            .with(MomentKey::A, 1.0)
            .with(MomentKey::X2, 0.3)
            .with(MomentKey::XAX, 0.3)
            .with(MomentKey::XA2, 0.3)
            .with(MomentKey::AY, 0.5)
            .with(MomentKey::XAYX, 0.4);
        match solve_mar(&ms, &LinkSpec::logistic(), &opts()) {
            Ok(r) => assert!(r.projected),
            Err(e) => assert!(e.is_solver_failure(), "{e}"),
        }
    }

    #[test]
    fn gcm_examples() {
        let id = LinkSpec::identity();
        let p = GcmParams {
            lambda_alpha: 0.0,
            gamma2_alpha: 1.2,
            lambda_beta: 0.0,
            gamma2_beta: 0.8,
            gamma_alpha_beta: 0.35,
            m_x2: 0.0,
        };
        let r = solve_gcm(&forward_gcm(&id, &id, &p).unwrap(), &id, &id, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("psi"), r.get("gamma_alpha_beta"), epsilon = 1e-9);

        let lg = LinkSpec::logistic();
        let p = GcmParams {
            lambda_alpha: 0.3,
            gamma2_alpha: 1.1,
            lambda_beta: -0.2,
            gamma2_beta: 0.7,
            gamma_alpha_beta: 0.25,
            m_x2: 0.4,
        };
        let r = solve_gcm(&forward_gcm(&lg, &lg, &p).unwrap(), &lg, &lg, &opts()).unwrap();
        for (name, truth) in [
            ("lambda_alpha", p.lambda_alpha),
            ("gamma2_alpha", p.gamma2_alpha),
            ("lambda_beta", p.lambda_beta),
            ("gamma2_beta", p.gamma2_beta),
            ("gamma_alpha_beta", p.gamma_alpha_beta),
        ] {
            assert_abs_diff_eq!(r.get(name), truth, epsilon = 1e-7);
        }

        let indep = GcmParams {
            lambda_alpha: 0.0,
            lambda_beta: 0.0,
            gamma_alpha_beta: 0.0,
            m_x2: 0.0,
            ..p
        };
        let r = solve_gcm(&forward_gcm(&lg, &lg, &indep).unwrap(), &lg, &lg, &opts()).unwrap();
        assert_abs_diff_eq!(r.get("psi"), 0.25, epsilon = 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-5;
        for name in LinkSpec::builtin_names() {
            let link = LinkSpec::from_name(name).unwrap();
            for &(l, g) in &[(-1.0, 0.3), (0.5, 2.0), (1.5, 0.8)] {
                let j = glm_jacobian(&link, &IndexLaw::new(l, g).unwrap()).unwrap();
                let fwd = |l: f64, g: f64| forward_glm(&link, &IndexLaw::new(l, g).unwrap()).unwrap();
                let (a1, b1) = fwd(l + h, g);
                let (a0, b0) = fwd(l - h, g);
                let (c1, d1) = fwd(l, g + h);
                let (c0, d0) = fwd(l, g - h);
                let fd = Matrix2::new(
                    (a1 - a0) / (2.0 * h),
                    (c1 - c0) / (2.0 * h),
                    (b1 - b0) / (2.0 * h),
                    (d1 - d0) / (2.0 * h),
                );
                for (x, y) in j.iter().zip(fd.iter()) {
                    assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()), "{name} ({l},{g}): {j} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn probit_determinant_closed_form() {
        let link = LinkSpec::probit();
        for &(l, g) in &[(0.0, 0.5), (0.7, 1.5), (-1.2, 3.0)] {
            let det = glm_jacobian_det(&link, &IndexLaw::new(l, g).unwrap()).unwrap();
            let s = 1.0 + g;
            let closed = (2.0 * std::f64::consts::PI * s).powf(-1.5) * (-1.5 * l * l / s).exp() / s;
            assert_abs_diff_eq!(det, closed, epsilon = 1e-8);
        }
    }

    #[test]
    fn options_are_validated() {
        let bad = SolveOptions { lambda_bounds: (1.0, -1.0), ..SolveOptions::default() };
        assert!(matches!(invert_glm(&LinkSpec::logistic(), 0.5, 0.1, &bad), Err(Error::InvalidOption(_))));
        let bad = SolveOptions { tol_solve: 0.0, ..SolveOptions::default() };
        assert!(matches!(invert_glm0(&LinkSpec::logistic(), 0.05, &bad), Err(Error::InvalidOption(_))));
    }
}
