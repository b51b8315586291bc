//! Gauss–Hermite rules for the weight `exp(-u^2)` on the real line.
//!
//! Nodes come from the eigenvalues of the symmetric Jacobi matrix and are then
//! polished by Newton's method on the orthonormal Hermite recurrence, which
//! also yields weights with full relative accuracy. Rules are built once per
//! size and cached.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

/// Node counts visited by the adaptive driver, smallest first.
pub const RULE_SIZES: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal Hermite values `(p_n(x), p_{n-1}(x))`.
fn orthonormal_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 0.0;
    let mut p = std::f64::consts::PI.powf(-0.25);
    for j in 1..=n {
        let jf = j as f64;
        let next = x * (2.0 / jf).sqrt() * p - ((jf - 1.0) / jf).sqrt() * p_prev;
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

impl HermiteRule {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], sqrt_pi * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        for pair in pairs.iter_mut() {
            let mut x = pair.0;
            let mut polished = None;
            for _ in 0..8 {
                let (p, pm1) = orthonormal_pair(n, x);
                let dp = (2.0 * n as f64).sqrt() * pm1;
                if !p.is_finite() || !dp.is_finite() || dp == 0.0 {
                    break;
                }
                let step = p / dp;
                x -= step;
                if step.abs() <= 1e-15 * x.abs().max(1.0) {
                    let (_, pm1) = orthonormal_pair(n, x);
                    let dp = (2.0 * n as f64).sqrt() * pm1;
                    polished = Some((x, 2.0 / (dp * dp)));
                    break;
                }
            }
            // In the far tails the recurrence overflows; the eigen-decomposition
            // values are kept there and their weights are negligible anyway.
            if let Some((x, w)) = polished {
                if w.is_finite() && (x - pair.0).abs() < 1e-6 * pair.0.abs().max(1.0) {
                    *pair = (x, w);
                }
            }
        }

        HermiteRule {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

static RULES: [OnceLock<HermiteRule>; 4] = [
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
];

/// Cached rule of size `RULE_SIZES[level]`.
pub fn rule(level: usize) -> &'static HermiteRule {
    RULES[level].get_or_init(|| HermiteRule::new(RULE_SIZES[level]))
}

/// Runs `eval` on successively finer cached rules until two consecutive values
/// agree to `tol` (absolute) or the largest rule has been used. Returns the
/// last value and the number of nodes it used.
pub fn adaptive<F>(tol: f64, mut eval: F) -> (f64, usize)
where
    F: FnMut(&HermiteRule) -> f64,
{
    let mut prev = eval(rule(0));
    for (level, &size) in RULE_SIZES.iter().enumerate().skip(1) {
        let cur = eval(rule(level));
        if !cur.is_finite() || (cur - prev).abs() < tol {
            return (cur, size);
        }
        prev = cur;
    }
    (prev, RULE_SIZES[RULE_SIZES.len() - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_root_pi() {
        for level in 0..RULE_SIZES.len() {
            let r = rule(level);
            let s: f64 = r.weights.iter().sum();
            assert!((s - std::f64::consts::PI.sqrt()).abs() < 1e-13, "level {level}: {s}");
        }
    }

    #[test]
    fn integrates_even_moments_exactly() {
        // ∫ u^{2k} e^{-u²} du = Γ(k + 1/2)
        let r = rule(0);
        let mut gamma_half = std::f64::consts::PI.sqrt();
        for k in 0..20 {
            let s: f64 = r
                .nodes
                .iter()
                .zip(&r.weights)
                .map(|(x, w)| w * x.powi(2 * k))
                .sum();
            assert!(
                (s - gamma_half).abs() < 1e-12 * gamma_half,
                "k={k}: {s} vs {gamma_half}"
            );
            gamma_half *= k as f64 + 0.5;
        }
    }

    #[test]
    fn nodes_are_symmetric_and_sorted() {
        let r = rule(1);
        let n = r.len();
        for i in 0..n {
            assert!((r.nodes[i] + r.nodes[n - 1 - i]).abs() < 1e-12);
            if i > 0 {
                assert!(r.nodes[i] > r.nodes[i - 1]);
            }
        }
    }

    #[test]
    fn adaptive_stops_once_values_settle() {
        let (_, used) = adaptive(1e-10, |_| 1.0);
        assert_eq!(used, 128);
        let (_, used) = adaptive(1e-10, |r| r.len() as f64);
        assert_eq!(used, 512);
    }
}
