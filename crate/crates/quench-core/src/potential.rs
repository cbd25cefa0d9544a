//! Double-well potential machinery.
//!
//! The potential splits into a concave quadratic part `F(r) = c1 - c2 r^2`
//! (treated explicitly by the time stepping) and a convex part handled
//! implicitly. The convex part is one of
//!
//! - `LogQuench`: the scaled logarithmic potential `alpha * h` with
//!   `h(r) = (1+r) ln(1+r) + (1-r) ln(1-r)`, finite on `[-1, 1]` with value
//!   `2 ln 2` at the endpoints and derivative `h'(r) = ln((1+r)/(1-r))`
//!   blowing up at the endpoints;
//! - `ObstaclePenalty`: the Moreau-Yosida regularization at level `eps` of
//!   `alpha * h + I_{[-1,1]}`; for `alpha = 0` this is the classical exterior
//!   penalty `(1/eps) (r - clamp(r, -1, 1))` approximating the subdifferential
//!   of the indicator of `[-1, 1]`.
//!
//! Driving `alpha` down (and in penalty mode `eps` down) approximates the
//! double obstacle potential from inside and outside respectively.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("argument {r} outside the domain of the logarithmic potential")]
    DomainError { r: f64 },
    #[error("proximal solve did not converge after {iters} iterations (r={r}, alpha={alpha}, eps={eps})")]
    NonConvergence {
        r: f64,
        alpha: f64,
        eps: f64,
        iters: usize,
    },
}

/// `h(r) = (1+r) ln(1+r) + (1-r) ln(1-r)` on `[-1, 1]`, `2 ln 2` at the ends.
pub fn h_value(r: f64) -> Result<f64, PotentialError> {
    if r.abs() > 1.0 || !r.is_finite() {
        return Err(PotentialError::DomainError { r });
    }
    Ok(xlnx(1.0 + r) + xlnx(1.0 - r))
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `h'(r) = ln((1+r)/(1-r))`, defined for `|r| < 1`.
pub fn h_prime(r: f64) -> Result<f64, PotentialError> {
    if r.abs() >= 1.0 || !r.is_finite() {
        return Err(PotentialError::DomainError { r });
    }
    Ok(((1.0 + r) / (1.0 - r)).ln())
}

/// `h''(r) = 2 / (1 - r^2)`, defined for `|r| < 1`.
pub fn h_second(r: f64) -> Result<f64, PotentialError> {
    if r.abs() >= 1.0 || !r.is_finite() {
        return Err(PotentialError::DomainError { r });
    }
    Ok(2.0 / (1.0 - r * r))
}

/// Concave quadratic part `F(r) = c1 - c2 r^2` with `c2 > 0`; `F'` is
/// Lipschitz with constant `2 c2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcavePart {
    pub c1: f64,
    pub c2: f64,
}

impl Default for ConcavePart {
    /// `F(r) = -r^2`, the classical double-obstacle shape.
    fn default() -> Self {
        Self { c1: 0.0, c2: 1.0 }
    }
}

impl ConcavePart {
    pub fn value(&self, r: f64) -> f64 {
        self.c1 - self.c2 * r * r
    }
    pub fn prime(&self, r: f64) -> f64 {
        -2.0 * self.c2 * r
    }
    pub fn second(&self, _r: f64) -> f64 {
        -2.0 * self.c2
    }
}

/// Convex part of the double well.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvexMode {
    /// `alpha * h`, `alpha in (0, 1]`.
    LogQuench { alpha: f64 },
    /// Moreau-Yosida regularization of `alpha * h + I_{[-1,1]}` at level
    /// `eps > 0`; `alpha >= 0` (zero gives the pure obstacle penalty).
    ObstaclePenalty { alpha: f64, eps: f64 },
}

/// Iteration cap for the scalar proximal solve.
const PROX_MAX_ITERS: usize = 100;

impl ConvexMode {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            ConvexMode::LogQuench { alpha } => {
                if alpha > 0.0 && alpha <= 1.0 {
                    Ok(())
                } else {
                    Err(format!("log-quench alpha must lie in (0, 1], got {alpha}"))
                }
            }
            ConvexMode::ObstaclePenalty { alpha, eps } => {
                if alpha >= 0.0 && eps > 0.0 {
                    Ok(())
                } else {
                    Err(format!(
                        "obstacle penalty needs alpha >= 0 and eps > 0, got alpha={alpha}, eps={eps}"
                    ))
                }
            }
        }
    }

    pub fn is_log_quench(&self) -> bool {
        matches!(self, ConvexMode::LogQuench { .. })
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            ConvexMode::LogQuench { alpha } => alpha,
            ConvexMode::ObstaclePenalty { alpha, .. } => alpha,
        }
    }

    /// First derivative of the convex part.
    ///
    /// `LogQuench` requires `|r| < 1`; the penalty modes are total on the
    /// real line.
    pub fn prime(&self, r: f64) -> Result<f64, PotentialError> {
        match *self {
            ConvexMode::LogQuench { alpha } => Ok(alpha * h_prime(r)?),
            ConvexMode::ObstaclePenalty { alpha, eps } => moreau_yosida_prime(r, alpha, eps),
        }
    }

    /// Second derivative of the convex part (nonnegative).
    pub fn second(&self, r: f64) -> Result<f64, PotentialError> {
        match *self {
            ConvexMode::LogQuench { alpha } => Ok(alpha * h_second(r)?),
            ConvexMode::ObstaclePenalty { alpha, eps } => {
                if alpha == 0.0 {
                    Ok(if r.abs() > 1.0 { 1.0 / eps } else { 0.0 })
                } else {
                    let s = prox_log_quench(r, alpha, eps)?;
                    let hpp = h_second(s)?;
                    // d/dr (r - s(r))/eps with s'(r) = 1/(1 + eps alpha h''(s))
                    Ok(alpha * hpp / (1.0 + eps * alpha * hpp))
                }
            }
        }
    }
}

/// Derivative of the Moreau envelope of `alpha * h (+ indicator)` at level
/// `eps`, i.e. `(r - prox(r)) / eps`.
///
/// For `alpha = 0` this is the standard exterior penalty
/// `(1/eps)(r - clamp(r, -1, 1))`; for `alpha > 0` the proximal point solves
/// `s + eps * alpha * h'(s) = r` inside `(-1, 1)` (safeguarded Newton).
/// Monotone nondecreasing in `r`, and `|value| <= alpha |h'(r)|` on `(-1,1)`.
pub fn moreau_yosida_prime(r: f64, alpha: f64, eps: f64) -> Result<f64, PotentialError> {
    if !(eps > 0.0) || alpha < 0.0 || !r.is_finite() {
        return Err(PotentialError::DomainError { r });
    }
    if alpha == 0.0 {
        return Ok((r - r.clamp(-1.0, 1.0)) / eps);
    }
    let s = prox_log_quench(r, alpha, eps)?;
    Ok((r - s) / eps)
}

/// Moreau envelope value `alpha h(prox) + (r - prox)^2 / (2 eps)`.
pub fn moreau_yosida_value(r: f64, alpha: f64, eps: f64) -> Result<f64, PotentialError> {
    if !(eps > 0.0) || alpha < 0.0 || !r.is_finite() {
        return Err(PotentialError::DomainError { r });
    }
    if alpha == 0.0 {
        let d = r - r.clamp(-1.0, 1.0);
        return Ok(d * d / (2.0 * eps));
    }
    let s = prox_log_quench(r, alpha, eps)?;
    let d = r - s;
    Ok(alpha * h_value(s)? + d * d / (2.0 * eps))
}

/// Proximal point of `alpha * h` at parameter `eps`: the unique root of
/// `g(s) = s + eps*alpha*h'(s) - r` in `(-1, 1)`.
///
/// Newton safeguarded by bisection on a bracket that always contains the
/// root; `g` is strictly increasing, `g(-1+) = -inf`, `g(1-) = +inf`.
pub fn prox_log_quench(r: f64, alpha: f64, eps: f64) -> Result<f64, PotentialError> {
    let ea = eps * alpha;
    // open-interval bracket; h' is finite here (|h'| <= ~37 at 1e-16 from the end)
    let mut lo = -1.0 + 1e-16;
    let mut hi = 1.0 - 1e-16;
    let g = |s: f64| s + ea * ((1.0 + s) / (1.0 - s)).ln() - r;
    if g(lo) >= 0.0 {
        return Ok(lo);
    }
    if g(hi) <= 0.0 {
        return Ok(hi);
    }
    let mut s = r.clamp(-1.0 + 1e-3, 1.0 - 1e-3);
    let tol = 1e-14 * (1.0 + r.abs());
    let mut best = (s, f64::INFINITY);
    for _ in 0..PROX_MAX_ITERS {
        let gs = g(s);
        if gs.abs() < best.1 {
            best = (s, gs.abs());
        }
        if gs.abs() <= tol {
            return Ok(s);
        }
        if gs > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        // Near the endpoints the logarithm moves by far more than `tol` per
        // ulp of s; once the bracket is a single float step the best point
        // is the answer.
        if hi - lo <= f64::EPSILON {
            return Ok(best.0);
        }
        let gp = 1.0 + ea * 2.0 / (1.0 - s * s);
        let mut next = s - gs / gp;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == s {
            return Ok(best.0);
        }
        s = next;
    }
    Err(PotentialError::NonConvergence {
        r,
        alpha,
        eps,
        iters: PROX_MAX_ITERS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2X2: f64 = 2.0 * std::f64::consts::LN_2;

    #[test]
    fn h_closed_form_values() {
        assert_eq!(h_value(0.0).unwrap(), 0.0);
        assert_eq!(h_prime(0.0).unwrap(), 0.0);
        assert_eq!(h_second(0.0).unwrap(), 2.0);
        assert!((h_value(1.0).unwrap() - LN2X2).abs() < 1e-15);
        assert!((h_value(-1.0).unwrap() - LN2X2).abs() < 1e-15);
        assert!((h_prime(0.5).unwrap() - 3.0_f64.ln()).abs() < 1e-15);
        assert!((h_second(0.5).unwrap() - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn h_domain_errors() {
        assert!(h_value(1.0 + 1e-12).is_err());
        assert!(h_prime(1.0).is_err());
        assert!(h_second(-1.0).is_err());
    }

    #[test]
    fn h_is_convex_by_second_differences() {
        let n = 2000;
        let dr = 1e-3;
        for k in 1..n {
            let r = -1.0 + 2.0 * k as f64 / n as f64;
            if r.abs() + dr >= 1.0 {
                continue;
            }
            let dd = h_value(r - dr).unwrap() - 2.0 * h_value(r).unwrap() + h_value(r + dr).unwrap();
            assert!(dd >= 0.0, "second difference at {r}: {dd:e}");
        }
    }

    #[test]
    fn scaled_family_prime_is_exactly_alpha_h_prime() {
        for &alpha in &[1.0, 0.5, 0.25, 0.01] {
            let mode = ConvexMode::LogQuench { alpha };
            for &r in &[-0.99, -0.5, 0.0, 0.3, 0.97] {
                assert_eq!(mode.prime(r).unwrap(), alpha * h_prime(r).unwrap());
            }
        }
    }

    #[test]
    fn quench_family_prime_decreases_monotonically_to_zero() {
        let r = 0.8;
        let hp = h_prime(r).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let alpha = 0.5_f64.powi(k);
            let v = alpha * hp;
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(prev < 1e-5 * hp);
    }

    #[test]
    fn concave_part_derivatives() {
        let f = ConcavePart { c1: 0.0, c2: 0.5 };
        assert_eq!(f.prime(1.0), -1.0);
        assert_eq!(f.second(17.0), f.second(-3.0));
        // Lipschitz constant 2 c2 for the linear derivative
        for k in 0..50 {
            let a = -5.0 + 0.2 * k as f64;
            let b = a + 0.37;
            let lhs = (f.prime(a) - f.prime(b)).abs();
            assert!(lhs <= 2.0 * f.c2 * (a - b).abs() + 1e-12);
        }
    }

    #[test]
    fn penalty_prime_interior_and_exterior() {
        assert_eq!(moreau_yosida_prime(0.5, 0.0, 0.1).unwrap(), 0.0);
        let v = moreau_yosida_prime(1.2, 0.0, 0.1).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "got {v}");
    }

    /// Brute-force proximal oracle: minimize `s -> alpha h(s) + (r-s)^2/(2 eps)`
    /// on a fine grid of `(-1, 1)`.
    fn prox_oracle(r: f64, alpha: f64, eps: f64) -> (f64, f64) {
        let n = 2_000_000;
        let mut best_s = 0.0;
        let mut best_v = f64::INFINITY;
        for k in 1..n {
            let s = -1.0 + 2.0 * k as f64 / n as f64;
            let v = alpha * h_value(s).unwrap() + (r - s) * (r - s) / (2.0 * eps);
            if v < best_v {
                best_v = v;
                best_s = s;
            }
        }
        (best_s, best_v)
    }

    #[test]
    fn moreau_yosida_prime_matches_brute_force_oracle() {
        let (r, alpha, eps) = (0.9, 0.5, 0.01);
        let v = moreau_yosida_prime(r, alpha, eps).unwrap();
        // envelope bound from the interior approximation
        assert!(v >= 0.0);
        assert!(v <= alpha * h_prime(r).unwrap());
        let (s_star, _) = prox_oracle(r, alpha, eps);
        let s = prox_log_quench(r, alpha, eps).unwrap();
        assert!((s - s_star).abs() < 2e-6, "prox {s} vs oracle {s_star}");
        // at the root, (r - s)/eps equals alpha h'(s)
        assert!((v - alpha * h_prime(s).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn envelope_ordering_holds_on_samples() {
        // 0 <= h_{alpha,eps}(r) <= h_alpha(r) <= h(r), envelope via oracle
        let alpha = 0.5;
        let eps = 0.05;
        for &r in &[-0.95, -0.4, 0.0, 0.3, 0.8, 0.999] {
            let (_, env_oracle) = prox_oracle(r, alpha, eps);
            let env = moreau_yosida_value(r, alpha, eps).unwrap();
            assert!((env - env_oracle).abs() < 1e-5, "envelope {env} vs {env_oracle}");
            let ha = alpha * h_value(r).unwrap();
            assert!(env >= -1e-15);
            assert!(env <= ha + 1e-12);
            assert!(ha <= h_value(r).unwrap() + 1e-12);
        }
    }

    #[test]
    fn moreau_yosida_prime_is_monotone() {
        let alpha = 0.3;
        let eps = 0.02;
        let mut prev = f64::NEG_INFINITY;
        for k in 0..400 {
            let r = -2.0 + 4.0 * k as f64 / 399.0;
            let v = moreau_yosida_prime(r, alpha, eps).unwrap();
            assert!(v >= prev - 1e-12, "not monotone at r={r}");
            prev = v;
        }
    }

    #[test]
    fn obstacle_second_derivative_is_piecewise() {
        let mode = ConvexMode::ObstaclePenalty { alpha: 0.0, eps: 0.01 };
        assert_eq!(mode.second(0.3).unwrap(), 0.0);
        assert_eq!(mode.second(1.4).unwrap(), 100.0);
    }
}
