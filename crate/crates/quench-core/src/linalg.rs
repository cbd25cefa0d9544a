//! Small shared numerics: preconditioned conjugate gradients on fields and a
//! least-squares line fit used by the rate studies.

use crate::grid::Field;

/// Outcome of a PCG solve.
#[derive(Debug, Clone, Copy)]
pub struct PcgOutcome {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients for a symmetric positive definite
/// operator given as a closure. Terminates on `|r| <= rtol * |b|` (L2 norms).
///
/// `x` holds the initial guess on entry and the solution on exit. Inner
/// products run through the deterministic reductions of [`crate::par`], so a
/// solve is bitwise reproducible.
pub fn pcg<A, M>(
    apply_a: A,
    apply_m_inv: M,
    b: &Field,
    x: &mut Field,
    rtol: f64,
    max_iters: usize,
) -> PcgOutcome
where
    A: Fn(&Field) -> Field,
    M: Fn(&Field) -> Field,
{
    let b_norm = b.norm_l2();
    if b_norm == 0.0 {
        x.scale(0.0);
        return PcgOutcome {
            iterations: 0,
            rel_residual: 0.0,
            converged: true,
        };
    }
    let tol = rtol * b_norm;

    let ax = apply_a(x);
    let mut r = b.sub(&ax);
    let mut z = apply_m_inv(&r);
    let mut p = z.clone();
    let mut rz = r.inner(&z);
    let mut r_norm = r.norm_l2();

    let mut iters = 0;
    while r_norm > tol && iters < max_iters {
        let ap = apply_a(&p);
        let pap = p.inner(&ap);
        if !(pap > 0.0) {
            // loss of positive definiteness (or stagnation); report back
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        r_norm = r.norm_l2();
        if r_norm <= tol {
            iters += 1;
            break;
        }
        z = apply_m_inv(&r);
        let rz_new = r.inner(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = z.lin_comb(1.0, beta, &p);
        iters += 1;
    }
    PcgOutcome {
        iterations: iters,
        rel_residual: r_norm / b_norm,
        converged: r_norm <= tol,
    }
}

/// Least-squares fit `y = slope * x + intercept`, returning
/// `(slope, intercept, rms_residual)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points for a line fit");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let e = y - (slope * x + intercept);
        ss += e * e;
    }
    (slope, intercept, (ss / n).sqrt())
}
