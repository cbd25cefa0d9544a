//! Backward-in-time adjoint solves around a stored state trajectory, plus the
//! optimality diagnostics used to certify stationarity.
//!
//! The adjoint unknowns are `(p, q, r)` with `q = -lap p` and the running
//! backward integral `s = int_t^T r`. Marching backward from the terminal
//! data, each reverse step solves
//!
//! 1. the `r` equation implicitly (`s` and `q` lagged one reverse level):
//!    `-dr/dt - lap(kappa1 r - kappa2 s) - b q = f_adj`, one DCT solve with
//!    the same implicit operator as the forward thermal sub-step, then
//!    updates `s` by the trapezoid rule (so the stored `s` matches the shared
//!    convolution quadrature exactly);
//! 2. the `(p, q)` block with the fresh `dr/dt`. The convex curvature
//!    `G''(phi) q` is implicit and the concave one `F''(phi) q` is lagged,
//!    mirroring the forward splitting. Eliminating the mean of `p` (it
//!    satisfies a closed scalar identity) and writing `p - mean p = N q`
//!    turns the block into a symmetric positive definite system
//!    `(beta N + (-lap) + P0 G'' P0) q = P0 rhs`
//!    in the zero-mean unknown `q`, solved by preconditioned CG; `p` is then
//!    recovered as `N q` plus its mean. The mean of `q` vanishes identically,
//!    which is also asserted by the diagnostics.
//!
//! The same quadratures (trapezoid in time, cell sums in space) are reused by
//! the mean-of-`p` identity residual so that the identity degenerates to
//! first order in `dt` and to rounding at `t = T`.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{trapezoid_tail, Field, FieldSeries, Grid, GridError, TimeGrid};
use crate::linalg::pcg;
use crate::par;
use crate::potential::{ConcavePart, ConvexMode};
use crate::spectral::NeumannOps;
use crate::state::{convex_second_field, SolveError, StateTrajectory};

/// Relative CG tolerance of the reduced `(p, q)` solves.
pub const ADJOINT_CG_RTOL: f64 = 1e-11;

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("cost targets misaligned: {0}")]
    Shape(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Tracking weights, control weight, and targets of the cost functional.
#[derive(Debug, Clone)]
pub struct CostSpec {
    /// `[beta1..beta6]`: distributed/terminal tracking weights for
    /// `phi`, `phi(T)`, `w`, `w(T)`, `dw/dt`, `dw/dt(T)`.
    pub beta: [f64; 6],
    /// Control weight `nu >= 0`.
    pub nu: f64,
    pub phi_q: FieldSeries,
    pub w_q: FieldSeries,
    pub wprime_q: FieldSeries,
    pub phi_omega: Field,
    pub w_omega: Field,
    pub wprime_omega: Field,
}

impl CostSpec {
    /// All-zero targets; weights supplied by the caller.
    pub fn with_zero_targets(grid: Grid, tg: &TimeGrid, beta: [f64; 6], nu: f64) -> Self {
        Self {
            beta,
            nu,
            phi_q: FieldSeries::zeros(grid, tg),
            w_q: FieldSeries::zeros(grid, tg),
            wprime_q: FieldSeries::zeros(grid, tg),
            phi_omega: Field::zeros(grid),
            w_omega: Field::zeros(grid),
            wprime_omega: Field::zeros(grid),
        }
    }

    /// Not all of `beta1..beta6, nu` may vanish.
    pub fn is_nontrivial(&self) -> bool {
        self.beta.iter().any(|&b| b > 0.0) || self.nu > 0.0
    }

    pub fn check_alignment(&self, tg: &TimeGrid) -> Result<(), GridError> {
        self.phi_q.check_alignment(tg)?;
        self.w_q.check_alignment(tg)?;
        self.wprime_q.check_alignment(tg)?;
        Ok(())
    }
}

/// Source terms and terminal data of the adjoint system, assembled from the
/// state and the cost targets:
/// `f_adj(t) = beta3 (1 (*) (w - w_Q))(t) + beta5 (v(t) - w'_Q(t)) + beta4 (w(T) - w_Omega)`,
/// `g_adj(t) = beta1 (phi(t) - phi_Q(t))`,
/// `rho_term = beta6 (v(T) - w'_Omega)`,
/// `pi_term = beta2 (phi(T) - phi_Omega) - lambda rho_term`.
#[derive(Debug, Clone)]
pub struct AdjointSources {
    pub f_adj: FieldSeries,
    pub g_adj: FieldSeries,
    pub rho_term: Field,
    pub pi_term: Field,
}

/// Backward trajectory `(p, q, r, s = 1 (*) r)` on the time nodes.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub p: FieldSeries,
    pub q: FieldSeries,
    pub r: FieldSeries,
    pub s: FieldSeries,
}

/// Adjoint solver bound to one state trajectory's discretization.
#[derive(Clone)]
pub struct AdjointSolver {
    ops: Arc<NeumannOps>,
    tg: TimeGrid,
    gamma: f64,
    b: f64,
    kappa1: f64,
    kappa2: f64,
    lambda: f64,
    concave: ConcavePart,
    mode: ConvexMode,
}

impl AdjointSolver {
    pub fn new(
        ops: Arc<NeumannOps>,
        tg: TimeGrid,
        params: &crate::state::PhysParams,
        concave: ConcavePart,
        mode: ConvexMode,
    ) -> Self {
        Self {
            ops,
            tg,
            gamma: params.gamma,
            b: params.b,
            kappa1: params.kappa1,
            kappa2: params.kappa2,
            lambda: params.lambda,
            concave,
            mode,
        }
    }

    pub fn grid(&self) -> Grid {
        self.ops.grid()
    }

    /// Assemble the adjoint sources from the state and cost targets.
    pub fn build_sources(
        &self,
        state: &StateTrajectory,
        cost: &CostSpec,
    ) -> Result<AdjointSources, AdjointError> {
        let tg = &self.tg;
        state.phi.check_alignment(tg)?;
        cost.check_alignment(tg)?;
        let grid = self.grid();
        let nt = tg.nt();
        let [b1, b2, b3, b4, b5, b6] = cost.beta;

        // backward convolution of the w-tracking misfit
        let w_misfit = FieldSeries::new(
            (0..=nt)
                .map(|n| state.w.at(n).sub(cost.w_q.at(n)))
                .collect(),
        );
        let conv = w_misfit.convolve_backward(tg)?;

        let w_terminal = state.w.at(nt).sub(&cost.w_omega);
        let mut f_adj = Vec::with_capacity(nt + 1);
        for n in 0..=nt {
            let mut f = Field::zeros(grid);
            {
                let (c, v, wq, wt) = (
                    conv.at(n).values(),
                    state.v.at(n).values(),
                    cost.wprime_q.at(n).values(),
                    w_terminal.values(),
                );
                par::fill_indexed(f.values_mut(), |i| {
                    b3 * c[i] + b5 * (v[i] - wq[i]) + b4 * wt[i]
                });
            }
            f_adj.push(f);
        }

        let g_adj = FieldSeries::new(
            (0..=nt)
                .map(|n| {
                    let mut g = state.phi.at(n).sub(cost.phi_q.at(n));
                    g.scale(b1);
                    g
                })
                .collect(),
        );

        let mut rho_term = state.v.at(nt).sub(&cost.wprime_omega);
        rho_term.scale(b6);
        let mut pi_term = state.phi.at(nt).sub(&cost.phi_omega);
        pi_term.scale(b2);
        pi_term.axpy(-self.lambda, &rho_term);

        Ok(AdjointSources {
            f_adj: FieldSeries::new(f_adj),
            g_adj,
            rho_term,
            pi_term,
        })
    }

    /// Backward solve. The second derivative of the double well is evaluated
    /// on the stored `phi`; in penalty mode this is the penalty curvature
    /// (an eps-level surrogate for the obstacle multiplier derivative).
    pub fn solve(
        &self,
        state: &StateTrajectory,
        cost: &CostSpec,
    ) -> Result<AdjointTrajectory, AdjointError> {
        let sources = self.build_sources(state, cost)?;
        self.solve_with_sources(state, &sources)
    }

    /// Backward solve from preassembled sources.
    pub fn solve_with_sources(
        &self,
        state: &StateTrajectory,
        sources: &AdjointSources,
    ) -> Result<AdjointTrajectory, AdjointError> {
        let tg = &self.tg;
        let grid = self.grid();
        let nt = tg.nt();
        let dt = tg.dt();

        let mut p = vec![Field::zeros(grid); nt + 1];
        let mut q = vec![Field::zeros(grid); nt + 1];
        let mut r = vec![Field::zeros(grid); nt + 1];
        let mut s = vec![Field::zeros(grid); nt + 1];

        // terminal data: p(T) = pi, r(T) = rho, s(T) = 0, q(T) = -lap p(T)
        p[nt] = sources.pi_term.clone();
        r[nt] = sources.rho_term.clone();
        let mut q_t = self.ops.laplacian(&p[nt]);
        q_t.scale(-1.0);
        q_t.remove_mean();
        q[nt] = q_t;

        let mut p_prev = p[nt].clone();
        let mut q_prev = q[nt].clone();
        let mut r_prev = r[nt].clone();

        for n in (0..nt).rev() {
            let f_window = sources.f_adj.at(n).lin_comb(0.5, 0.5, sources.f_adj.at(n + 1));
            let g_window = sources.g_adj.at(n).lin_comb(0.5, 0.5, sources.g_adj.at(n + 1));
            // (i) r equation, implicit in r, with the lagged q (predictor).
            let r_pred =
                self.solve_r_level(&f_window, &r_prev, &s[n + 1], &q_prev, &r[n + 1], dt)?;
            // (ii) (p, q) block with the fresh dr/dt from the predictor.
            let (_, q_half) =
                self.solve_pq_level(state, &g_window, &p_prev, &q_prev, &r_prev, &r_pred, n, n)?;
            // (iii) corrector sweep: the r equation again with the
            // window-averaged q, then the (p, q) block with the corrected
            // dr/dt. One extra pass removes the one-level delay in the
            // cross-couplings, which otherwise dominates the gradient error.
            let q_avg = q_half.lin_comb(0.5, 0.5, &q_prev);
            let r_n = self.solve_r_level(&f_window, &r_prev, &s[n + 1], &q_avg, &r[n + 1], dt)?;
            let (p_n, q_n) =
                self.solve_pq_level(state, &g_window, &p_prev, &q_prev, &r_prev, &r_n, n, n)?;

            // trapezoid update keeps s = 1 (*) r on the shared quadrature
            let mut s_n = s[n + 1].clone();
            s_n.axpy(0.5 * dt, &r_n);
            s_n.axpy(0.5 * dt, &r[n + 1]);
            s[n] = s_n;
            r[n] = r_n.clone();
            p[n] = p_n.clone();
            q[n] = q_n.clone();
            r_prev = r_n;
            p_prev = p_n;
            q_prev = q_n;
        }

        Ok(AdjointTrajectory {
            p: FieldSeries::new(p),
            q: FieldSeries::new(q),
            r: FieldSeries::new(r),
            s: FieldSeries::new(s),
        })
    }

    /// One implicit solve of the `r` equation given the window-averaged
    /// source, the lagged `s` series value, and an effective `q`. The
    /// trapezoid half of `s` belonging to the current level folds into the
    /// implicit operator.
    #[allow(clippy::too_many_arguments)]
    fn solve_r_level(
        &self,
        f_window: &Field,
        r_prev_level: &Field,
        s_next: &Field,
        q_eff: &Field,
        r_stored_next: &Field,
        dt: f64,
    ) -> Result<Field, AdjointError> {
        let grid = self.grid();
        // known part of s at this level: s^{n+1} + (dt/2) r^{n+1}
        let s_known = s_next.lin_comb(1.0, 0.5 * dt, r_stored_next);
        let lap_s = self.ops.laplacian(&s_known);
        // Memory flux sign: the backward equation carries kappa1 r + kappa2 s,
        // the adjoint of the forward Green-Naghdi flux. The opposite sign
        // would make the backward evolution a time-reversed heat flow (and
        // the transposed-forward gradient check rejects it decisively).
        let mut rhs = Field::zeros(grid);
        {
            let (fa, rn1, ls, qe) = (
                f_window.values(),
                r_prev_level.values(),
                lap_s.values(),
                q_eff.values(),
            );
            let (k2, bc) = (self.kappa2, self.b);
            par::fill_indexed(rhs.values_mut(), |i| {
                rn1[i] + dt * (fa[i] + k2 * ls[i] + bc * qe[i])
            });
        }
        // implicit coefficient of (-lap): dt kappa1 plus the in-level half of
        // the s trapezoid
        let b_coef = dt * (self.kappa1 + 0.5 * dt * self.kappa2);
        Ok(self.ops.helmholtz_solve(1.0, b_coef, &rhs))
    }

    /// One solve of the `(p, q)` block with a window-averaged source and a
    /// given `dr/dt` realization, reduced to the zero-mean SPD system in `q`.
    /// Convex curvature implicit, concave curvature lagged (evaluated on the
    /// lagged `q`), mirroring the forward splitting.
    #[allow(clippy::too_many_arguments)]
    fn solve_pq_level(
        &self,
        state: &StateTrajectory,
        g_window: &Field,
        p_next: &Field,
        q_next: &Field,
        r_next: &Field,
        r_cur: &Field,
        phi_level: usize,
        n: usize,
    ) -> Result<(Field, Field), AdjointError> {
        let grid = self.grid();
        let dt = self.tg.dt();
        let beta = 1.0 / dt + self.gamma;
        let d = convex_second_field(&self.mode, state.phi.at(phi_level))?;
        let dbar_pos = d.mean().max(0.0);
        let fpp = self.concave.second(0.0);
        let mut rhs_pq = Field::zeros(grid);
        {
            let (g, pn1, rn1, rn, qn1) = (
                g_window.values(),
                p_next.values(),
                r_next.values(),
                r_cur.values(),
                q_next.values(),
            );
            let lam = self.lambda;
            par::fill_indexed(rhs_pq.values_mut(), |i| {
                g[i] + pn1[i] / dt + lam * (rn1[i] - rn[i]) / dt - fpp * qn1[i]
            });
        }
        let rhs_mean = rhs_pq.mean();
        let mut rhs_zm = rhs_pq;
        rhs_zm.remove_mean();

        let ops = self.ops.clone();
        let apply = |x: &Field| {
            let mut out = ops.inv_laplacian_unchecked(x);
            out.scale(beta);
            let lap = ops.laplacian(x);
            out.axpy(-1.0, &lap);
            let mut dx = Field::zeros(grid);
            let (dv, xv) = (d.values(), x.values());
            par::fill_indexed(dx.values_mut(), |i| dv[i] * xv[i]);
            dx.remove_mean();
            out.axpy(1.0, &dx);
            out
        };
        let precond = |res: &Field| ops.precond_reduced(beta, dbar_pos, res);
        let mut q_n = q_next.clone();
        q_n.remove_mean();
        let out = pcg(apply, precond, &rhs_zm, &mut q_n, ADJOINT_CG_RTOL, 800);
        if !out.converged {
            return Err(AdjointError::Solve(SolveError::LinearSolveFailure {
                step: n,
                rel_residual: out.rel_residual,
            }));
        }
        q_n.remove_mean();

        // recover p = N q + mean(p), mean from the full equation's mean part
        let y = self.ops.inv_laplacian_unchecked(&q_n);
        let mut dq = Field::zeros(grid);
        {
            let (dv, qv) = (d.values(), q_n.values());
            par::fill_indexed(dq.values_mut(), |i| dv[i] * qv[i]);
        }
        let p_mean = (rhs_mean - dq.mean()) / beta;
        Ok((y.map(|v| v + p_mean), q_n))
    }

    /// `G''(phi(t_n)) + F''(phi(t_n))` as a field.
    fn curvature_field(&self, state: &StateTrajectory, n: usize) -> Result<Field, SolveError> {
        let conv = convex_second_field(&self.mode, state.phi.at(n))?;
        let fpp = self.concave.second(0.0);
        Ok(conv.map(|v| v + fpp))
    }

    /// Residual of the closed identity for `mean p(t)`:
    /// `mean p(t) - [mean pi + lambda mean rho - lambda mean r(t)
    ///   + (1/|Omega|) int_t^T int_Omega g_adj
    ///   - (1/|Omega|) int_t^T int_Omega (gamma p + (G'' + F'')(phi) q)]`,
    /// evaluated with the shared trapezoid quadrature. Zero to rounding at
    /// `t = T`; first order in `dt` inside.
    pub fn mean_p_identity_residual(
        &self,
        adj: &AdjointTrajectory,
        state: &StateTrajectory,
        sources: &AdjointSources,
    ) -> Result<Vec<f64>, AdjointError> {
        let tg = &self.tg;
        let nt = tg.nt();
        let pi_mean = sources.pi_term.mean();
        let rho_mean = sources.rho_term.mean();

        let g_means: Vec<f64> = (0..=nt).map(|n| sources.g_adj.at(n).mean()).collect();
        let mut zq_means = Vec::with_capacity(nt + 1);
        for n in 0..=nt {
            let d = self.curvature_field(state, n)?;
            let p_n = adj.p.at(n);
            let q_n = adj.q.at(n);
            let mut z = Field::zeros(self.grid());
            let (dv, qv, pv) = (d.values(), q_n.values(), p_n.values());
            let gamma = self.gamma;
            par::fill_indexed(z.values_mut(), |i| gamma * pv[i] + dv[i] * qv[i]);
            zq_means.push(z.mean());
        }
        let g_tail = trapezoid_tail(&g_means, tg);
        let zq_tail = trapezoid_tail(&zq_means, tg);

        let mut residuals = Vec::with_capacity(nt + 1);
        for n in 0..=nt {
            let predicted = pi_mean + self.lambda * rho_mean - self.lambda * adj.r.at(n).mean()
                + g_tail[n]
                - zq_tail[n];
            residuals.push(adj.p.at(n).mean() - predicted);
        }
        Ok(residuals)
    }

    /// Complementarity slackness value
    /// `int_Q h_alpha''(phi) |q|^2 = alpha * int_Q (2 / (1 - phi^2)) |q|^2`,
    /// trapezoid in time. Nonnegative by the sign of the integrand, and
    /// exactly linear in `alpha` (the factor is pulled out of the sum).
    pub fn slackness_value(
        &self,
        adj: &AdjointTrajectory,
        state: &StateTrajectory,
        alpha: f64,
    ) -> f64 {
        let tg = &self.tg;
        let mut acc = 0.0;
        for n in 0..=tg.nt() {
            let phi = state.phi.at(n).values();
            let q = adj.q.at(n).values();
            let cell = par::det_sum_indexed(phi.len(), |i| {
                2.0 / (1.0 - phi[i] * phi[i]) * q[i] * q[i]
            });
            acc += tg.trapezoid_weight(n) * cell * self.grid().cell_area();
        }
        alpha * acc
    }

    /// Reduced splitting diagnostics: returns `N q(t_n)` for every node and
    /// checks both `mean q = 0` and the splitting identity
    /// `p - mean p = N q` (exact for this discretization up to solver
    /// tolerance).
    pub fn reduced_nq_diagnostics(
        &self,
        adj: &AdjointTrajectory,
    ) -> Result<FieldSeries, AdjointError> {
        let tg = &self.tg;
        let mut out = Vec::with_capacity(tg.n_nodes());
        for n in 0..=tg.nt() {
            let q_n = adj.q.at(n);
            let mean = q_n.mean();
            let tol = 1e-10 * q_n.max_abs().max(1e-300);
            if mean.abs() > tol {
                return Err(AdjointError::Shape(GridError::NonZeroMean { mean, tol }));
            }
            let nq = self.ops.inv_laplacian_unchecked(q_n);
            let p_n = adj.p.at(n);
            let p_mean = p_n.mean();
            let gap = par::det_max_indexed(nq.len(), |i| {
                (p_n.values()[i] - p_mean - nq.values()[i]).abs()
            });
            let bound = 1e-9 * p_n.max_abs().max(1e-300);
            if gap > bound.max(1e-13) {
                return Err(AdjointError::Solve(SolveError::LinearSolveFailure {
                    step: n,
                    rel_residual: gap / p_n.max_abs().max(1e-300),
                }));
            }
            out.push(nq);
        }
        Ok(FieldSeries::new(out))
    }
}
