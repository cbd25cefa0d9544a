//! Forward time integration of the coupled system: a Cahn-Hilliard equation
//! with source term for the order parameter, staggered with the second-order
//! (in time) thermal-displacement equation of Green-Naghdi type.
//!
//! One step advances `(phi, mu, w, v = dw/dt)` from `t_n` to `t_{n+1}`:
//!
//! 1. CH sub-step, convex-implicit / concave-explicit:
//!    `(phi' - phi)/dt - lap mu' + gamma phi' = f'`,
//!    `mu' = -lap phi' + G'(phi') + F'(phi) + a - b v`,
//!    where `G` is the convex part ([`ConvexMode`]) and `F` the concave
//!    quadratic. Solved by damped Newton. The mean of `phi'` satisfies the
//!    scalar recurrence `(m' - m)/dt + gamma m' = fbar'` exactly: it is
//!    eliminated up front and the zero-mean remainder is solved in the
//!    inverse-Laplacian (dual) formulation, whose Jacobian
//!    `beta N + (-lap) + P0 G'' P0` is symmetric positive definite, so the
//!    Newton corrections come from preconditioned CG with a DCT-diagonal
//!    preconditioner (`G''` replaced by its spatial mean).
//! 2. Thermal sub-step with the fresh `dphi/dt`:
//!    `(v' - v)/dt - lap(kappa1 v' + kappa2 w') + lambda dphi/dt = u'`,
//!    `w' = w + dt v'`, one constant-coefficient DCT solve.
//!
//! In `LogQuench` mode the Newton damping keeps every iterate strictly inside
//! `(-1, 1)` (the logarithmic derivative blows up at the endpoints), which is
//! what makes the discrete strict separation property observable. In
//! `ObstaclePenalty` mode each step runs a decreasing-`eps` continuation and
//! reports the penalty term as the obstacle multiplier surrogate `xi`.

use std::sync::Arc;

use thiserror::Error;

use crate::control::BoxBounds;
use crate::grid::{Field, FieldSeries, Grid, GridError, TimeGrid};
use crate::linalg::pcg;
use crate::par;
use crate::potential::{ConcavePart, ConvexMode, PotentialError};
use crate::spectral::NeumannOps;

/// Newton residual tolerance factor: converged when
/// `|R|_inf <= NEWTON_RTOL * (1 + |f_next|_inf)` plus the machine floor.
pub const NEWTON_RTOL: f64 = 1e-10;
/// Multipliers of the floating-point evaluation noise of the strong-form
/// residual `lap(lap(phi) + G' + c)`: one `lap` apply costs
/// `~eps |lap| |arg|`, and the rounding made inside the inner apply passes
/// through the outer one as `~eps |lap|^2 |phi|` (with substantial random
/// cancellation). The exit test adds this floor so machine-precision
/// convergence is accepted on fine grids, where it exceeds `NEWTON_RTOL`.
pub const NEWTON_MACH_SINGLE: f64 = 8.0;
pub const NEWTON_MACH_CHAINED: f64 = 0.5;
/// Iterate interiority margin enforced by the damping in `LogQuench` mode.
pub const INTERIOR_MARGIN: f64 = 1e-14;
/// Newton iteration cap per nonlinear solve.
pub const NEWTON_MAX_ITERS: usize = 50;
/// Relative tolerance of the inner CG solves for Newton corrections.
pub const STATE_CG_RTOL: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("Newton diverged at step {step} after {iters} iterations (residual {residual:e}); reduce dt")]
    NewtonDiverged {
        step: usize,
        iters: usize,
        residual: f64,
    },
    #[error("separation lost at step {step}: max|phi| = {max_abs_phi} >= 1 in logarithmic mode")]
    SeparationLoss { step: usize, max_abs_phi: f64 },
    #[error("inner linear solve failed at step {step} (relative residual {rel_residual:e})")]
    LinearSolveFailure { step: usize, rel_residual: f64 },
    #[error("assumptions violated:\n{0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Structural constants of the coupled system; all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysParams {
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub lambda: f64,
}

impl PhysParams {
    fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("gamma", self.gamma),
            ("a", self.a),
            ("b", self.b),
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("lambda", self.lambda),
        ]
    }
}

/// Source term and initial data.
#[derive(Debug, Clone)]
pub struct ProblemData {
    /// Source in the order-parameter equation, sampled on all time nodes;
    /// the solver uses the implicit-side sample `f(t_{n+1})`.
    pub f: FieldSeries,
    pub phi0: Field,
    pub w0: Field,
    pub w1: Field,
}

/// One reported violation of the standing assumptions.
#[derive(Debug, Clone)]
pub enum Violation {
    /// A structural constant that must be strictly positive is not.
    NonPositiveConstant { name: &'static str, value: f64 },
    /// Concavity coefficient `c2` must be positive.
    BadConcavePart { c2: f64 },
    /// Convex-mode parameter out of range.
    BadConvexMode { detail: String },
    /// Control bounds must satisfy `u_min <= u_max` everywhere.
    BoxOrdering { max_violation: f64 },
    /// One of the interior quantities of the initial-data assumption leaves
    /// the open interval `(-1, 1)`.
    InteriorCondition { name: &'static str, value: f64 },
    /// Data fields contain non-finite values or are misaligned.
    BadData { detail: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonPositiveConstant { name, value } => {
                write!(f, "constant {name} must be positive, got {value}")
            }
            Violation::BadConcavePart { c2 } => {
                write!(f, "concave part needs c2 > 0, got {c2}")
            }
            Violation::BadConvexMode { detail } => write!(f, "convex mode: {detail}"),
            Violation::BoxOrdering { max_violation } => write!(
                f,
                "control box violates u_min <= u_max (max violation {max_violation:e})"
            ),
            Violation::InteriorCondition { name, value } => {
                write!(f, "interior condition: {name} = {value} leaves (-1, 1)")
            }
            Violation::BadData { detail } => write!(f, "data: {detail}"),
        }
    }
}

/// Result of [`validate_assumptions`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// `rho = |f|_inf / gamma`, the mass-forcing radius.
    pub rho: f64,
    /// The four interior quantities: `inf phi0`, `sup phi0`,
    /// `-rho - (mean phi0)^-`, `rho + (mean phi0)^+`.
    pub interior_quantities: [f64; 4],
    /// Distance of the worst interior quantity to the endpoints of `(-1, 1)`;
    /// positive iff the interior conditions hold.
    pub interior_margin: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            write!(f, "all assumptions satisfied (interior margin {:.3e})", self.interior_margin)
        } else {
            for v in &self.violations {
                writeln!(f, "- {v}")?;
            }
            Ok(())
        }
    }
}

/// Check the standing assumptions: positivity of the structural constants,
/// well-formed potential parameters, ordering of the control box, and the
/// interior conditions on the initial datum (`inf phi0`, `sup phi0`,
/// `-rho - (mean phi0)^-`, `rho + (mean phi0)^+` all inside `(-1, 1)` with
/// `rho = |f|_inf / gamma`).
pub fn validate_assumptions(
    params: &PhysParams,
    concave: &ConcavePart,
    mode: &ConvexMode,
    data: &ProblemData,
    bounds: Option<&BoxBounds>,
    tg: &TimeGrid,
) -> ValidationReport {
    let mut violations = Vec::new();
    for (name, value) in params.entries() {
        if !(value > 0.0) || !value.is_finite() {
            violations.push(Violation::NonPositiveConstant { name, value });
        }
    }
    if !(concave.c2 > 0.0) {
        violations.push(Violation::BadConcavePart { c2: concave.c2 });
    }
    if let Err(detail) = mode.validate() {
        violations.push(Violation::BadConvexMode { detail });
    }
    if data.f.check_alignment(tg).is_err() {
        violations.push(Violation::BadData {
            detail: format!(
                "source series has {} nodes, expected {}",
                data.f.len(),
                tg.n_nodes()
            ),
        });
    }
    for (name, field) in [("phi0", &data.phi0), ("w0", &data.w0), ("w1", &data.w1)] {
        if !field.is_finite() {
            violations.push(Violation::BadData {
                detail: format!("{name} contains non-finite values"),
            });
        }
    }

    let f_inf = data.f.max_abs();
    let rho = if params.gamma > 0.0 {
        f_inf / params.gamma
    } else {
        f64::INFINITY
    };
    let m0 = data.phi0.mean();
    let q = [
        data.phi0.min(),
        data.phi0.max(),
        -rho - (-m0).max(0.0),
        rho + m0.max(0.0),
    ];
    let names = [
        "inf phi0",
        "sup phi0",
        "-rho - (mean phi0)^-",
        "rho + (mean phi0)^+",
    ];
    let mut worst = f64::INFINITY;
    for (name, value) in names.iter().zip(q) {
        worst = worst.min(1.0 - value.abs());
        if !(value.abs() < 1.0) {
            violations.push(Violation::InteriorCondition { name, value });
        }
    }

    if let Some(b) = bounds {
        let viol = b.max_ordering_violation(tg);
        if viol > 0.0 {
            violations.push(Violation::BoxOrdering {
                max_violation: viol,
            });
        }
    }

    ValidationReport {
        violations,
        rho,
        interior_quantities: q,
        interior_margin: worst,
    }
}

/// State at one time node.
#[derive(Debug, Clone)]
pub struct StateAt {
    pub phi: Field,
    pub mu: Field,
    pub w: Field,
    /// `v = dw/dt`; the temperature in the thermal-displacement formulation.
    pub v: Field,
    /// Penalty term (obstacle multiplier surrogate) in penalty mode.
    pub xi: Option<Field>,
}

/// Per-step solver diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepDiag {
    pub newton_iters: usize,
    pub min_phi: f64,
    pub max_phi: f64,
    pub mean_phi: f64,
    /// `(mbar' - mbar)/dt + gamma mbar' - fbar'`; zero to rounding by
    /// construction of the scheme.
    pub mass_residual: f64,
}

/// Complete forward trajectory on the time grid.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub phi: FieldSeries,
    pub mu: FieldSeries,
    pub w: FieldSeries,
    /// `v = dw/dt`, node-aligned (`v(0) = w1`).
    pub v: FieldSeries,
    /// Penalty term per node in obstacle mode (`xi(0)` evaluated on the
    /// initial datum), `None` in logarithmic mode.
    pub xi: Option<FieldSeries>,
    pub diagnostics: Vec<StepDiag>,
    /// Final penalization level of the eps-continuation, if any.
    pub final_eps: Option<f64>,
}

impl StateTrajectory {
    /// Effective source `S(t_n) = f(t_n) - gamma phi(t_n)`.
    pub fn source(&self, data: &ProblemData, params: &PhysParams, n: usize) -> Field {
        data.f.at(n).lin_comb(1.0, -params.gamma, self.phi.at(n))
    }

    /// Empirical separation bounds: `(min, max)` of `phi` over all nodes and
    /// cells.
    pub fn separation_report(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for f in self.phi.fields() {
            lo = lo.min(f.min());
            hi = hi.max(f.max());
        }
        (lo, hi)
    }
}

/// Forward solver: owns the spectral plans, physics, potential, and time grid.
#[derive(Clone)]
pub struct StateSolver {
    ops: Arc<NeumannOps>,
    tg: TimeGrid,
    params: PhysParams,
    concave: ConcavePart,
    mode: ConvexMode,
    /// Decreasing penalization levels tried before the target `eps` in
    /// obstacle mode (warm-started Newton chain).
    pub eps_continuation: Vec<f64>,
}

impl StateSolver {
    pub fn new(
        ops: Arc<NeumannOps>,
        tg: TimeGrid,
        params: PhysParams,
        concave: ConcavePart,
        mode: ConvexMode,
    ) -> Self {
        Self {
            ops,
            tg,
            params,
            concave,
            mode,
            eps_continuation: vec![1e-2, 1e-3],
        }
    }

    pub fn ops(&self) -> &Arc<NeumannOps> {
        &self.ops
    }
    pub fn grid(&self) -> Grid {
        self.ops.grid()
    }
    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }
    pub fn params(&self) -> &PhysParams {
        &self.params
    }
    pub fn concave(&self) -> &ConcavePart {
        &self.concave
    }
    pub fn mode(&self) -> &ConvexMode {
        &self.mode
    }

    /// Evaluate `mu = -lap phi + G'(phi) + F'(phi_expl) + a - b v_expl`.
    fn chemical_potential(
        &self,
        mode: &ConvexMode,
        phi: &Field,
        c_expl: &Field,
    ) -> Result<Field, SolveError> {
        let gp = convex_prime_field(mode, phi)?;
        let lap = self.ops.laplacian(phi);
        let mut mu = Field::zeros(self.grid());
        let (l, g, c) = (lap.values(), gp.values(), c_expl.values());
        par::fill_indexed(mu.values_mut(), |i| -l[i] + g[i] + c[i]);
        Ok(mu)
    }

    /// One staggered step from `prev` (at `t_n`) with the implicit-side
    /// samples `f_next`, `u_next` (at `t_{n+1}`). `step_index` only labels
    /// errors.
    pub fn step(
        &self,
        prev: &StateAt,
        f_next: &Field,
        u_next: &Field,
        step_index: usize,
    ) -> Result<(StateAt, usize), SolveError> {
        self.step_with_mode(&self.mode, prev, &prev.phi, f_next, u_next, step_index)
    }

    /// CH + thermal step with an explicit convex mode and Newton warm start
    /// (used by the eps-continuation).
    fn step_with_mode(
        &self,
        mode: &ConvexMode,
        prev: &StateAt,
        phi_init: &Field,
        f_next: &Field,
        u_next: &Field,
        step_index: usize,
    ) -> Result<(StateAt, usize), SolveError> {
        let (phi_next, mu_next, iters) =
            self.ch_substep(mode, &prev.phi, &prev.v, phi_init, f_next, step_index)?;
        let (w_next, v_next) = self.thermal_substep(&prev.phi, &phi_next, &prev.w, &prev.v, u_next);
        let xi = match mode {
            ConvexMode::ObstaclePenalty { .. } => Some(convex_prime_field(mode, &phi_next)?),
            ConvexMode::LogQuench { .. } => None,
        };
        Ok((
            StateAt {
                phi: phi_next,
                mu: mu_next,
                w: w_next,
                v: v_next,
                xi,
            },
            iters,
        ))
    }

    /// Nonlinear Cahn-Hilliard sub-step. Returns `(phi', mu', newton_iters)`.
    fn ch_substep(
        &self,
        mode: &ConvexMode,
        phi_prev: &Field,
        v_prev: &Field,
        phi_init: &Field,
        f_next: &Field,
        step_index: usize,
    ) -> Result<(Field, Field, usize), SolveError> {
        let grid = self.grid();
        let dt = self.tg.dt();
        let gamma = self.params.gamma;
        let beta = 1.0 / dt + gamma;
        let log_mode = mode.is_log_quench();

        // Concave-explicit part: F'(phi^n) + a - b v^n.
        let concave = self.concave;
        let a_coef = self.params.a;
        let b_coef = self.params.b;
        let mut c_expl = Field::zeros(grid);
        {
            let (p, v) = (phi_prev.values(), v_prev.values());
            par::fill_indexed(c_expl.values_mut(), |i| {
                concave.prime(p[i]) + a_coef - b_coef * v[i]
            });
        }

        // Mean of phi' is exact: (m + dt fbar') / (1 + gamma dt).
        let m_next = (phi_prev.mean() + dt * f_next.mean()) / (1.0 + gamma * dt);

        // b1 = phi^n/dt + f'
        let mut b1 = Field::zeros(grid);
        {
            let (p, f) = (phi_prev.values(), f_next.values());
            par::fill_indexed(b1.values_mut(), |i| p[i] / dt + f[i]);
        }

        // Zero-mean unknown y with phi = m_next + y, warm-started.
        let mut y = phi_init.clone();
        y.remove_mean();
        if log_mode {
            let limit = 1.0 - 1e-9;
            let peak = m_next.abs() + y.max_abs();
            if peak >= limit {
                let room = limit - m_next.abs();
                let scale = if y.max_abs() > 0.0 && room > 0.0 {
                    (room / y.max_abs()).min(1.0)
                } else {
                    0.0
                };
                y.scale(scale);
            }
        }

        let tol = NEWTON_RTOL * (1.0 + f_next.max_abs());
        let lap_norm = 4.0 * (1.0 / (grid.hx() * grid.hx()) + 1.0 / (grid.hy() * grid.hy()));
        let mach_floor = |phi: &Field, mu: &Field| {
            f64::EPSILON
                * lap_norm
                * (NEWTON_MACH_SINGLE * (1.0 + mu.max_abs())
                    + NEWTON_MACH_CHAINED * lap_norm * phi.max_abs())
        };
        let mut phi = shifted(&y, m_next);
        let (mut residual, mut res_inf, mut res_merit, mut mu) =
            self.ch_residual(mode, &phi, &c_expl, beta, &b1)?;

        let mut iters = 0;
        'newton: while res_inf > tol + mach_floor(&phi, &mu) {
            if iters >= NEWTON_MAX_ITERS {
                return Err(SolveError::NewtonDiverged {
                    step: step_index,
                    iters,
                    residual: res_inf,
                });
            }
            iters += 1;

            // Jacobian diagonal part: G''(phi) (nonnegative by convexity).
            let d = convex_second_field(mode, &phi)?;
            let dbar = d.mean();
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
            let precond = |r: &Field| ops.precond_reduced(beta, dbar.max(0.0), r);

            let mut delta = Field::zeros(grid);
            let rhs = residual.map(|v| -v);
            let out = pcg(apply, precond, &rhs, &mut delta, STATE_CG_RTOL, 600);
            if !out.converged && out.rel_residual > 1e-6 {
                return Err(SolveError::LinearSolveFailure {
                    step: step_index,
                    rel_residual: out.rel_residual,
                });
            }
            delta.remove_mean();

            // Damped update: keep iterates interior (log mode) and require
            // decrease of the merit norm.
            let mut eta = 1.0_f64;
            loop {
                let y_try = y.lin_comb(1.0, eta, &delta);
                let phi_try = shifted(&y_try, m_next);
                if log_mode && phi_try.max_abs() >= 1.0 - INTERIOR_MARGIN {
                    eta *= 0.5;
                    if eta < 1e-12 {
                        // progress blocked at the rounding floor of the
                        // strong-form residual: accept
                        if res_inf <= 8.0 * (tol + mach_floor(&phi, &mu)) {
                            break 'newton;
                        }
                        return Err(SolveError::NewtonDiverged {
                            step: step_index,
                            iters,
                            residual: res_inf,
                        });
                    }
                    continue;
                }
                let (r_try, inf_try, merit_try, mu_try) =
                    self.ch_residual(mode, &phi_try, &c_expl, beta, &b1)?;
                let accepted = inf_try <= tol + mach_floor(&phi_try, &mu_try)
                    || merit_try <= (1.0 - 1e-4 * eta) * res_merit
                    || inf_try <= (1.0 - 1e-4 * eta) * res_inf;
                if accepted {
                    y = y_try;
                    phi = phi_try;
                    residual = r_try;
                    res_inf = inf_try;
                    res_merit = merit_try;
                    mu = mu_try;
                    break;
                }
                eta *= 0.5;
                if eta < 1e-12 {
                    if res_inf <= 8.0 * (tol + mach_floor(&phi, &mu)) {
                        break 'newton;
                    }
                    return Err(SolveError::NewtonDiverged {
                        step: step_index,
                        iters,
                        residual: res_inf,
                    });
                }
            }
        }

        if log_mode && phi.max_abs() >= 1.0 {
            return Err(SolveError::SeparationLoss {
                step: step_index,
                max_abs_phi: phi.max_abs(),
            });
        }
        Ok((phi, mu, iters))
    }

    /// Residual of the CH sub-step in both forms: returns the dual-space
    /// Newton residual `N(R - mean R)`, the strong-form infinity norm
    /// `|R|_inf`, the merit norm `|N R|_2`, and the chemical potential.
    #[allow(clippy::type_complexity)]
    fn ch_residual(
        &self,
        mode: &ConvexMode,
        phi: &Field,
        c_expl: &Field,
        beta: f64,
        b1: &Field,
    ) -> Result<(Field, f64, f64, Field), SolveError> {
        let mu = self.chemical_potential(mode, phi, c_expl)?;
        let lap_mu = self.ops.laplacian(&mu);
        let mut r = Field::zeros(self.grid());
        let (p, l, b) = (phi.values(), lap_mu.values(), b1.values());
        par::fill_indexed(r.values_mut(), |i| beta * p[i] - l[i] - b[i]);
        let res_inf = r.max_abs();
        let mut r_zm = r;
        r_zm.remove_mean();
        let r_dual = self.ops.inv_laplacian_unchecked(&r_zm);
        let merit = r_dual.norm_l2();
        Ok((r_dual, res_inf, merit, mu))
    }

    /// Linear thermal sub-step; returns `(w', v')`.
    fn thermal_substep(
        &self,
        phi_prev: &Field,
        phi_next: &Field,
        w_prev: &Field,
        v_prev: &Field,
        u_next: &Field,
    ) -> (Field, Field) {
        let grid = self.grid();
        let dt = self.tg.dt();
        let p = &self.params;
        let lap_w = self.ops.laplacian(w_prev);
        let mut rhs = Field::zeros(grid);
        {
            let (vp, up, lw, pp, pn) = (
                v_prev.values(),
                u_next.values(),
                lap_w.values(),
                phi_prev.values(),
                phi_next.values(),
            );
            let lam = p.lambda;
            par::fill_indexed(rhs.values_mut(), |i| {
                let dphi_dt = (pn[i] - pp[i]) / dt;
                vp[i] + dt * (up[i] - lam * dphi_dt) + dt * p.kappa2 * lw[i]
            });
        }
        let v_next = self
            .ops
            .helmholtz_solve(1.0, dt * (p.kappa1 + p.kappa2 * dt), &rhs);
        let w_next = w_prev.lin_comb(1.0, dt, &v_next);
        (w_next, v_next)
    }

    /// Full forward solve. `u` must be node-aligned; the implicit samples
    /// `u(t_{n+1})` drive the thermal equation. Checks the validatable
    /// assumptions first and refuses to run on violations.
    pub fn solve(&self, data: &ProblemData, u: &FieldSeries) -> Result<StateTrajectory, SolveError> {
        let report = validate_assumptions(&self.params, &self.concave, &self.mode, data, None, &self.tg);
        if !report.passed() {
            return Err(SolveError::Validation(report));
        }
        u.check_alignment(&self.tg)?;
        if self.mode.is_log_quench() && data.phi0.max_abs() >= 1.0 {
            return Err(SolveError::SeparationLoss {
                step: 0,
                max_abs_phi: data.phi0.max_abs(),
            });
        }

        let nt = self.tg.nt();
        let mut phi = Vec::with_capacity(nt + 1);
        let mut mu = Vec::with_capacity(nt + 1);
        let mut w = Vec::with_capacity(nt + 1);
        let mut v = Vec::with_capacity(nt + 1);
        let mut xi = Vec::with_capacity(nt + 1);
        let mut diagnostics = Vec::with_capacity(nt);

        // Node 0: data, with mu(0) from the constitutive relation.
        let mut c0 = Field::zeros(self.grid());
        {
            let concave = self.concave;
            let (p0, v0) = (data.phi0.values(), data.w1.values());
            let (a_coef, b_coef) = (self.params.a, self.params.b);
            par::fill_indexed(c0.values_mut(), |i| {
                concave.prime(p0[i]) + a_coef - b_coef * v0[i]
            });
        }
        let modes = self.mode_stages();
        let final_mode = *modes.last().expect("at least one stage");
        let mu0 = self.chemical_potential(&final_mode, &data.phi0, &c0)?;
        if !final_mode.is_log_quench() {
            xi.push(convex_prime_field(&final_mode, &data.phi0)?);
        }
        let mut current = StateAt {
            phi: data.phi0.clone(),
            mu: mu0.clone(),
            w: data.w0.clone(),
            v: data.w1.clone(),
            xi: None,
        };
        phi.push(data.phi0.clone());
        mu.push(mu0);
        w.push(data.w0.clone());
        v.push(data.w1.clone());

        for n in 0..nt {
            let f_next = data.f.at(n + 1);
            let u_next = u.at(n + 1);
            let mut warm = current.phi.clone();
            let mut next = None;
            let mut iters_total = 0;
            for stage_mode in &modes {
                let (stage_next, iters) =
                    self.step_with_mode(stage_mode, &current, &warm, f_next, u_next, n)?;
                iters_total += iters;
                warm = stage_next.phi.clone();
                next = Some(stage_next);
            }
            let next = next.expect("at least one stage");

            let mean_prev = current.phi.mean();
            let mean_next = next.phi.mean();
            let mass_residual = (mean_next - mean_prev) / self.tg.dt()
                + self.params.gamma * mean_next
                - f_next.mean();
            diagnostics.push(StepDiag {
                newton_iters: iters_total,
                min_phi: next.phi.min(),
                max_phi: next.phi.max(),
                mean_phi: mean_next,
                mass_residual,
            });

            phi.push(next.phi.clone());
            mu.push(next.mu.clone());
            w.push(next.w.clone());
            v.push(next.v.clone());
            if let Some(x) = &next.xi {
                xi.push(x.clone());
            }
            current = next;
        }

        let final_eps = match self.mode {
            ConvexMode::ObstaclePenalty { eps, .. } => Some(eps),
            ConvexMode::LogQuench { .. } => None,
        };
        Ok(StateTrajectory {
            phi: FieldSeries::new(phi),
            mu: FieldSeries::new(mu),
            w: FieldSeries::new(w),
            v: FieldSeries::new(v),
            xi: if final_eps.is_some() {
                Some(FieldSeries::new(xi))
            } else {
                None
            },
            diagnostics,
            final_eps,
        })
    }

    /// The sequence of convex modes each step runs through: the target mode
    /// alone in logarithmic mode, or the decreasing eps-continuation ending at
    /// the target eps in penalty mode.
    fn mode_stages(&self) -> Vec<ConvexMode> {
        match self.mode {
            ConvexMode::LogQuench { .. } => vec![self.mode],
            ConvexMode::ObstaclePenalty { alpha, eps } => {
                let mut stages: Vec<ConvexMode> = self
                    .eps_continuation
                    .iter()
                    .copied()
                    .filter(|&e| e > eps)
                    .map(|e| ConvexMode::ObstaclePenalty { alpha, eps: e })
                    .collect();
                stages.push(ConvexMode::ObstaclePenalty { alpha, eps });
                stages
            }
        }
    }
}

fn shifted(y: &Field, m: f64) -> Field {
    y.map(|v| v + m)
}

/// Evaluate `G'` cellwise; errors surface as the potential error of the first
/// offending cell.
pub fn convex_prime_field(mode: &ConvexMode, phi: &Field) -> Result<Field, SolveError> {
    eval_field(phi, |r| mode.prime(r))
}

/// Evaluate `G''` cellwise.
pub fn convex_second_field(mode: &ConvexMode, phi: &Field) -> Result<Field, SolveError> {
    eval_field(phi, |r| mode.second(r))
}

fn eval_field(
    phi: &Field,
    f: impl Fn(f64) -> Result<f64, PotentialError> + Sync,
) -> Result<Field, SolveError> {
    let mut out = Field::zeros(phi.grid());
    let p = phi.values();
    par::fill_indexed(out.values_mut(), |i| f(p[i]).unwrap_or(f64::NAN));
    if out.is_finite() {
        Ok(out)
    } else {
        // locate the first failure sequentially for a precise error
        for &r in p {
            if let Err(e) = f(r) {
                return Err(SolveError::Potential(e));
            }
        }
        Err(SolveError::Potential(PotentialError::DomainError {
            r: f64::NAN,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::laplacian_neumann;

    fn small_setup(nx: usize, nt: usize) -> (Arc<NeumannOps>, TimeGrid) {
        let grid = Grid::new(nx, nx, 1.0, 1.0).unwrap();
        (Arc::new(NeumannOps::new(grid)), TimeGrid::new(1.0, nt).unwrap())
    }

    fn default_params() -> PhysParams {
        PhysParams {
            gamma: 1.0,
            a: 0.1,
            b: 0.5,
            kappa1: 1.0,
            kappa2: 1.0,
            lambda: 0.2,
        }
    }

    fn zero_data(grid: Grid, tg: &TimeGrid) -> ProblemData {
        ProblemData {
            f: FieldSeries::zeros(grid, tg),
            phi0: Field::zeros(grid),
            w0: Field::zeros(grid),
            w1: Field::zeros(grid),
        }
    }

    #[test]
    fn validation_passes_on_zero_data_with_margin_one() {
        let (ops, tg) = small_setup(8, 4);
        let data = zero_data(ops.grid(), &tg);
        let report = validate_assumptions(
            &default_params(),
            &ConcavePart::default(),
            &ConvexMode::LogQuench { alpha: 0.5 },
            &data,
            None,
            &tg,
        );
        assert!(report.passed());
        assert_eq!(report.interior_margin, 1.0);
    }

    #[test]
    fn validation_flags_interior_violation() {
        // phi0 = 0.5, gamma = 1, |f| = 0.6 -> rho + (mean phi0)^+ = 1.1
        let (ops, tg) = small_setup(8, 4);
        let mut data = zero_data(ops.grid(), &tg);
        data.phi0 = Field::constant(ops.grid(), 0.5);
        data.f = FieldSeries::constant(ops.grid(), &tg, 0.6);
        let report = validate_assumptions(
            &default_params(),
            &ConcavePart::default(),
            &ConvexMode::LogQuench { alpha: 0.5 },
            &data,
            None,
            &tg,
        );
        assert!(!report.passed());
        assert!((report.interior_quantities[3] - 1.1).abs() < 1e-12);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::InteriorCondition { name, .. } if name.contains("rho +"))));
    }

    #[test]
    fn validation_flags_nonpositive_constant() {
        let (ops, tg) = small_setup(8, 4);
        let data = zero_data(ops.grid(), &tg);
        let mut params = default_params();
        params.gamma = -1.0;
        let report = validate_assumptions(
            &params,
            &ConcavePart::default(),
            &ConvexMode::LogQuench { alpha: 0.5 },
            &data,
            None,
            &tg,
        );
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::NonPositiveConstant { name: "gamma", .. })));
    }

    #[test]
    fn zero_data_is_a_fixed_point_when_a_is_zero() {
        // step() does not re-validate, so a = 0 can exercise the exact fixed
        // point h'(0) = F'(0) = 0.
        let (ops, tg) = small_setup(8, 6);
        let mut params = default_params();
        params.a = 0.0;
        let solver = StateSolver::new(
            ops.clone(),
            tg,
            params,
            ConcavePart::default(),
            ConvexMode::LogQuench { alpha: 0.5 },
        );
        let grid = ops.grid();
        let zero = Field::zeros(grid);
        let mut state = StateAt {
            phi: zero.clone(),
            mu: zero.clone(),
            w: zero.clone(),
            v: zero.clone(),
            xi: None,
        };
        for n in 0..tg.nt() {
            let (next, _) = solver.step(&state, &zero, &zero, n).unwrap();
            assert!(next.phi.max_abs() < 1e-13, "phi nonzero after step {n}");
            assert!(next.w.max_abs() < 1e-13);
            assert!(next.v.max_abs() < 1e-13);
            state = next;
        }
    }

    #[test]
    fn constant_data_follows_scalar_recurrence() {
        let (ops, tg) = small_setup(8, 10);
        let params = default_params();
        let solver = StateSolver::new(
            ops.clone(),
            tg,
            params,
            ConcavePart::default(),
            ConvexMode::LogQuench { alpha: 0.5 },
        );
        let fbar = 0.25;
        let m0 = 0.3;
        let data = ProblemData {
            f: FieldSeries::constant(ops.grid(), &tg, fbar),
            phi0: Field::constant(ops.grid(), m0),
            w0: Field::zeros(ops.grid()),
            w1: Field::zeros(ops.grid()),
        };
        let u = FieldSeries::zeros(ops.grid(), &tg);
        let traj = solver.solve(&data, &u).unwrap();
        let dt = tg.dt();
        let mut m = m0;
        for n in 1..=tg.nt() {
            m = (m + dt * fbar) / (1.0 + params.gamma * dt);
            let phi_n = traj.phi.at(n);
            // spatially constant and equal to the scalar recurrence
            assert!((phi_n.mean() - m).abs() < 1e-12, "node {n}");
            assert!((phi_n.max() - phi_n.min()).abs() < 1e-10, "node {n} not constant");
            assert!((phi_n.mean() - phi_n.max()).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_decays_like_closed_form_without_forcing() {
        // gamma = 1, fbar = 0: mbar^n = m0 / (1 + dt)^n
        let (ops, tg) = small_setup(8, 16);
        let solver = StateSolver::new(
            ops.clone(),
            tg,
            default_params(),
            ConcavePart::default(),
            ConvexMode::LogQuench { alpha: 0.5 },
        );
        let mut data = zero_data(ops.grid(), &tg);
        data.phi0 = Field::constant(ops.grid(), 0.5);
        let u = FieldSeries::zeros(ops.grid(), &tg);
        let traj = solver.solve(&data, &u).unwrap();
        let dt = tg.dt();
        for n in 0..=tg.nt() {
            let expect = 0.5 / (1.0 + dt).powi(n as i32);
            assert!(
                (traj.phi.at(n).mean() - expect).abs() < 1e-12,
                "node {n}: {} vs {expect}",
                traj.phi.at(n).mean()
            );
        }
    }

    #[test]
    fn mass_balance_residual_is_exact_on_wavy_data() {
        let (ops, tg) = small_setup(16, 12);
        let grid = ops.grid();
        let solver = StateSolver::new(
            ops,
            tg,
            default_params(),
            ConcavePart::default(),
            ConvexMode::LogQuench { alpha: 0.25 },
        );
        let data = ProblemData {
            f: FieldSeries::from_fn(grid, &tg, |x, y, t| {
                0.3 * (2.0 * x + t).sin() * (1.5 * y).cos()
            }),
            phi0: Field::from_fn(grid, |x, y| {
                0.5 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos()
            }),
            w0: Field::from_fn(grid, |x, _| 0.1 * x),
            w1: Field::zeros(grid),
        };
        let u = FieldSeries::from_fn(grid, &tg, |x, _, t| 0.2 * (x + t).cos());
        let traj = solver.solve(&data, &u).unwrap();
        for (n, d) in traj.diagnostics.iter().enumerate() {
            assert!(
                d.mass_residual.abs() < 1e-12,
                "step {n}: mass residual {:e}",
                d.mass_residual
            );
        }
    }

    #[test]
    fn single_step_matches_dense_newton_oracle() {
        use nalgebra::{DMatrix, DVector};

        let grid = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let ops = Arc::new(NeumannOps::new(grid));
        let tg = TimeGrid::new(0.1, 1).unwrap();
        let params = default_params();
        let concave = ConcavePart::default();
        let alpha = 0.5;
        let mode = ConvexMode::LogQuench { alpha };
        let solver = StateSolver::new(ops.clone(), tg, params, concave, mode);

        let phi_prev = Field::from_fn(grid, |x, y| 0.3 * (3.0 * x).sin() * (2.0 * y).cos());
        let v_prev = Field::from_fn(grid, |x, y| 0.2 * (x + y));
        let w_prev = Field::zeros(grid);
        let f_next = Field::from_fn(grid, |x, y| 0.4 * (x * y).cos());
        let u_next = Field::zeros(grid);
        let prev = StateAt {
            phi: phi_prev.clone(),
            mu: Field::zeros(grid),
            w: w_prev,
            v: v_prev.clone(),
            xi: None,
        };
        let (next, _) = solver.step(&prev, &f_next, &u_next, 0).unwrap();

        // dense oracle: assemble -lap as a matrix, Newton with LU solves
        let n = grid.len();
        let mut m_dense = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            let mut e = Field::zeros(grid);
            e.values_mut()[k] = 1.0;
            let lap = laplacian_neumann(&e);
            for i in 0..n {
                m_dense[(i, k)] = -lap.values()[i];
            }
        }
        let dt = tg.dt();
        let beta = 1.0 / dt + params.gamma;
        let c_expl: Vec<f64> = (0..n)
            .map(|i| concave.prime(phi_prev.values()[i]) + params.a - params.b * v_prev.values()[i])
            .collect();
        let b1: Vec<f64> = (0..n)
            .map(|i| phi_prev.values()[i] / dt + f_next.values()[i])
            .collect();
        let mut x = DVector::from_column_slice(phi_prev.values());
        for _ in 0..60 {
            let gp: Vec<f64> = x.iter().map(|&r| alpha * ((1.0 + r) / (1.0 - r)).ln()).collect();
            let mu: DVector<f64> = &m_dense * &x
                + DVector::from_vec(gp.iter().zip(&c_expl).map(|(g, c)| g + c).collect::<Vec<_>>());
            let r: DVector<f64> = beta * &x + &m_dense * mu - DVector::from_column_slice(&b1);
            if r.amax() < 1e-13 {
                break;
            }
            let dsec: Vec<f64> = x.iter().map(|&v| alpha * 2.0 / (1.0 - v * v)).collect();
            let mut jac = DMatrix::<f64>::zeros(n, n);
            for col in 0..n {
                for row in 0..n {
                    let diag = if row == col { beta } else { 0.0 };
                    jac[(row, col)] = diag
                        + (0..n).map(|k| m_dense[(row, k)] * m_dense[(k, col)]).sum::<f64>()
                        + m_dense[(row, col)] * dsec[col];
                }
            }
            let delta = jac.lu().solve(&(-r)).expect("dense jacobian invertible");
            x += delta;
        }
        for i in 0..n {
            assert!(
                (next.phi.values()[i] - x[i]).abs() < 1e-9,
                "cell {i}: {} vs {}",
                next.phi.values()[i],
                x[i]
            );
        }
    }

    #[test]
    fn obstacle_mode_reports_xi_and_final_eps() {
        let (ops, tg) = small_setup(8, 4);
        let grid = ops.grid();
        let solver = StateSolver::new(
            ops,
            tg,
            default_params(),
            ConcavePart::default(),
            ConvexMode::ObstaclePenalty { alpha: 0.0, eps: 1e-4 },
        );
        let data = ProblemData {
            f: FieldSeries::constant(grid, &tg, 0.2),
            phi0: Field::from_fn(grid, |x, _| 0.9 * (2.0 * std::f64::consts::PI * x).cos()),
            w0: Field::zeros(grid),
            w1: Field::zeros(grid),
        };
        let u = FieldSeries::zeros(grid, &tg);
        let traj = solver.solve(&data, &u).unwrap();
        assert_eq!(traj.final_eps, Some(1e-4));
        let xi = traj.xi.as_ref().expect("xi reported in obstacle mode");
        assert_eq!(xi.len(), tg.n_nodes());
        // mass balance must hold in penalty mode too
        for d in &traj.diagnostics {
            assert!(d.mass_residual.abs() < 1e-12);
        }
    }

    #[test]
    fn log_mode_stays_strictly_separated() {
        let (ops, tg) = small_setup(16, 10);
        let grid = ops.grid();
        let solver = StateSolver::new(
            ops,
            tg,
            default_params(),
            ConcavePart::default(),
            ConvexMode::LogQuench { alpha: 0.05 },
        );
        let data = ProblemData {
            f: FieldSeries::constant(grid, &tg, 0.3),
            phi0: Field::from_fn(grid, |x, y| {
                0.92 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos()
            }),
            w0: Field::zeros(grid),
            w1: Field::zeros(grid),
        };
        let u = FieldSeries::constant(grid, &tg, 0.1);
        let traj = solver.solve(&data, &u).unwrap();
        let (lo, hi) = traj.separation_report();
        assert!(lo > -1.0 && hi < 1.0, "separation bounds ({lo}, {hi})");
    }
}
