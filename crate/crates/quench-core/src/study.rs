//! Quench-schedule drivers: state convergence rates along a decreasing
//! `alpha` schedule, and control continuation toward an anchor control.
//!
//! The state study solves the forward problem at every schedule level for one
//! fixed admissible control and measures, for consecutive pairs
//! `alpha1 < alpha2`, the combined error
//! `max_n |phi1 - phi2|_*(t_n) + |phi1 - phi2|_{L2(0,T;V)}`
//! `+ |w1 - w2|_{H1(0,T;H)} + max_n |w1 - w2|_V(t_n)`,
//! then fits `log10 E` against `log10 (alpha2 - alpha1)`. A geometric
//! schedule makes power-law behavior show up as a clean line; the expected
//! slope sits between 1/2 (the proven upper-bound rate) and 1 (smooth
//! dependence on `alpha`).
//!
//! The continuation driver solves the adapted problems down the schedule with
//! warm starts and reports distances and adapted-cost gaps against the
//! anchor, which is either the plain solution at the smallest `alpha` or a
//! penalized-obstacle solve (both disclosed in the report).

use std::sync::Arc;

use thiserror::Error;

use crate::adjoint::{AdjointSolver, CostSpec};
use crate::control::{
    control_distance, eval_adapted_cost, eval_cost, optimize, BoxBounds, ControlError,
    OptimizeOutcome, OptimizerConfig, StopReason,
};
use crate::grid::{FieldSeries, TimeGrid};
use crate::linalg::fit_line;
use crate::potential::{ConcavePart, ConvexMode};
use crate::spectral::NeumannOps;
use crate::state::{PhysParams, ProblemData, SolveError, StateSolver, StateTrajectory};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("quench schedule must be strictly decreasing inside (0, 1], got {0:?}")]
    BadSchedule(Vec<f64>),
    #[error("state rate study needs at least {needed} schedule levels, got {got}")]
    ScheduleTooShort { needed: usize, got: usize },
    #[error("solver failed at alpha = {alpha}: {source}")]
    SolveAt {
        alpha: f64,
        #[source]
        source: SolveError,
    },
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Strictly decreasing `alpha` levels in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct QuenchSchedule {
    alphas: Vec<f64>,
}

impl QuenchSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self, StudyError> {
        let ok = !alphas.is_empty()
            && alphas.iter().all(|&a| a > 0.0 && a <= 1.0)
            && alphas.windows(2).all(|w| w[1] < w[0]);
        if ok {
            Ok(Self { alphas })
        } else {
            Err(StudyError::BadSchedule(alphas))
        }
    }

    /// Geometric schedule `alpha0 * 2^{-k}`, `k = 0..levels`.
    pub fn geometric(alpha0: f64, levels: usize) -> Result<Self, StudyError> {
        Self::new((0..levels).map(|k| alpha0 * 0.5_f64.powi(k as i32)).collect())
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
    pub fn len(&self) -> usize {
        self.alphas.len()
    }
    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
    pub fn smallest(&self) -> f64 {
        *self.alphas.last().expect("nonempty schedule")
    }
}

/// Error of one consecutive pair, split by variable group.
#[derive(Debug, Clone, Copy)]
pub struct PairError {
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// `max_n |phi_diff|_* + |phi_diff|_{L2(0,T;V)}`
    pub err_phi: f64,
    /// `|w_diff|_{H1(0,T;H)} + max_n |w_diff|_V`
    pub err_w: f64,
    pub err_total: f64,
}

/// Separation bounds observed at one schedule level.
#[derive(Debug, Clone, Copy)]
pub struct SeparationRow {
    pub alpha: f64,
    pub r_low: f64,
    pub r_high: f64,
    /// `1 - max(|r_low|, r_high)`, positive iff strictly separated.
    pub margin: f64,
}

/// Log-log regression summary of a rate study.
#[derive(Debug, Clone)]
pub struct RateReport {
    pub pairs: Vec<PairError>,
    /// Slope/intercept/rms-residual of `log10 err_total` vs `log10 dalpha`.
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    /// Same fit restricted to the `w` error component.
    pub slope_w: f64,
    pub residual_rms_w: f64,
    pub separations: Vec<SeparationRow>,
    /// Errors against a disclosed penalized-obstacle reference:
    /// `(alpha, err_total, final_eps)`.
    pub obstacle_reference: Vec<(f64, f64, f64)>,
}

/// Difference of two trajectories in the norms of the rate bound.
pub fn pair_error(
    ops: &NeumannOps,
    tg: &TimeGrid,
    a: &StateTrajectory,
    b: &StateTrajectory,
) -> (f64, f64) {
    let nt = tg.nt();
    let mut max_dual = 0.0_f64;
    let mut l2v_sq = 0.0_f64;
    let mut h1h_sq = 0.0_f64;
    let mut max_v_norm = 0.0_f64;
    for n in 0..=nt {
        let dphi = a.phi.at(n).sub(b.phi.at(n));
        max_dual = max_dual.max(ops.dual_norm(&dphi));
        l2v_sq += tg.trapezoid_weight(n) * dphi.h1_norm_sq();
        let dw = a.w.at(n).sub(b.w.at(n));
        let dv = a.v.at(n).sub(b.v.at(n));
        h1h_sq += tg.trapezoid_weight(n) * (dw.inner(&dw) + dv.inner(&dv));
        max_v_norm = max_v_norm.max(dw.h1_norm_sq().max(0.0).sqrt());
    }
    let err_phi = max_dual + l2v_sq.max(0.0).sqrt();
    let err_w = h1h_sq.max(0.0).sqrt() + max_v_norm;
    (err_phi, err_w)
}

/// Inputs shared by both studies.
pub struct StudyProblem {
    pub ops: Arc<NeumannOps>,
    pub tg: TimeGrid,
    pub params: PhysParams,
    pub concave: ConcavePart,
    pub data: ProblemData,
    /// Penalization level of the obstacle reference solve.
    pub obstacle_eps: f64,
}

impl StudyProblem {
    fn solver(&self, mode: ConvexMode) -> StateSolver {
        StateSolver::new(self.ops.clone(), self.tg, self.params, self.concave, mode)
    }

    fn adjoint(&self, mode: ConvexMode) -> AdjointSolver {
        AdjointSolver::new(self.ops.clone(), self.tg, &self.params, self.concave, mode)
    }

    fn solve_at(&self, mode: ConvexMode, u: &FieldSeries) -> Result<StateTrajectory, StudyError> {
        self.solver(mode).solve(&self.data, u).map_err(|source| {
            StudyError::SolveAt {
                alpha: mode.alpha(),
                source,
            }
        })
    }
}

/// Solve the state at every schedule level for a fixed control and fit the
/// consecutive-pair errors. Levels solve independently (in parallel under the
/// `parallel` feature); the regression needs at least 4 levels.
pub fn state_rate_study(
    problem: &StudyProblem,
    u: &FieldSeries,
    schedule: &QuenchSchedule,
) -> Result<RateReport, StudyError> {
    if schedule.len() < 4 {
        return Err(StudyError::ScheduleTooShort {
            needed: 4,
            got: schedule.len(),
        });
    }
    let alphas = schedule.alphas();
    let solve_level =
        |&alpha: &f64| problem.solve_at(ConvexMode::LogQuench { alpha }, u);
    let solutions: Vec<Result<StateTrajectory, StudyError>>;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        solutions = alphas.par_iter().map(solve_level).collect();
    }
    #[cfg(not(feature = "parallel"))]
    {
        solutions = alphas.iter().map(solve_level).collect();
    }
    let mut trajectories = Vec::with_capacity(alphas.len());
    for s in solutions {
        trajectories.push(s?);
    }

    let mut pairs = Vec::new();
    for k in 0..alphas.len() - 1 {
        // alpha_{k+1} < alpha_k: low = k+1, high = k
        let (err_phi, err_w) =
            pair_error(&problem.ops, &problem.tg, &trajectories[k + 1], &trajectories[k]);
        pairs.push(PairError {
            alpha_low: alphas[k + 1],
            alpha_high: alphas[k],
            err_phi,
            err_w,
            err_total: err_phi + err_w,
        });
    }

    let xs: Vec<f64> = pairs
        .iter()
        .map(|p| (p.alpha_high - p.alpha_low).log10())
        .collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.err_total.log10()).collect();
    let (slope, intercept, residual_rms) = fit_line(&xs, &ys);
    let ys_w: Vec<f64> = pairs.iter().map(|p| p.err_w.log10()).collect();
    let (slope_w, _, residual_rms_w) = fit_line(&xs, &ys_w);

    let separations = alphas
        .iter()
        .zip(&trajectories)
        .map(|(&alpha, t)| {
            let (r_low, r_high) = t.separation_report();
            SeparationRow {
                alpha,
                r_low,
                r_high,
                margin: 1.0 - r_low.abs().max(r_high.abs()),
            }
        })
        .collect();

    // disclosed reference: penalized obstacle solve at the configured eps
    let obstacle_mode = ConvexMode::ObstaclePenalty {
        alpha: 0.0,
        eps: problem.obstacle_eps,
    };
    let reference = problem.solve_at(obstacle_mode, u)?;
    let obstacle_reference = alphas
        .iter()
        .zip(&trajectories)
        .map(|(&alpha, t)| {
            let (ephi, ew) = pair_error(&problem.ops, &problem.tg, t, &reference);
            (alpha, ephi + ew, problem.obstacle_eps)
        })
        .collect();

    Ok(RateReport {
        pairs,
        slope,
        intercept,
        residual_rms,
        slope_w,
        residual_rms_w,
        separations,
        obstacle_reference,
    })
}

/// Initial control for a schedule level: the previous level's solution
/// re-projected onto the box (the identity when bounds are unchanged), or
/// `project(0)` at the first level.
pub fn warm_start(previous: Option<&FieldSeries>, bounds: &BoxBounds, grid: crate::grid::Grid, tg: &TimeGrid) -> FieldSeries {
    match previous {
        Some(u) => bounds.project(u),
        None => bounds.project(&FieldSeries::zeros(grid, tg)),
    }
}

/// How the continuation anchor is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorKind {
    /// Plain (non-adapted) solve at the smallest schedule alpha.
    SmallestAlpha,
    /// Penalized-obstacle solve at the study's `obstacle_eps`.
    Obstacle,
}

/// Per-level continuation record.
#[derive(Debug, Clone, Copy)]
pub struct ContinuationRow {
    pub alpha: f64,
    /// `|u_alpha - u_anchor|_{L2(Q)}`
    pub distance: f64,
    /// Adapted cost at this level's solution.
    pub adapted_cost: f64,
    /// `|adapted_cost - anchor_cost|`
    pub cost_gap: f64,
    pub pg_iterations: usize,
    pub stalled: bool,
}

/// Continuation outcome: anchor description plus per-level rows.
pub struct ContinuationReport {
    pub anchor_kind: AnchorKind,
    /// Cost `J(S(u*), u*)` of the anchor pair under its own dynamics.
    pub anchor_cost: f64,
    pub anchor: FieldSeries,
    pub rows: Vec<ContinuationRow>,
    /// Final-level optimal control (smallest alpha).
    pub final_control: FieldSeries,
}

/// Solve the adapted problems down the schedule with warm starts.
///
/// The anchor is computed first: either the plain problem at the smallest
/// alpha (itself warm-started down the schedule) or the penalized-obstacle
/// problem. Per-level optimizer failures abort only that level's refinement;
/// a stalled line search still reports its best iterate.
pub fn control_continuation(
    problem: &StudyProblem,
    cost: &CostSpec,
    bounds: &BoxBounds,
    config: &OptimizerConfig,
    schedule: &QuenchSchedule,
    anchor_kind: AnchorKind,
) -> Result<ContinuationReport, StudyError> {
    let tg = problem.tg;
    let grid = problem.ops.grid();

    // anchor
    let (anchor, anchor_cost) = match anchor_kind {
        AnchorKind::Obstacle => {
            let mode = ConvexMode::ObstaclePenalty {
                alpha: 0.0,
                eps: problem.obstacle_eps,
            };
            let out = optimize(
                &problem.solver(mode),
                &problem.adjoint(mode),
                &problem.data,
                cost,
                bounds,
                config,
                None,
                None,
            )?;
            let j = eval_cost(&out.state, &out.u, cost, &tg)?;
            (out.u, j)
        }
        AnchorKind::SmallestAlpha => {
            // plain continuation down the schedule for a good warm start
            let mut prev: Option<FieldSeries> = None;
            let mut last: Option<OptimizeOutcome> = None;
            for &alpha in schedule.alphas() {
                let mode = ConvexMode::LogQuench { alpha };
                let u0 = warm_start(prev.as_ref(), bounds, grid, &tg);
                let out = optimize(
                    &problem.solver(mode),
                    &problem.adjoint(mode),
                    &problem.data,
                    cost,
                    bounds,
                    config,
                    None,
                    Some(u0),
                )?;
                prev = Some(out.u.clone());
                last = Some(out);
            }
            let out = last.expect("schedule nonempty");
            let j = eval_cost(&out.state, &out.u, cost, &tg)?;
            (out.u, j)
        }
    };

    // adapted problems down the schedule
    let mut rows = Vec::with_capacity(schedule.len());
    let mut prev: Option<FieldSeries> = None;
    let mut final_control = anchor.clone();
    for &alpha in schedule.alphas() {
        let mode = ConvexMode::LogQuench { alpha };
        let u0 = warm_start(prev.as_ref(), bounds, grid, &tg);
        let out = optimize(
            &problem.solver(mode),
            &problem.adjoint(mode),
            &problem.data,
            cost,
            bounds,
            config,
            Some(&anchor),
            Some(u0),
        )?;
        let adapted_cost = eval_adapted_cost(&out.state, &out.u, cost, Some(&anchor), &tg)?;
        rows.push(ContinuationRow {
            alpha,
            distance: control_distance(&out.u, &anchor, &tg),
            adapted_cost,
            cost_gap: (adapted_cost - anchor_cost).abs(),
            pg_iterations: out.history.len().saturating_sub(1),
            stalled: out.stop == StopReason::LineSearchStall,
        });
        prev = Some(out.u.clone());
        final_control = out.u;
    }

    Ok(ContinuationReport {
        anchor_kind,
        anchor_cost,
        anchor,
        rows,
        final_control,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, Grid};

    fn problem(nx: usize, nt: usize) -> StudyProblem {
        let grid = Grid::new(nx, nx, 1.0, 1.0).unwrap();
        let ops = Arc::new(NeumannOps::new(grid));
        let tg = TimeGrid::new(0.5, nt).unwrap();
        let data = ProblemData {
            f: FieldSeries::constant(grid, &tg, 0.3),
            phi0: Field::from_fn(grid, |x, y| {
                0.9 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos()
            }),
            w0: Field::zeros(grid),
            w1: Field::zeros(grid),
        };
        StudyProblem {
            ops,
            tg,
            params: PhysParams {
                gamma: 1.0,
                a: 0.1,
                b: 0.5,
                kappa1: 1.0,
                kappa2: 1.0,
                lambda: 0.2,
            },
            concave: ConcavePart::default(),
            data,
            obstacle_eps: 1e-4,
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(QuenchSchedule::new(vec![0.1, 0.05, 0.025]).is_ok());
        assert!(QuenchSchedule::new(vec![0.05, 0.1]).is_err());
        assert!(QuenchSchedule::new(vec![0.1, 0.1]).is_err());
        assert!(QuenchSchedule::new(vec![1.5, 0.1]).is_err());
        assert!(QuenchSchedule::new(vec![]).is_err());
        let g = QuenchSchedule::geometric(0.1, 4).unwrap();
        assert_eq!(g.alphas(), &[0.1, 0.05, 0.025, 0.0125]);
        assert_eq!(g.smallest(), 0.0125);
    }

    #[test]
    fn identical_trajectories_have_zero_pair_error() {
        let p = problem(8, 4);
        let u = FieldSeries::zeros(p.ops.grid(), &p.tg);
        let t = p.solve_at(ConvexMode::LogQuench { alpha: 0.1 }, &u).unwrap();
        let (ephi, ew) = pair_error(&p.ops, &p.tg, &t, &t);
        assert_eq!(ephi, 0.0);
        assert_eq!(ew, 0.0);
    }

    #[test]
    fn rate_study_requires_four_levels() {
        let p = problem(8, 4);
        let u = FieldSeries::zeros(p.ops.grid(), &p.tg);
        let s = QuenchSchedule::new(vec![0.1, 0.05]).unwrap();
        assert!(matches!(
            state_rate_study(&p, &u, &s),
            Err(StudyError::ScheduleTooShort { .. })
        ));
    }

    #[test]
    fn small_rate_study_has_positive_errors_and_separation() {
        let p = problem(12, 8);
        let u = FieldSeries::constant(p.ops.grid(), &p.tg, 0.2);
        let s = QuenchSchedule::geometric(0.1, 4).unwrap();
        let report = state_rate_study(&p, &u, &s).unwrap();
        assert_eq!(report.pairs.len(), 3);
        for pair in &report.pairs {
            assert!(pair.err_total > 0.0, "degenerate pair {pair:?}");
        }
        for row in &report.separations {
            assert!(row.margin > 0.0, "no separation margin at alpha {}", row.alpha);
        }
        assert_eq!(report.obstacle_reference.len(), 4);
        assert!(report.slope.is_finite());
    }

    #[test]
    fn warm_start_behaviour() {
        let grid = Grid::new(6, 6, 1.0, 1.0).unwrap();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let bounds = BoxBounds::constant(-1.0, 1.0);
        // feasible control passes through unchanged
        let u = FieldSeries::constant(grid, &tg, 0.5);
        let w = warm_start(Some(&u), &bounds, grid, &tg);
        assert_eq!(w.at(0).values(), u.at(0).values());
        // first level: projection of zero
        let w0 = warm_start(None, &bounds, grid, &tg);
        assert_eq!(w0.max_abs(), 0.0);
        // bounds-violating input gets clamped
        let bad = FieldSeries::constant(grid, &tg, 3.0);
        let wb = warm_start(Some(&bad), &bounds, grid, &tg);
        assert_eq!(wb.at(1).max(), 1.0);
    }

    #[test]
    fn continuation_with_single_level_and_self_anchor_has_zero_distance() {
        let p = problem(8, 4);
        let cost = CostSpec::with_zero_targets(p.ops.grid(), &p.tg, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.1);
        let bounds = BoxBounds::constant(-1.0, 1.0);
        let config = OptimizerConfig {
            max_iters: 150,
            stat_tol: 1e-6,
            ..OptimizerConfig::default()
        };
        let s = QuenchSchedule::new(vec![0.05]).unwrap();
        let report = control_continuation(&p, &cost, &bounds, &config, &s, AnchorKind::SmallestAlpha).unwrap();
        assert_eq!(report.rows.len(), 1);
        // the adapted problem at the anchor's own alpha returns the anchor
        assert!(
            report.rows[0].distance < 1e-4,
            "distance {:e}",
            report.rows[0].distance
        );
    }
}
