//! Cost evaluation, reduced gradients, box projection, and projected-gradient
//! descent with Armijo backtracking.
//!
//! The reduced L2(Q) gradient of the (adapted) cost at a control `u` is
//! `g = r + nu u (+ (u - u_anchor))`, where `r` is the third adjoint variable.
//! Descent iterates `u+ = project(u - tau g)`; a step is accepted when the
//! cost decrease reaches `armijo_c (<g, u - u+> + |u - u+|^2 / (2 tau))`, and
//! the iteration stops once the fixed-point residual
//! `|u - project(u - g)|_inf` falls under the stationarity tolerance.
//! Stationarity certificates (clamp identity for `nu > 0`, sampled
//! variational-inequality values) are evaluated on the returned triple.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adjoint::{AdjointError, AdjointSolver, AdjointTrajectory, CostSpec};
use crate::grid::{Field, FieldSeries, GridError, TimeGrid};
use crate::par;
use crate::state::{SolveError, StateSolver, StateTrajectory};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("adapted cost requires an anchor control")]
    MissingAnchor,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
}

/// Box bounds for the control, constant or node-varying.
#[derive(Debug, Clone)]
pub enum Bound {
    Constant(f64),
    Varying(FieldSeries),
}

impl Bound {
    fn value(&self, n: usize, i: usize) -> f64 {
        match self {
            Bound::Constant(c) => *c,
            Bound::Varying(s) => s.at(n).values()[i],
        }
    }
}

/// Admissible set `{ u : u_min <= u <= u_max }`.
#[derive(Debug, Clone)]
pub struct BoxBounds {
    pub lo: Bound,
    pub hi: Bound,
}

impl BoxBounds {
    pub fn constant(lo: f64, hi: f64) -> Self {
        Self {
            lo: Bound::Constant(lo),
            hi: Bound::Constant(hi),
        }
    }

    /// Largest `u_min - u_max` over all nodes and cells (positive means the
    /// ordering is violated somewhere).
    pub fn max_ordering_violation(&self, tg: &TimeGrid) -> f64 {
        match (&self.lo, &self.hi) {
            (Bound::Constant(l), Bound::Constant(h)) => l - h,
            _ => {
                let mut worst = f64::NEG_INFINITY;
                for n in 0..tg.n_nodes() {
                    match (&self.lo, &self.hi) {
                        (Bound::Constant(l), Bound::Varying(h)) => {
                            worst = worst.max(l - h.at(n).min());
                        }
                        (Bound::Varying(l), Bound::Constant(h)) => {
                            worst = worst.max(l.at(n).max() - h);
                        }
                        (Bound::Varying(l), Bound::Varying(h)) => {
                            let lm = l.at(n).values();
                            let hm = h.at(n).values();
                            worst = worst
                                .max(par::det_max_indexed(lm.len(), |i| lm[i] - hm[i]));
                        }
                        (Bound::Constant(_), Bound::Constant(_)) => unreachable!(),
                    }
                }
                worst
            }
        }
    }

    /// Pointwise clamp of a whole series (lower bound wins exact ties).
    pub fn project(&self, u: &FieldSeries) -> FieldSeries {
        let fields = u
            .fields()
            .iter()
            .enumerate()
            .map(|(n, f)| {
                let mut out = f.clone();
                let lo = &self.lo;
                let hi = &self.hi;
                let src = f.values().to_vec();
                par::fill_indexed(out.values_mut(), |i| {
                    let x = src[i];
                    let l = lo.value(n, i);
                    let h = hi.value(n, i);
                    if x < l {
                        l
                    } else if x > h {
                        h
                    } else {
                        x
                    }
                });
                out
            })
            .collect();
        FieldSeries::new(fields)
    }

    /// Whether `u` satisfies the bounds everywhere (no tolerance).
    pub fn contains(&self, u: &FieldSeries) -> bool {
        u.fields().iter().enumerate().all(|(n, f)| {
            let v = f.values();
            (0..v.len()).all(|i| v[i] >= self.lo.value(n, i) && v[i] <= self.hi.value(n, i))
        })
    }

    /// Uniform random admissible control (used by the variational-inequality
    /// certificate sampling).
    pub fn sample_admissible(
        &self,
        template: &FieldSeries,
        rng: &mut ChaCha8Rng,
    ) -> FieldSeries {
        let fields = template
            .fields()
            .iter()
            .enumerate()
            .map(|(n, f)| {
                let mut out = Field::zeros(f.grid());
                for (i, v) in out.values_mut().iter_mut().enumerate() {
                    let l = self.lo.value(n, i);
                    let h = self.hi.value(n, i);
                    *v = if h > l { rng.gen_range(l..=h) } else { l };
                }
                out
            })
            .collect();
        FieldSeries::new(fields)
    }
}

/// Evaluate the full tracking cost
/// `sum_i beta_i/2 * (distributed or terminal misfits) + nu/2 |u|^2_{L2(Q)}`
/// with trapezoid time quadrature; `dw/dt` is the trajectory's `v`.
pub fn eval_cost(
    state: &StateTrajectory,
    u: &FieldSeries,
    cost: &CostSpec,
    tg: &TimeGrid,
) -> Result<f64, ControlError> {
    state.phi.check_alignment(tg)?;
    u.check_alignment(tg)?;
    cost.check_alignment(tg)?;
    let nt = tg.nt();
    let [b1, b2, b3, b4, b5, b6] = cost.beta;
    let mut total = 0.0;

    if b1 > 0.0 {
        let mut acc = 0.0;
        for n in 0..=nt {
            let d = state.phi.at(n).sub(cost.phi_q.at(n));
            acc += tg.trapezoid_weight(n) * d.inner(&d);
        }
        total += 0.5 * b1 * acc;
    }
    if b2 > 0.0 {
        let d = state.phi.at(nt).sub(&cost.phi_omega);
        total += 0.5 * b2 * d.inner(&d);
    }
    if b3 > 0.0 {
        let mut acc = 0.0;
        for n in 0..=nt {
            let d = state.w.at(n).sub(cost.w_q.at(n));
            acc += tg.trapezoid_weight(n) * d.inner(&d);
        }
        total += 0.5 * b3 * acc;
    }
    if b4 > 0.0 {
        let d = state.w.at(nt).sub(&cost.w_omega);
        total += 0.5 * b4 * d.inner(&d);
    }
    if b5 > 0.0 {
        let mut acc = 0.0;
        for n in 0..=nt {
            let d = state.v.at(n).sub(cost.wprime_q.at(n));
            acc += tg.trapezoid_weight(n) * d.inner(&d);
        }
        total += 0.5 * b5 * acc;
    }
    if b6 > 0.0 {
        let d = state.v.at(nt).sub(&cost.wprime_omega);
        total += 0.5 * b6 * d.inner(&d);
    }
    if cost.nu > 0.0 {
        total += 0.5 * cost.nu * u.l2q_norm_sq(tg);
    }
    Ok(total)
}

/// `eval_cost` plus half the squared L2(Q) distance to the anchor.
pub fn eval_adapted_cost(
    state: &StateTrajectory,
    u: &FieldSeries,
    cost: &CostSpec,
    anchor: Option<&FieldSeries>,
    tg: &TimeGrid,
) -> Result<f64, ControlError> {
    let base = eval_cost(state, u, cost, tg)?;
    match anchor {
        None => Ok(base),
        Some(a) => {
            let mut acc = 0.0;
            for n in 0..=tg.nt() {
                let d = u.at(n).sub(a.at(n));
                acc += tg.trapezoid_weight(n) * d.inner(&d);
            }
            Ok(base + 0.5 * acc)
        }
    }
}

/// Reduced L2(Q) gradient `g = r + nu u (+ (u - anchor))`.
pub fn reduced_gradient(
    adj: &AdjointTrajectory,
    u: &FieldSeries,
    nu: f64,
    anchor: Option<&FieldSeries>,
) -> FieldSeries {
    let fields = (0..u.len())
        .map(|n| {
            let mut g = adj.r.at(n).clone();
            g.axpy(nu, u.at(n));
            if let Some(a) = anchor {
                g.axpy(1.0, u.at(n));
                g.axpy(-1.0, a.at(n));
            }
            g
        })
        .collect();
    FieldSeries::new(fields)
}

/// Optimizer knobs.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Initial step of the very first iteration; later iterations start from
    /// a safeguarded Barzilai-Borwein estimate.
    pub step0: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    /// Stationarity tolerance on `|u - project(u - g)|_inf`.
    pub stat_tol: f64,
    /// RNG seed for the certificate sampling.
    pub seed: u64,
    /// Number of admissible controls sampled for the variational-inequality
    /// certificate.
    pub vi_samples: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 400,
            step0: 1.0,
            armijo_c: 1e-4,
            shrink: 0.5,
            stat_tol: 1e-6,
            seed: 7,
            vi_samples: 20,
        }
    }
}

/// One history row per accepted iterate.
#[derive(Debug, Clone, Copy)]
pub struct IterRecord {
    pub iter: usize,
    pub cost: f64,
    pub stat_residual: f64,
    pub step: f64,
    pub forward_solves: usize,
    pub backward_solves: usize,
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Stationary,
    MaxIters,
    /// Line search hit the step underflow; the best iterate is returned.
    LineSearchStall,
}

/// Result triple plus bookkeeping.
pub struct OptimizeOutcome {
    pub u: FieldSeries,
    pub state: StateTrajectory,
    pub adjoint: AdjointTrajectory,
    pub history: Vec<IterRecord>,
    pub stop: StopReason,
    pub certificates: Certificates,
}

/// Stationarity certificates evaluated at the returned iterate.
#[derive(Debug, Clone)]
pub struct Certificates {
    /// `|u - clamp(-r/nu)|_inf`, `None` when `nu = 0`.
    pub clamp_gap: Option<f64>,
    /// Sampled variational-inequality values `<r + nu u, v - u>_{L2(Q)}`
    /// for random admissible `v` (nonnegative at stationarity up to
    /// tolerance), with their scales `(1 + |g|)(1 + |v - u|)`.
    pub vi_values: Vec<(f64, f64)>,
}

/// Projected-gradient solve of the (optionally adapted) control problem.
///
/// `data` supplies the forward problem; `anchor` switches on the adapted
/// cost. The initial control defaults to `project(0)` when `u0` is `None`.
pub fn optimize(
    solver: &StateSolver,
    adj_solver: &AdjointSolver,
    data: &crate::state::ProblemData,
    cost: &CostSpec,
    bounds: &BoxBounds,
    config: &OptimizerConfig,
    anchor: Option<&FieldSeries>,
    u0: Option<FieldSeries>,
) -> Result<OptimizeOutcome, ControlError> {
    let tg = *solver.time_grid();
    let grid = solver.grid();
    let mut forward_solves = 0usize;
    let mut backward_solves = 0usize;

    let mut u = bounds.project(&u0.unwrap_or_else(|| FieldSeries::zeros(grid, &tg)));
    let mut state = solver.solve(data, &u)?;
    forward_solves += 1;
    let mut cost_val = eval_adapted_cost(&state, &u, cost, anchor, &tg)?;

    let mut history = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut adj = adj_solver.solve(&state, cost)?;
    backward_solves += 1;
    let mut grad = reduced_gradient(&adj, &u, cost.nu, anchor);

    let mut prev_u: Option<FieldSeries> = None;
    let mut prev_grad: Option<FieldSeries> = None;
    let mut step = config.step0;

    for iter in 0..config.max_iters {
        // fixed-point stationarity residual with unit step
        let trial = shifted_series(&u, -1.0, &grad);
        let projected = bounds.project(&trial);
        let stat_residual = series_inf_diff(&u, &projected);
        history.push(IterRecord {
            iter,
            cost: cost_val,
            stat_residual,
            step,
            forward_solves,
            backward_solves,
        });
        if stat_residual <= config.stat_tol {
            stop = StopReason::Stationary;
            break;
        }

        // Barzilai-Borwein initial step (safeguarded), after the first iterate
        if let (Some(pu), Some(pg)) = (&prev_u, &prev_grad) {
            let du = series_sub(&u, pu);
            let dg = series_sub(&grad, pg);
            let num = du.l2q_inner(&du, &tg);
            let den = du.l2q_inner(&dg, &tg);
            if den > 0.0 && num > 0.0 {
                step = (num / den).clamp(1e-6, 1e6);
            }
        }

        // Armijo backtracking on the projected step
        let mut tau = step;
        let mut accepted = false;
        while tau * series_inf_norm(&grad) > 1e-16 * (1.0 + series_inf_norm(&u)) {
            let u_try = bounds.project(&shifted_series(&u, -tau, &grad));
            let diff = series_sub(&u, &u_try);
            let decrease_ref =
                grad.l2q_inner(&diff, &tg) + diff.l2q_norm_sq(&tg) / (2.0 * tau);
            if decrease_ref <= 1e-14 * (1.0 + cost_val.abs()) {
                // certified decrease below evaluation noise
                break;
            }
            let state_try = solver.solve(data, &u_try)?;
            forward_solves += 1;
            let cost_try = eval_adapted_cost(&state_try, &u_try, cost, anchor, &tg)?;
            if cost_val - cost_try >= config.armijo_c * decrease_ref && decrease_ref > 0.0 {
                prev_u = Some(u.clone());
                prev_grad = Some(grad.clone());
                u = u_try;
                state = state_try;
                cost_val = cost_try;
                accepted = true;
                break;
            }
            tau *= config.shrink;
        }
        if !accepted {
            // Descent in the true cost is exhausted (the direction carries
            // the O(dt) consistency error of the adjoint). Polish by fixed-
            // step projected iterations of the gradient map itself, which
            // contracts to the fixed point that the stationarity residual
            // and the certificates are stated in.
            let tau_polish = step.clamp(1e-3, 1e6);
            let mut residual = stat_residual;
            let mut polished = false;
            for _ in 0..60 {
                let u_next = bounds.project(&shifted_series(&u, -tau_polish, &grad));
                let state_next = solver.solve(data, &u_next)?;
                forward_solves += 1;
                let cost_next = eval_adapted_cost(&state_next, &u_next, cost, anchor, &tg)?;
                let adj_next = adj_solver.solve(&state_next, cost)?;
                backward_solves += 1;
                let grad_next = reduced_gradient(&adj_next, &u_next, cost.nu, anchor);
                let trial = shifted_series(&u_next, -1.0, &grad_next);
                let res_next = series_inf_diff(&u_next, &bounds.project(&trial));
                if res_next >= residual * (1.0 - 1e-9) {
                    break; // no contraction left
                }
                u = u_next;
                state = state_next;
                cost_val = cost_next;
                adj = adj_next;
                grad = grad_next;
                residual = res_next;
                history.push(IterRecord {
                    iter: history.len(),
                    cost: cost_val,
                    stat_residual: residual,
                    step: tau_polish,
                    forward_solves,
                    backward_solves,
                });
                if residual <= config.stat_tol {
                    polished = true;
                    break;
                }
            }
            stop = if polished || residual <= config.stat_tol {
                StopReason::Stationary
            } else {
                StopReason::LineSearchStall
            };
            break;
        }
        step = tau;

        adj = adj_solver.solve(&state, cost)?;
        backward_solves += 1;
        grad = reduced_gradient(&adj, &u, cost.nu, anchor);
    }

    // final residual row
    let trial = shifted_series(&u, -1.0, &grad);
    let projected = bounds.project(&trial);
    let stat_residual = series_inf_diff(&u, &projected);
    history.push(IterRecord {
        iter: history.len(),
        cost: cost_val,
        stat_residual,
        step,
        forward_solves,
        backward_solves,
    });
    if stop == StopReason::MaxIters && stat_residual <= config.stat_tol {
        stop = StopReason::Stationary;
    }

    let certificates = evaluate_certificates(&adj, &u, cost, bounds, config, &tg);
    Ok(OptimizeOutcome {
        u,
        state,
        adjoint: adj,
        history,
        stop,
        certificates,
    })
}

/// Clamp identity and VI sampling at a given iterate.
pub fn evaluate_certificates(
    adj: &AdjointTrajectory,
    u: &FieldSeries,
    cost: &CostSpec,
    bounds: &BoxBounds,
    config: &OptimizerConfig,
    tg: &TimeGrid,
) -> Certificates {
    let clamp_gap = if cost.nu > 0.0 {
        let target = FieldSeries::new(
            adj.r
                .fields()
                .iter()
                .map(|r| r.map(|v| -v / cost.nu))
                .collect(),
        );
        let clamped = bounds.project(&target);
        Some(series_inf_diff(u, &clamped))
    } else {
        None
    };

    let g = reduced_gradient(adj, u, cost.nu, None);
    let g_norm = g.l2q_norm_sq(tg).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut vi_values = Vec::with_capacity(config.vi_samples);
    for _ in 0..config.vi_samples {
        let v = bounds.sample_admissible(u, &mut rng);
        let dv = series_sub(&v, u);
        let value = g.l2q_inner(&dv, tg);
        let scale = (1.0 + g_norm) * (1.0 + dv.l2q_norm_sq(tg).sqrt());
        vi_values.push((value, scale));
    }
    Certificates {
        clamp_gap,
        vi_values,
    }
}

fn shifted_series(u: &FieldSeries, c: f64, g: &FieldSeries) -> FieldSeries {
    FieldSeries::new(
        u.fields()
            .iter()
            .zip(g.fields())
            .map(|(a, b)| a.lin_comb(1.0, c, b))
            .collect(),
    )
}

fn series_sub(a: &FieldSeries, b: &FieldSeries) -> FieldSeries {
    FieldSeries::new(
        a.fields()
            .iter()
            .zip(b.fields())
            .map(|(x, y)| x.sub(y))
            .collect(),
    )
}

fn series_inf_diff(a: &FieldSeries, b: &FieldSeries) -> f64 {
    a.fields()
        .iter()
        .zip(b.fields())
        .map(|(x, y)| x.sub(y).max_abs())
        .fold(0.0, f64::max)
}

fn series_inf_norm(a: &FieldSeries) -> f64 {
    a.fields().iter().map(|f| f.max_abs()).fold(0.0, f64::max)
}

/// L2(Q) distance between two controls.
pub fn control_distance(a: &FieldSeries, b: &FieldSeries, tg: &TimeGrid) -> f64 {
    series_sub(a, b).l2q_norm_sq(tg).sqrt()
}

/// Seeded random control perturbation for the finite-difference gradient
/// check: low cosine modes in space, endpoint-vanishing sine profiles in
/// time. Smooth directions keep the central-difference quotient well above
/// solver noise; the same seed always produces the same direction.
pub fn smooth_test_direction(grid: crate::grid::Grid, tg: &TimeGrid, seed: u64) -> FieldSeries {
    use std::f64::consts::PI;
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = move || {
        state ^= state >> 30;
        state = state.wrapping_mul(0xBF58476D1CE4E5B9);
        state ^= state >> 27;
        state = state.wrapping_mul(0x94D049BB133111EB);
        state ^= state >> 31;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let mut coef = Vec::new();
    for kx in 0..2usize {
        for ky in 0..2usize {
            for m in 0..3usize {
                coef.push((kx, ky, m, next(), next()));
            }
        }
    }
    let (lx, ly, tf) = (grid.lx(), grid.ly(), tg.t_final());
    FieldSeries::from_fn(grid, tg, move |x, y, t| {
        coef.iter()
            .map(|&(kx, ky, m, a, b)| -> f64 {
                let sp = (PI * kx as f64 * x / lx).cos() * (PI * ky as f64 * y / ly).cos();
                sp * (a * (PI * (m as f64 + 1.0) * t / tf).sin()
                    + b * (PI * (m as f64 + 2.0) * t / tf).sin())
            })
            .sum()
    })
}
