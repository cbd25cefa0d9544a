//! Subcommand implementations. Each returns `Ok(true)` when its hard
//! assertions pass, `Ok(false)` when the run completed but an assertion
//! failed (the report is still written), and `Err` on solver/config faults.

use anyhow::{Context, Result};
use serde::Serialize;

use quench_core::control::{
    control_distance, eval_cost, optimize as pg_optimize, reduced_gradient, smooth_test_direction,
    StopReason,
};
use quench_core::grid::FieldSeries;
use quench_core::snapshot::write_snapshot;
use quench_core::state::validate_assumptions;
use quench_core::study::{control_continuation, state_rate_study};

use crate::config::Resolved;
use crate::report::OutDir;

/// Mass-balance residual bound (exact discrete identity up to rounding).
const MASS_BALANCE_TOL: f64 = 1e-12;

#[derive(Serialize)]
struct ValidationJson {
    passed: bool,
    rho: f64,
    interior_quantities: [f64; 4],
    interior_margin: f64,
    violations: Vec<String>,
}

pub fn validate(resolved: &Resolved, out: &OutDir) -> Result<bool> {
    let report = validate_assumptions(
        &resolved.params,
        &resolved.concave,
        &resolved.mode,
        &resolved.data,
        Some(&resolved.bounds),
        &resolved.tg,
    );
    let json = ValidationJson {
        passed: report.passed(),
        rho: report.rho,
        interior_quantities: report.interior_quantities,
        interior_margin: report.interior_margin,
        violations: report.violations.iter().map(|v| v.to_string()).collect(),
    };
    out.write_json("validation.json", &json)?;
    if report.passed() {
        println!("validate: PASS (interior margin {:.3e})", report.interior_margin);
    } else {
        println!("validate: FAIL");
        for v in &report.violations {
            println!("  - {v}");
        }
    }
    Ok(report.passed())
}

#[derive(Serialize)]
struct SimulateSummary {
    r_low: f64,
    r_high: f64,
    separation_margin: f64,
    max_mass_residual: f64,
    mass_balance_ok: bool,
    final_mean_phi: f64,
    final_eps: Option<f64>,
    total_newton_iters: usize,
}

pub fn simulate(resolved: &Resolved, out: &OutDir) -> Result<bool> {
    let solver = resolved.state_solver();
    let traj = solver
        .solve(&resolved.data, &resolved.fixed_control)
        .context("forward solve")?;

    let tg = &resolved.tg;
    let mut rows = Vec::with_capacity(traj.diagnostics.len());
    for (n, d) in traj.diagnostics.iter().enumerate() {
        rows.push(vec![
            (n + 1) as f64,
            tg.t(n + 1),
            d.mean_phi,
            d.min_phi,
            d.max_phi,
            d.newton_iters as f64,
            d.mass_residual,
        ]);
    }
    out.write_csv(
        "diagnostics.csv",
        "step,t,mean_phi,min_phi,max_phi,newton_iters,mass_residual",
        &rows,
    )?;

    let stride = resolved.config.output.snapshot_stride;
    if stride > 0 {
        for n in (0..=tg.nt()).step_by(stride) {
            let t = tg.t(n);
            write_snapshot(out.path(), "phi", n, t, traj.phi.at(n))?;
            write_snapshot(out.path(), "mu", n, t, traj.mu.at(n))?;
            write_snapshot(out.path(), "w", n, t, traj.w.at(n))?;
            write_snapshot(out.path(), "v", n, t, traj.v.at(n))?;
            if let Some(xi) = &traj.xi {
                write_snapshot(out.path(), "xi", n, t, xi.at(n))?;
            }
        }
    }

    let (r_low, r_high) = traj.separation_report();
    let max_mass = traj
        .diagnostics
        .iter()
        .map(|d| d.mass_residual.abs())
        .fold(0.0, f64::max);
    let summary = SimulateSummary {
        r_low,
        r_high,
        separation_margin: 1.0 - r_low.abs().max(r_high.abs()),
        max_mass_residual: max_mass,
        mass_balance_ok: max_mass <= MASS_BALANCE_TOL,
        final_mean_phi: traj.phi.last().mean(),
        final_eps: traj.final_eps,
        total_newton_iters: traj.diagnostics.iter().map(|d| d.newton_iters).sum(),
    };
    out.write_json("summary.json", &summary)?;
    let separated = resolved.mode.is_log_quench() && summary.separation_margin > 0.0
        || !resolved.mode.is_log_quench();
    println!(
        "simulate: phi in [{r_low:.6}, {r_high:.6}], max mass residual {max_mass:.3e}"
    );
    Ok(summary.mass_balance_ok && separated)
}

#[derive(Serialize)]
struct CertificatesJson {
    stop: String,
    iterations: usize,
    final_cost: f64,
    stat_residual: f64,
    clamp_gap: Option<f64>,
    clamp_gap_bound: Option<f64>,
    clamp_ok: bool,
    vi_min_value: f64,
    vi_bound: f64,
    vi_ok: bool,
}

pub fn optimize(resolved: &Resolved, out: &OutDir) -> Result<bool> {
    let solver = resolved.state_solver();
    let adj_solver = resolved.adjoint_solver();
    let outcome = pg_optimize(
        &solver,
        &adj_solver,
        &resolved.data,
        &resolved.cost,
        &resolved.bounds,
        &resolved.optimizer,
        None,
        resolved.initial_control.clone(),
    )
    .context("projected-gradient solve")?;

    let rows: Vec<Vec<f64>> = outcome
        .history
        .iter()
        .map(|h| {
            vec![
                h.iter as f64,
                h.cost,
                h.stat_residual,
                h.step,
                h.forward_solves as f64,
                h.backward_solves as f64,
            ]
        })
        .collect();
    out.write_csv(
        "history.csv",
        "iter,cost,stat_residual,step,forward_solves,backward_solves",
        &rows,
    )?;

    let stride = resolved.config.output.snapshot_stride;
    if stride > 0 {
        for n in (0..=resolved.tg.nt()).step_by(stride) {
            write_snapshot(out.path(), "u", n, resolved.tg.t(n), outcome.u.at(n))?;
        }
    }

    let last = outcome.history.last().expect("nonempty history");
    let u_inf = (0..=resolved.tg.nt())
        .map(|n| outcome.u.at(n).max_abs())
        .fold(0.0, f64::max);
    let clamp_bound = 1e-5 * (1.0 + u_inf);
    let clamp_ok = match outcome.certificates.clamp_gap {
        Some(gap) => gap <= clamp_bound,
        None => true,
    };
    let vi_min = outcome
        .certificates
        .vi_values
        .iter()
        .map(|(v, s)| v / s.max(1e-300))
        .fold(f64::INFINITY, f64::min);
    let vi_ok = outcome
        .certificates
        .vi_values
        .iter()
        .all(|(v, s)| *v >= -1e-5 * s);
    let converged = outcome.stop == StopReason::Stationary;

    let cert = CertificatesJson {
        stop: format!("{:?}", outcome.stop),
        iterations: outcome.history.len() - 1,
        final_cost: last.cost,
        stat_residual: last.stat_residual,
        clamp_gap: outcome.certificates.clamp_gap,
        clamp_gap_bound: outcome.certificates.clamp_gap.map(|_| clamp_bound),
        clamp_ok,
        vi_min_value: vi_min,
        vi_bound: -1e-5,
        vi_ok,
    };
    out.write_json("certificates.json", &cert)?;
    println!(
        "optimize: {:?} after {} iterations, cost {:.6e}, residual {:.3e}",
        outcome.stop,
        cert.iterations,
        last.cost,
        last.stat_residual
    );
    if let Some(gap) = outcome.certificates.clamp_gap {
        println!("  clamp identity gap {gap:.3e} (bound {clamp_bound:.3e})");
    }
    println!("  min scaled VI value {vi_min:.3e} (bound -1e-5)");
    Ok(converged && clamp_ok && vi_ok)
}

#[derive(Serialize)]
struct QuenchSummary {
    rate_slope: Option<f64>,
    rate_intercept: Option<f64>,
    rate_residual_rms: Option<f64>,
    rate_slope_w: Option<f64>,
    slope_in_band: Option<bool>,
    residual_ok: Option<bool>,
    separation_ok: Option<bool>,
    anchor_kind: Option<String>,
    anchor_cost: Option<f64>,
    first_distance: Option<f64>,
    final_distance: Option<f64>,
    distance_ok: Option<bool>,
    first_cost_gap: Option<f64>,
    final_cost_gap: Option<f64>,
    gap_shrink_ok: Option<bool>,
    passed: bool,
}

pub fn quench_study(resolved: &Resolved, out: &OutDir) -> Result<bool> {
    let problem = resolved.study_problem();
    let mut summary = QuenchSummary {
        rate_slope: None,
        rate_intercept: None,
        rate_residual_rms: None,
        rate_slope_w: None,
        slope_in_band: None,
        residual_ok: None,
        separation_ok: None,
        anchor_kind: None,
        anchor_cost: None,
        first_distance: None,
        final_distance: None,
        distance_ok: None,
        first_cost_gap: None,
        final_cost_gap: None,
        gap_shrink_ok: None,
        passed: true,
    };

    if resolved.config.quench.run_rate_study {
        let report = state_rate_study(&problem, &resolved.fixed_control, &resolved.schedule)
            .context("state rate study")?;
        let rows: Vec<Vec<f64>> = report
            .pairs
            .iter()
            .map(|p| {
                vec![
                    p.alpha_low,
                    p.alpha_high,
                    p.alpha_high - p.alpha_low,
                    p.err_phi,
                    p.err_w,
                    p.err_total,
                ]
            })
            .collect();
        out.write_csv(
            "state_rates.csv",
            "alpha_low,alpha_high,delta_alpha,err_phi,err_w,err_total",
            &rows,
        )?;
        let sep_rows: Vec<Vec<f64>> = report
            .separations
            .iter()
            .map(|s| vec![s.alpha, s.r_low, s.r_high, s.margin])
            .collect();
        out.write_csv("separation.csv", "alpha,r_low,r_high,margin", &sep_rows)?;
        let obs_rows: Vec<Vec<f64>> = report
            .obstacle_reference
            .iter()
            .map(|(a, e, eps)| vec![*a, *e, *eps])
            .collect();
        out.write_csv("obstacle_ref.csv", "alpha,err_total,eps", &obs_rows)?;

        let slope_in_band = (0.45..=1.6).contains(&report.slope);
        let residual_ok = report.residual_rms <= 0.15;
        let separation_ok = report.separations.iter().all(|s| s.margin > 0.0);
        println!(
            "quench-study: rate slope {:.4} (rms residual {:.4}), w-slope {:.4}",
            report.slope, report.residual_rms, report.slope_w
        );
        for s in &report.separations {
            println!(
                "  alpha {:.6}: phi in [{:.6}, {:.6}], margin {:.3e}",
                s.alpha, s.r_low, s.r_high, s.margin
            );
        }
        summary.rate_slope = Some(report.slope);
        summary.rate_intercept = Some(report.intercept);
        summary.rate_residual_rms = Some(report.residual_rms);
        summary.rate_slope_w = Some(report.slope_w);
        summary.slope_in_band = Some(slope_in_band);
        summary.residual_ok = Some(residual_ok);
        summary.separation_ok = Some(separation_ok);
        summary.passed &= slope_in_band && residual_ok && separation_ok;
    }

    if resolved.config.quench.run_continuation {
        let report = control_continuation(
            &problem,
            &resolved.cost,
            &resolved.bounds,
            &resolved.optimizer,
            &resolved.schedule,
            resolved.anchor,
        )
        .context("control continuation")?;
        let rows: Vec<Vec<f64>> = report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.alpha,
                    r.distance,
                    r.adapted_cost,
                    r.cost_gap,
                    r.pg_iterations as f64,
                    if r.stalled { 1.0 } else { 0.0 },
                ]
            })
            .collect();
        out.write_csv(
            "continuation.csv",
            "alpha,distance,adapted_cost,cost_gap,pg_iterations,stalled",
            &rows,
        )?;
        let first = report.rows.first().expect("nonempty schedule");
        let last = report.rows.last().expect("nonempty schedule");
        let distance_ok = last.distance <= first.distance;
        let gap_shrink_ok = last.cost_gap <= 0.1 * first.cost_gap || first.cost_gap == 0.0;
        println!(
            "  continuation ({:?} anchor): distance {:.6e} -> {:.6e}, cost gap {:.6e} -> {:.6e}",
            report.anchor_kind, first.distance, last.distance, first.cost_gap, last.cost_gap
        );
        summary.anchor_kind = Some(format!("{:?}", report.anchor_kind));
        summary.anchor_cost = Some(report.anchor_cost);
        summary.first_distance = Some(first.distance);
        summary.final_distance = Some(last.distance);
        summary.distance_ok = Some(distance_ok);
        summary.first_cost_gap = Some(first.cost_gap);
        summary.final_cost_gap = Some(last.cost_gap);
        summary.gap_shrink_ok = Some(gap_shrink_ok);
        summary.passed &= distance_ok && gap_shrink_ok;
    }

    out.write_json("summary.json", &summary)?;
    println!("quench-study: {}", if summary.passed { "PASS" } else { "FAIL" });
    Ok(summary.passed)
}

#[derive(Serialize)]
struct GradcheckJson {
    max_rel_error: f64,
    max_rel_error_refined: Option<f64>,
    refinement_ratio: Option<f64>,
    error_ok: bool,
    ratio_ok: Option<bool>,
    passed: bool,
}

/// FD-vs-adjoint comparison at one resolution; returns the per-direction
/// rows and the max relative error.
fn gradcheck_at(
    resolved: &Resolved,
    nt_scale: usize,
    rows: &mut Vec<Vec<f64>>,
) -> Result<f64> {
    let grid = resolved.grid();
    let tg = quench_core::grid::TimeGrid::new(
        resolved.tg.t_final(),
        resolved.tg.nt() * nt_scale,
    )
    .expect("valid scaled time grid");
    let mut solver = quench_core::state::StateSolver::new(
        resolved.ops.clone(),
        tg,
        resolved.params,
        resolved.concave,
        resolved.mode,
    );
    solver.eps_continuation = resolved.eps_continuation.clone();
    let adj_solver = quench_core::adjoint::AdjointSolver::new(
        resolved.ops.clone(),
        tg,
        &resolved.params,
        resolved.concave,
        resolved.mode,
    );
    // re-resolve the time-dependent inputs on the scaled grid
    let data = quench_core::state::ProblemData {
        f: resolved.config.data.f.series(grid, &tg)?,
        phi0: resolved.data.phi0.clone(),
        w0: resolved.data.w0.clone(),
        w1: resolved.data.w1.clone(),
    };
    let mut cost =
        quench_core::adjoint::CostSpec::with_zero_targets(grid, &tg, resolved.cost.beta, resolved.cost.nu);
    if let Some(st) = &resolved.config.cost.phi_q {
        cost.phi_q = st.series(grid, &tg)?;
    }
    if let Some(st) = &resolved.config.cost.w_q {
        cost.w_q = st.series(grid, &tg)?;
    }
    if let Some(st) = &resolved.config.cost.wprime_q {
        cost.wprime_q = st.series(grid, &tg)?;
    }
    cost.phi_omega = resolved.cost.phi_omega.clone();
    cost.w_omega = resolved.cost.w_omega.clone();
    cost.wprime_omega = resolved.cost.wprime_omega.clone();

    let u0 = match &resolved.config.control.initial {
        Some(st) => st.series(grid, &tg)?,
        None => resolved.bounds.project(&FieldSeries::zeros(grid, &tg)),
    };
    let state = solver.solve(&data, &u0).context("base forward solve")?;
    let adj = adj_solver.solve(&state, &cost).context("adjoint solve")?;
    let grad = reduced_gradient(&adj, &u0, cost.nu, None);

    let tau = resolved.config.gradcheck.tau;
    let mut worst: f64 = 0.0;
    for k in 0..resolved.config.gradcheck.directions {
        let delta = smooth_test_direction(grid, &tg, resolved.config.seed.wrapping_add(k as u64));
        let shift = |sgn: f64| {
            FieldSeries::new(
                u0.fields()
                    .iter()
                    .zip(delta.fields())
                    .map(|(u, d)| u.lin_comb(1.0, sgn * tau, d))
                    .collect::<Vec<_>>(),
            )
        };
        let u_plus = shift(1.0);
        let u_minus = shift(-1.0);
        let j_plus = eval_cost(&solver.solve(&data, &u_plus)?, &u_plus, &cost, &tg)
            .context("cost at u+")?;
        let j_minus = eval_cost(&solver.solve(&data, &u_minus)?, &u_minus, &cost, &tg)
            .context("cost at u-")?;
        let fd = (j_plus - j_minus) / (2.0 * tau);
        let gd = grad.l2q_inner(&delta, &tg);
        let rel = (fd - gd).abs() / fd.abs().max(gd.abs()).max(1e-300);
        rows.push(vec![tg.nt() as f64, k as f64, fd, gd, rel]);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub fn gradcheck(resolved: &Resolved, out: &OutDir) -> Result<bool> {
    let mut rows = Vec::new();
    let coarse = gradcheck_at(resolved, 1, &mut rows)?;
    let refined = if resolved.config.gradcheck.refine {
        Some(gradcheck_at(resolved, 2, &mut rows)?)
    } else {
        None
    };
    out.write_csv(
        "gradcheck.csv",
        "nt,direction,fd_value,adjoint_value,rel_error",
        &rows,
    )?;

    let error_ok = coarse <= 1e-2;
    let ratio = refined.map(|f| coarse / f);
    let ratio_ok = ratio.map(|r| r >= 1.5);
    let passed = error_ok && ratio_ok.unwrap_or(true);
    let json = GradcheckJson {
        max_rel_error: coarse,
        max_rel_error_refined: refined,
        refinement_ratio: ratio,
        error_ok,
        ratio_ok,
        passed,
    };
    out.write_json("gradcheck.json", &json)?;
    println!(
        "gradcheck: max relative error {coarse:.3e}{}",
        match (refined, ratio) {
            (Some(f), Some(r)) => format!(", refined {f:.3e}, ratio {r:.2}"),
            _ => String::new(),
        }
    );
    println!("gradcheck: {}", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

/// Single-level plain optimize used by tests that need a cheap anchor.
#[allow(dead_code)]
pub fn plain_distance(resolved: &Resolved, a: &FieldSeries, b: &FieldSeries) -> f64 {
    control_distance(a, b, &resolved.tg)
}
