//! JSON run configuration: schema, defaults, analytic profiles, and
//! resolution into solver inputs.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use quench_core::adjoint::CostSpec;
use quench_core::control::{BoxBounds, OptimizerConfig};
use quench_core::grid::{Field, FieldSeries, Grid, TimeGrid};
use quench_core::potential::{ConcavePart, ConvexMode};
use quench_core::snapshot::read_snapshot;
use quench_core::spectral::NeumannOps;
use quench_core::state::{PhysParams, ProblemData};
use quench_core::study::{AnchorKind, QuenchSchedule, StudyProblem};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub physics: PhysicsConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub quench: QuenchConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    pub nt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub lambda: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            a: 0.1,
            b: 0.5,
            kappa1: 1.0,
            kappa2: 1.0,
            lambda: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialConfig {
    pub c1: f64,
    pub c2: f64,
    /// `log_quench` or `obstacle_penalty`.
    pub mode: String,
    pub alpha: f64,
    /// Target penalization level in obstacle mode.
    pub eps: f64,
    /// Coarse-to-fine warm-up levels tried before `eps` in each step.
    pub eps_continuation: Vec<f64>,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self {
            c1: 0.0,
            c2: 1.0,
            mode: "log_quench".into(),
            alpha: 0.1,
            eps: 1e-4,
            eps_continuation: vec![1e-2, 1e-3],
        }
    }
}

/// Spatial profile sampled at cell centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant {
        value: f64,
    },
    /// `amplitude cos(pi kx x / lx) cos(pi ky y / ly) + offset`
    CosineBump {
        amplitude: f64,
        #[serde(default = "one_u")]
        kx: usize,
        #[serde(default = "one_u")]
        ky: usize,
        #[serde(default)]
        offset: f64,
    },
    /// `amplitude tanh(s / width) + offset`, `s` the signed distance to the
    /// domain bisector along `normal` (`x`, `y`, or `diag`).
    TanhInterface {
        amplitude: f64,
        width: f64,
        #[serde(default = "default_normal")]
        normal: String,
        #[serde(default)]
        offset: f64,
    },
    /// `amplitude sign(sin(pi tiles x / lx)) sign(sin(pi tiles y / ly))`
    Checkerboard {
        amplitude: f64,
        #[serde(default = "two_u")]
        tiles: usize,
    },
    /// Raw snapshot (`.f64` + `.hdr` sidecar) on the same grid.
    File {
        path: String,
    },
}

fn one_u() -> usize {
    1
}
fn two_u() -> usize {
    2
}
fn default_normal() -> String {
    "x".into()
}

impl Profile {
    pub fn field(&self, grid: Grid) -> Result<Field> {
        Ok(match self {
            Profile::Constant { value } => Field::constant(grid, *value),
            Profile::CosineBump {
                amplitude,
                kx,
                ky,
                offset,
            } => {
                let (a, o) = (*amplitude, *offset);
                let (kx, ky) = (*kx as f64, *ky as f64);
                let (lx, ly) = (grid.lx(), grid.ly());
                Field::from_fn(grid, move |x, y| {
                    a * (std::f64::consts::PI * kx * x / lx).cos()
                        * (std::f64::consts::PI * ky * y / ly).cos()
                        + o
                })
            }
            Profile::TanhInterface {
                amplitude,
                width,
                normal,
                offset,
            } => {
                let (a, w, o) = (*amplitude, *width, *offset);
                if !(w > 0.0) {
                    bail!("tanh_interface width must be positive, got {w}");
                }
                if !matches!(normal.as_str(), "x" | "y" | "diag") {
                    bail!("tanh_interface normal must be x, y, or diag, got {normal:?}");
                }
                let (lx, ly) = (grid.lx(), grid.ly());
                let normal = normal.clone();
                let s = move |x: f64, y: f64| match normal.as_str() {
                    "x" => x - 0.5 * lx,
                    "y" => y - 0.5 * ly,
                    _ => ((x - 0.5 * lx) + (y - 0.5 * ly)) / std::f64::consts::SQRT_2,
                };
                Field::from_fn(grid, move |x, y| a * (s(x, y) / w).tanh() + o)
            }
            Profile::Checkerboard { amplitude, tiles } => {
                let (a, t) = (*amplitude, *tiles as f64);
                let (lx, ly) = (grid.lx(), grid.ly());
                Field::from_fn(grid, move |x, y| {
                    let sx = (std::f64::consts::PI * t * x / lx).sin();
                    let sy = (std::f64::consts::PI * t * y / ly).sin();
                    a * sx.signum() * sy.signum()
                })
            }
            Profile::File { path } => {
                let (field, _) = read_snapshot(Path::new(path))
                    .with_context(|| format!("loading snapshot {path}"))?;
                if field.grid() != grid {
                    bail!(
                        "snapshot {path} grid {:?} does not match configured grid {:?}",
                        (field.grid().nx(), field.grid().ny()),
                        (grid.nx(), grid.ny())
                    );
                }
                field
            }
        })
    }
}

/// Multiplicative time envelope.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Envelope {
    #[default]
    One,
    /// `t / T`
    Ramp,
    /// `sin(2 pi cycles t / T)`
    Sine { cycles: f64 },
    /// `cos(2 pi cycles t / T)`
    Cosine { cycles: f64 },
}

impl Envelope {
    fn value(&self, t: f64, t_final: f64) -> f64 {
        match self {
            Envelope::One => 1.0,
            Envelope::Ramp => t / t_final,
            Envelope::Sine { cycles } => (2.0 * std::f64::consts::PI * cycles * t / t_final).sin(),
            Envelope::Cosine { cycles } => {
                (2.0 * std::f64::consts::PI * cycles * t / t_final).cos()
            }
        }
    }
}

/// Space profile with a time envelope: `space(x, y) * envelope(t) + offset`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceTime {
    pub space: Profile,
    #[serde(default)]
    pub envelope: Envelope,
    #[serde(default)]
    pub offset: f64,
}

impl SpaceTime {
    pub fn constant(value: f64) -> Self {
        Self {
            space: Profile::Constant { value },
            envelope: Envelope::One,
            offset: 0.0,
        }
    }

    pub fn series(&self, grid: Grid, tg: &TimeGrid) -> Result<FieldSeries> {
        let base = self.space.field(grid)?;
        let off = self.offset;
        let fields = (0..tg.n_nodes())
            .map(|n| {
                let e = self.envelope.value(tg.t(n), tg.t_final());
                base.map(|v| v * e + off)
            })
            .collect();
        Ok(FieldSeries::new(fields))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub phi0: Profile,
    pub w0: Profile,
    pub w1: Profile,
    pub f: SpaceTime,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            phi0: Profile::Constant { value: 0.0 },
            w0: Profile::Constant { value: 0.0 },
            w1: Profile::Constant { value: 0.0 },
            f: SpaceTime::constant(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub u_min: f64,
    pub u_max: f64,
    /// Initial control; `None` means the projection of zero.
    pub initial: Option<SpaceTime>,
    /// Fixed control used by `simulate` and the state rate study.
    pub fixed: SpaceTime,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            u_min: -1.0,
            u_max: 1.0,
            initial: None,
            fixed: SpaceTime::constant(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// `[beta1..beta6]`
    pub beta: [f64; 6],
    pub nu: f64,
    pub phi_q: Option<SpaceTime>,
    pub w_q: Option<SpaceTime>,
    pub wprime_q: Option<SpaceTime>,
    pub phi_omega: Option<Profile>,
    pub w_omega: Option<Profile>,
    pub wprime_omega: Option<Profile>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            beta: [1.0, 0.0, 0.0, 0.0, 0.5, 0.0],
            nu: 0.1,
            phi_q: None,
            w_q: None,
            wprime_q: None,
            phi_omega: None,
            w_omega: None,
            wprime_omega: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub max_iters: usize,
    pub step0: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub stat_tol: f64,
    pub vi_samples: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            max_iters: d.max_iters,
            step0: d.step0,
            armijo_c: d.armijo_c,
            shrink: d.shrink,
            stat_tol: d.stat_tol,
            vi_samples: d.vi_samples,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuenchConfig {
    pub alpha0: f64,
    pub levels: usize,
    /// `smallest_alpha` or `obstacle`.
    pub anchor: String,
    /// Penalization level of the obstacle reference solve.
    pub obstacle_eps: f64,
    pub run_rate_study: bool,
    pub run_continuation: bool,
}

impl Default for QuenchConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.1,
            levels: 4,
            anchor: "smallest_alpha".into(),
            obstacle_eps: 1e-4,
            run_rate_study: true,
            run_continuation: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub directions: usize,
    pub tau: f64,
    /// Also run at `2 nt` and report the refinement ratio.
    pub refine: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            directions: 5,
            tau: 1e-4,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write field snapshots every k-th step (0 disables).
    pub snapshot_stride: usize,
}

/// Everything resolved onto the grid, ready for the solvers.
pub struct Resolved {
    pub config: RunConfig,
    pub ops: Arc<NeumannOps>,
    pub tg: TimeGrid,
    pub params: PhysParams,
    pub concave: ConcavePart,
    pub mode: ConvexMode,
    pub eps_continuation: Vec<f64>,
    pub data: ProblemData,
    pub bounds: BoxBounds,
    pub fixed_control: FieldSeries,
    pub initial_control: Option<FieldSeries>,
    pub cost: CostSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: QuenchSchedule,
    pub anchor: AnchorKind,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn resolve(self) -> Result<Resolved> {
        let grid = Grid::new(self.grid.nx, self.grid.ny, self.grid.lx, self.grid.ly)
            .map_err(|e| anyhow::anyhow!("grid: {e}"))?;
        let tg = TimeGrid::new(self.time.t_final, self.time.nt)
            .map_err(|e| anyhow::anyhow!("time grid: {e}"))?;
        let ops = Arc::new(NeumannOps::new(grid));
        let p = &self.physics;
        let params = PhysParams {
            gamma: p.gamma,
            a: p.a,
            b: p.b,
            kappa1: p.kappa1,
            kappa2: p.kappa2,
            lambda: p.lambda,
        };
        let concave = ConcavePart {
            c1: self.potential.c1,
            c2: self.potential.c2,
        };
        let mode = match self.potential.mode.as_str() {
            "log_quench" => ConvexMode::LogQuench {
                alpha: self.potential.alpha,
            },
            "obstacle_penalty" => ConvexMode::ObstaclePenalty {
                alpha: 0.0,
                eps: self.potential.eps,
            },
            other => bail!("unknown potential mode {other:?} (expected log_quench or obstacle_penalty)"),
        };

        let data = ProblemData {
            f: self.data.f.series(grid, &tg)?,
            phi0: self.data.phi0.field(grid)?,
            w0: self.data.w0.field(grid)?,
            w1: self.data.w1.field(grid)?,
        };
        let bounds = BoxBounds::constant(self.control.u_min, self.control.u_max);
        let fixed_control = self.control.fixed.series(grid, &tg)?;
        let initial_control = match &self.control.initial {
            Some(st) => Some(st.series(grid, &tg)?),
            None => None,
        };

        let mut cost = CostSpec::with_zero_targets(grid, &tg, self.cost.beta, self.cost.nu);
        if let Some(st) = &self.cost.phi_q {
            cost.phi_q = st.series(grid, &tg)?;
        }
        if let Some(st) = &self.cost.w_q {
            cost.w_q = st.series(grid, &tg)?;
        }
        if let Some(st) = &self.cost.wprime_q {
            cost.wprime_q = st.series(grid, &tg)?;
        }
        if let Some(pr) = &self.cost.phi_omega {
            cost.phi_omega = pr.field(grid)?;
        }
        if let Some(pr) = &self.cost.w_omega {
            cost.w_omega = pr.field(grid)?;
        }
        if let Some(pr) = &self.cost.wprime_omega {
            cost.wprime_omega = pr.field(grid)?;
        }

        let o = &self.optimizer;
        let optimizer = OptimizerConfig {
            max_iters: o.max_iters,
            step0: o.step0,
            armijo_c: o.armijo_c,
            shrink: o.shrink,
            stat_tol: o.stat_tol,
            seed: self.seed,
            vi_samples: o.vi_samples,
        };

        let schedule = QuenchSchedule::geometric(self.quench.alpha0, self.quench.levels)
            .map_err(|e| anyhow::anyhow!("quench schedule: {e}"))?;
        let anchor = match self.quench.anchor.as_str() {
            "smallest_alpha" => AnchorKind::SmallestAlpha,
            "obstacle" => AnchorKind::Obstacle,
            other => bail!("unknown anchor kind {other:?} (expected smallest_alpha or obstacle)"),
        };

        Ok(Resolved {
            eps_continuation: self.potential.eps_continuation.clone(),
            config: self,
            ops,
            tg,
            params,
            concave,
            mode,
            data,
            bounds,
            fixed_control,
            initial_control,
            cost,
            optimizer,
            schedule,
            anchor,
        })
    }
}

impl Resolved {
    pub fn grid(&self) -> Grid {
        self.ops.grid()
    }

    pub fn study_problem(&self) -> StudyProblem {
        StudyProblem {
            ops: self.ops.clone(),
            tg: self.tg,
            params: self.params,
            concave: self.concave,
            data: self.data.clone(),
            obstacle_eps: self.config.quench.obstacle_eps,
        }
    }

    pub fn state_solver(&self) -> quench_core::state::StateSolver {
        let mut solver = quench_core::state::StateSolver::new(
            self.ops.clone(),
            self.tg,
            self.params,
            self.concave,
            self.mode,
        );
        solver.eps_continuation = self.eps_continuation.clone();
        solver
    }

    pub fn adjoint_solver(&self) -> quench_core::adjoint::AdjointSolver {
        quench_core::adjoint::AdjointSolver::new(
            self.ops.clone(),
            self.tg,
            &self.params,
            self.concave,
            self.mode,
        )
    }
}
