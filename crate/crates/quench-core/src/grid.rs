//! Cell-centered uniform 2-D grids with homogeneous-Neumann closure, scalar
//! fields on them, and node-aligned time series.
//!
//! The Neumann boundary condition is realized by mirror (even-reflection)
//! ghost cells, which makes the 5-point Laplacian symmetric with exactly zero
//! row sums and diagonal under the DCT-II basis (see [`crate::spectral`]).
//! Cells are indexed `values[j * nx + i]` with `i` along x, `j` along y, and
//! cell centers at `x_i = (i + 1/2) hx`, `y_j = (j + 1/2) hy`.

use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid too small: nx={nx}, ny={ny} (need at least 2x2)")]
    TooSmall { nx: usize, ny: usize },
    #[error("domain edges must be positive: lx={lx}, ly={ly}")]
    BadExtent { lx: f64, ly: f64 },
    #[error("time grid needs nt >= 1 and t_final > 0 (got nt={nt}, t_final={t_final})")]
    BadTimeGrid { nt: usize, t_final: f64 },
    #[error("field has nonzero mean {mean:e} (tolerance {tol:e}); subtract the mean first")]
    NonZeroMean { mean: f64, tol: f64 },
    #[error("time series has {len} fields, expected nt+1 = {expected}")]
    LengthMismatch { len: usize, expected: usize },
    #[error("field shape {actual:?} does not match grid {expected:?}")]
    ShapeMismatch {
        actual: (usize, usize),
        expected: (usize, usize),
    },
}

/// Uniform cell-centered tensor grid on the rectangle `(0,lx) x (0,ly)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, GridError> {
        if nx < 2 || ny < 2 {
            return Err(GridError::TooSmall { nx, ny });
        }
        if !(lx > 0.0) || !(ly > 0.0) || !lx.is_finite() || !ly.is_finite() {
            return Err(GridError::BadExtent { lx, ly });
        }
        Ok(Self { nx, ny, lx, ly })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn lx(&self) -> f64 {
        self.lx
    }
    pub fn ly(&self) -> f64 {
        self.ly
    }
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }
    /// Number of cells.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Cell measure `hx * hy`.
    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }
    /// Domain measure `lx * ly`.
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }
    /// Cell-center coordinate of cell `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx(), (j as f64 + 0.5) * self.hy())
    }
}

/// Scalar grid function: one value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    /// Sample `f(x, y)` at cell centers.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64 + Sync) -> Self {
        let nx = grid.nx();
        let hx = grid.hx();
        let hy = grid.hy();
        let mut values = vec![0.0; grid.len()];
        par::fill_indexed(&mut values, |idx| {
            let i = idx % nx;
            let j = idx / nx;
            f((i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy)
        });
        Self { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ShapeMismatch {
                actual: (values.len(), 1),
                expected: (grid.nx(), grid.ny()),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += c * other`, elementwise.
    pub fn axpy(&mut self, c: f64, other: &Field) {
        self.zip_inplace(other, |a, b| a + c * b);
    }

    /// Elementwise update `self[i] = f(self[i], other[i])`.
    pub fn zip_inplace(&mut self, other: &Field, f: impl Fn(f64, f64) -> f64 + Sync) {
        assert_eq!(self.grid, other.grid, "field grids differ");
        let o = other.values.as_slice();
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            self.values
                .par_iter_mut()
                .with_min_len(1024)
                .zip(o.par_iter())
                .for_each(|(a, b)| *a = f(*a, *b));
        }
        #[cfg(not(feature = "parallel"))]
        {
            for (a, b) in self.values.iter_mut().zip(o) {
                *a = f(*a, *b);
            }
        }
    }

    /// Elementwise map into a new field.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Field {
        let mut out = self.clone();
        par::map_inplace(&mut out.values, f);
        out
    }

    pub fn scale(&mut self, c: f64) {
        par::map_inplace(&mut self.values, |v| c * v);
    }

    /// `(1/|Omega|) * sum(values) * hx * hy`; exact to a few ulps
    /// (compensated, fixed-order summation).
    pub fn mean(&self) -> f64 {
        par::det_sum(&self.values) * self.grid.cell_area() / self.grid.area()
    }

    /// Subtract the mean; afterwards `mean()` is zero to rounding.
    pub fn remove_mean(&mut self) -> f64 {
        let m = self.mean();
        par::map_inplace(&mut self.values, |v| v - m);
        m
    }

    pub fn min(&self) -> f64 {
        -par::det_max_indexed(self.values.len(), |i| -self.values[i])
    }

    pub fn max(&self) -> f64 {
        par::det_max_indexed(self.values.len(), |i| self.values[i])
    }

    pub fn max_abs(&self) -> f64 {
        par::det_max_indexed(self.values.len(), |i| self.values[i].abs())
    }

    /// L2(Omega) inner product (cell quadrature).
    pub fn inner(&self, other: &Field) -> f64 {
        assert_eq!(self.grid, other.grid, "field grids differ");
        let a = &self.values;
        let b = &other.values;
        par::det_sum_indexed(a.len(), |i| a[i] * b[i]) * self.grid.cell_area()
    }

    /// L2(Omega) norm.
    pub fn norm_l2(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    /// Squared H1 seminorm: sum over interior faces of the squared staggered
    /// difference, weighted by the face measure. Mirror ghosts contribute
    /// nothing (zero difference across the boundary), matching the discrete
    /// summation-by-parts identity `<-lap(z), z> = |grad z|^2`.
    pub fn h1_seminorm_sq(&self) -> f64 {
        let nx = self.grid.nx();
        let ny = self.grid.ny();
        let hx = self.grid.hx();
        let hy = self.grid.hy();
        let v = &self.values;
        // x-faces: (nx-1) per row; weight hy/hx.
        let wx = hy / hx;
        let sx = par::det_sum_indexed(ny * (nx - 1), |k| {
            let j = k / (nx - 1);
            let i = k % (nx - 1);
            let d = v[j * nx + i + 1] - v[j * nx + i];
            d * d
        });
        // y-faces: nx per row, (ny-1) rows; weight hx/hy.
        let wy = hx / hy;
        let sy = par::det_sum_indexed((ny - 1) * nx, |k| {
            let d = v[k + nx] - v[k];
            d * d
        });
        wx * sx + wy * sy
    }

    /// Squared H1 norm: `|.|_{L2}^2 + |grad .|_{L2}^2`.
    pub fn h1_norm_sq(&self) -> f64 {
        self.inner(self) + self.h1_seminorm_sq()
    }

    /// Linear combination `a*self + b*other` into a new field.
    pub fn lin_comb(&self, a: f64, b: f64, other: &Field) -> Field {
        assert_eq!(self.grid, other.grid, "field grids differ");
        let s = &self.values;
        let o = &other.values;
        let mut out = vec![0.0; s.len()];
        par::fill_indexed(&mut out, |i| a * s[i] + b * o[i]);
        Field {
            grid: self.grid,
            values: out,
        }
    }

    /// Difference `self - other`.
    pub fn sub(&self, other: &Field) -> Field {
        self.lin_comb(1.0, -1.0, other)
    }
}

/// 5-point Neumann Laplacian with mirror ghost cells. Symmetric, negative
/// semidefinite, kernel = constants; every output has zero mean to rounding.
pub fn laplacian_neumann(field: &Field) -> Field {
    let mut out = Field::zeros(field.grid());
    laplacian_neumann_into(field.grid(), field.values(), out.values_mut());
    out
}

/// Slice-level Laplacian kernel, reused by solvers on scratch buffers.
pub fn laplacian_neumann_into(grid: Grid, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(v.len(), grid.len());
    debug_assert_eq!(out.len(), grid.len());
    let nx = grid.nx();
    let ny = grid.ny();
    let ax = 1.0 / (grid.hx() * grid.hx());
    let ay = 1.0 / (grid.hy() * grid.hy());
    par::for_each_row_mut(out, nx, |j, row| {
        let base = j * nx;
        let south = if j > 0 { base - nx } else { base };
        let north = if j + 1 < ny { base + nx } else { base };
        for i in 0..nx {
            let c = v[base + i];
            let w = if i > 0 { v[base + i - 1] } else { c };
            let e = if i + 1 < nx { v[base + i + 1] } else { c };
            let s = v[south + i];
            let n = v[north + i];
            row[i] = ax * ((e - c) + (w - c)) + ay * ((n - c) + (s - c));
        }
    });
}

/// Uniform partition of `[0, t_final]` into `nt` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    nt: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, nt: usize) -> Result<Self, GridError> {
        if nt < 1 || !(t_final > 0.0) || !t_final.is_finite() {
            return Err(GridError::BadTimeGrid { nt, t_final });
        }
        Ok(Self { t_final, nt })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }
    /// Node time `t_n = n * dt`.
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }
    /// Number of nodes (`nt + 1`).
    pub fn n_nodes(&self) -> usize {
        self.nt + 1
    }

    /// Trapezoid weight of node `n` (dt at interior nodes, dt/2 at the ends).
    pub fn trapezoid_weight(&self, n: usize) -> f64 {
        if n == 0 || n == self.nt {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }
}

/// Fields aligned to the nodes of a [`TimeGrid`] (length `nt + 1`).
#[derive(Debug, Clone)]
pub struct FieldSeries {
    fields: Vec<Field>,
}

impl FieldSeries {
    pub fn new(fields: Vec<Field>) -> Self {
        Self { fields }
    }

    pub fn zeros(grid: Grid, tg: &TimeGrid) -> Self {
        Self {
            fields: vec![Field::zeros(grid); tg.n_nodes()],
        }
    }

    pub fn constant(grid: Grid, tg: &TimeGrid, c: f64) -> Self {
        Self {
            fields: vec![Field::constant(grid, c); tg.n_nodes()],
        }
    }

    /// Sample `f(x, y, t_n)` at every node.
    pub fn from_fn(grid: Grid, tg: &TimeGrid, f: impl Fn(f64, f64, f64) -> f64 + Sync) -> Self {
        let fields = (0..tg.n_nodes())
            .map(|n| {
                let t = tg.t(n);
                Field::from_fn(grid, |x, y| f(x, y, t))
            })
            .collect();
        Self { fields }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }
    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
    pub fn at(&self, n: usize) -> &Field {
        &self.fields[n]
    }
    pub fn at_mut(&mut self, n: usize) -> &mut Field {
        &mut self.fields[n]
    }
    pub fn fields(&self) -> &[Field] {
        &self.fields
    }
    pub fn last(&self) -> &Field {
        self.fields.last().expect("nonempty series")
    }

    pub fn check_alignment(&self, tg: &TimeGrid) -> Result<(), GridError> {
        if self.fields.len() != tg.n_nodes() {
            return Err(GridError::LengthMismatch {
                len: self.fields.len(),
                expected: tg.n_nodes(),
            });
        }
        Ok(())
    }

    /// Max over cells of the series' infinity norm.
    pub fn max_abs(&self) -> f64 {
        self.fields
            .iter()
            .map(|f| f.max_abs())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Forward convolution `(1 * v)(t_n) = int_0^{t_n} v`, composite trapezoid.
    /// `(1 * v)(0) = 0` exactly.
    pub fn convolve_forward(&self, tg: &TimeGrid) -> Result<FieldSeries, GridError> {
        self.check_alignment(tg)?;
        let dt = tg.dt();
        let grid = self.fields[0].grid();
        let mut out = Vec::with_capacity(self.fields.len());
        out.push(Field::zeros(grid));
        for n in 1..self.fields.len() {
            let mut next = out[n - 1].clone();
            let prev = &self.fields[n - 1];
            let cur = &self.fields[n];
            let half = 0.5 * dt;
            next.zip_inplace(prev, |acc, p| acc + half * p);
            next.zip_inplace(cur, |acc, c| acc + half * c);
            out.push(next);
        }
        Ok(FieldSeries { fields: out })
    }

    /// Backward convolution `(1 (*) v)(t_n) = int_{t_n}^T v`, composite
    /// trapezoid. `(1 (*) v)(T) = 0` exactly.
    pub fn convolve_backward(&self, tg: &TimeGrid) -> Result<FieldSeries, GridError> {
        self.check_alignment(tg)?;
        let dt = tg.dt();
        let grid = self.fields[0].grid();
        let nt = self.fields.len() - 1;
        let mut out = vec![Field::zeros(grid); self.fields.len()];
        for n in (0..nt).rev() {
            let mut cur = out[n + 1].clone();
            let half = 0.5 * dt;
            cur.zip_inplace(&self.fields[n], |acc, a| acc + half * a);
            cur.zip_inplace(&self.fields[n + 1], |acc, b| acc + half * b);
            out[n] = cur;
        }
        Ok(FieldSeries { fields: out })
    }

    /// Squared L2(Q) norm: trapezoid in time of the squared L2(Omega) norms.
    pub fn l2q_norm_sq(&self, tg: &TimeGrid) -> f64 {
        let mut acc = 0.0;
        for (n, f) in self.fields.iter().enumerate() {
            acc += tg.trapezoid_weight(n) * f.inner(f);
        }
        acc
    }

    /// L2(Q) inner product with another series (same quadrature as
    /// [`Self::l2q_norm_sq`]).
    pub fn l2q_inner(&self, other: &FieldSeries, tg: &TimeGrid) -> f64 {
        assert_eq!(self.len(), other.len(), "series lengths differ");
        let mut acc = 0.0;
        for n in 0..self.fields.len() {
            acc += tg.trapezoid_weight(n) * self.fields[n].inner(&other.fields[n]);
        }
        acc
    }
}

/// Trapezoid cumulative integral of scalar node values, from the right:
/// `out[n] = int_{t_n}^T v` with `out[nt] = 0` exactly.
pub fn trapezoid_tail(values: &[f64], tg: &TimeGrid) -> Vec<f64> {
    assert_eq!(values.len(), tg.n_nodes());
    let dt = tg.dt();
    let mut out = vec![0.0; values.len()];
    for n in (0..values.len() - 1).rev() {
        out[n] = out[n + 1] + 0.5 * dt * (values[n] + values[n + 1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid8() -> Grid {
        Grid::new(8, 8, 1.0, 1.0).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_shapes() {
        assert!(Grid::new(1, 8, 1.0, 1.0).is_err());
        assert!(Grid::new(8, 8, 0.0, 1.0).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let g = Grid::new(16, 12, 2.0, 3.0).unwrap();
        let f = Field::constant(g, 2.5);
        assert!((f.mean() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn mean_of_cosine_vanishes() {
        let g = Grid::new(16, 12, 2.0, 3.0).unwrap();
        let lx = g.lx();
        let f = Field::from_fn(g, |x, _| (PI * x / lx).cos());
        assert!(f.mean().abs() < 1e-13, "mean {:e}", f.mean());
    }

    #[test]
    fn mean_is_linear() {
        let g = grid8();
        let a = Field::from_fn(g, |x, y| x * x - y);
        let b = Field::from_fn(g, |x, y| (3.0 * x + y).sin());
        let sum = a.lin_comb(1.0, 1.0, &b);
        assert!((sum.mean() - (a.mean() + b.mean())).abs() < 1e-14);
    }

    #[test]
    fn laplacian_kills_constants() {
        let g = grid8();
        let f = Field::constant(g, 3.7);
        let lap = laplacian_neumann(&f);
        assert_eq!(lap.max_abs(), 0.0);
    }

    #[test]
    fn laplacian_eigenfield_x_cosine() {
        // cos(pi x / lx) sampled at cell centers is a discrete eigenfunction
        // with eigenvalue -(2/hx^2)(1 - cos(pi hx / lx)).
        let g = Grid::new(8, 8, 2.0, 1.0).unwrap();
        let lx = g.lx();
        let f = Field::from_fn(g, |x, _| (PI * x / lx).cos());
        let lap = laplacian_neumann(&f);
        let hx = g.hx();
        let lam = 2.0 / (hx * hx) * (1.0 - (PI * hx / lx).cos());
        for (l, v) in lap.values().iter().zip(f.values()) {
            assert!((l + lam * v).abs() < 1e-11, "lap {l} vs {}", -lam * v);
        }
    }

    #[test]
    fn laplacian_mean_vanishes_on_random_field() {
        let g = grid8();
        // deterministic pseudo-random values
        let f = Field::from_fn(g, |x, y| ((x * 127.3 + y * 311.7).sin() * 43758.5453).fract());
        let lap = laplacian_neumann(&f);
        assert!(lap.mean().abs() < 1e-13, "mean {:e}", lap.mean());
    }

    #[test]
    fn convolve_constant_is_linear_in_time() {
        let g = grid8();
        let tg = TimeGrid::new(2.0, 8).unwrap();
        let c = 1.7;
        let v = FieldSeries::constant(g, &tg, c);
        let fwd = v.convolve_forward(&tg).unwrap();
        for n in 0..tg.n_nodes() {
            let expect = c * tg.t(n);
            assert!(
                (fwd.at(n).values()[0] - expect).abs() < 1e-13,
                "node {n}: {} vs {expect}",
                fwd.at(n).values()[0]
            );
        }
        assert_eq!(fwd.at(0).max_abs(), 0.0);
    }

    #[test]
    fn forward_plus_backward_is_total_integral() {
        let g = grid8();
        let tg = TimeGrid::new(1.0, 7).unwrap();
        let v = FieldSeries::from_fn(g, &tg, |x, y, t| (x + t).sin() * (1.0 + y));
        let fwd = v.convolve_forward(&tg).unwrap();
        let bwd = v.convolve_backward(&tg).unwrap();
        let total = fwd.last();
        assert_eq!(bwd.last().max_abs(), 0.0);
        for n in 0..tg.n_nodes() {
            let s = fwd.at(n).lin_comb(1.0, 1.0, bwd.at(n));
            let d = s.sub(total);
            assert!(d.max_abs() < 1e-13, "split identity at node {n}: {:e}", d.max_abs());
        }
    }

    #[test]
    fn backward_convolution_exact_on_linear_integrand() {
        // v(t) = t on [0,1] with nt = 4: (1 (*) v)(0) = 1/2 exactly.
        let g = grid8();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let v = FieldSeries::from_fn(g, &tg, |_, _, t| t);
        let bwd = v.convolve_backward(&tg).unwrap();
        assert_eq!(bwd.at(0).values()[0], 0.5);
    }

    #[test]
    fn convolve_checks_alignment() {
        let g = grid8();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let v = FieldSeries::new(vec![Field::zeros(g); 3]);
        assert!(matches!(
            v.convolve_forward(&tg),
            Err(GridError::LengthMismatch { .. })
        ));
    }
}
