//! DCT-based diagonal solvers for the constant-coefficient Neumann operators.
//!
//! On the cell-centered mirror-closure grid the 5-point Neumann Laplacian is
//! diagonalized exactly by the separable DCT-II basis
//! `cos(pi kx (2i+1) / (2 nx)) cos(pi ky (2j+1) / (2 ny))` with eigenvalues
//! `lambda = (2/hx^2)(1 - cos(pi kx/nx)) + (2/hy^2)(1 - cos(pi ky/ny))` of
//! `-lap`. This gives exact solves for the inverse Neumann Laplacian `N`
//! (zero mode pinned to zero) and for Helmholtz shifts `(a I - b lap) v = rhs`,
//! plus the dual `V*` norm built from `N`.

use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

use crate::grid::{laplacian_neumann_into, Field, Grid, GridError};
use crate::par;

/// Relative zero-mean tolerance for `inv_laplacian` inputs.
pub const ZERO_MEAN_RTOL: f64 = 1e-10;

/// Cached DCT plans and Laplacian eigenvalues for one grid.
///
/// Cheap to clone (plans are shared); safe to use from multiple threads.
#[derive(Clone)]
pub struct NeumannOps {
    grid: Grid,
    dct_x: Arc<dyn TransformType2And3<f64>>,
    dct_y: Arc<dyn TransformType2And3<f64>>,
    /// Eigenvalues of `-lap` indexed like cell data (`ky * nx + kx`).
    eigenvalues: Vec<f64>,
}

impl NeumannOps {
    pub fn new(grid: Grid) -> Self {
        let mut planner = DctPlanner::new();
        let dct_x = planner.plan_dct2(grid.nx());
        let dct_y = planner.plan_dct2(grid.ny());
        let nx = grid.nx();
        let ny = grid.ny();
        let hx = grid.hx();
        let hy = grid.hy();
        let mut eigenvalues = vec![0.0; nx * ny];
        for ky in 0..ny {
            let ly_term = 2.0 / (hy * hy)
                * (1.0 - (std::f64::consts::PI * ky as f64 / ny as f64).cos());
            for kx in 0..nx {
                let lx_term = 2.0 / (hx * hx)
                    * (1.0 - (std::f64::consts::PI * kx as f64 / nx as f64).cos());
                eigenvalues[ky * nx + kx] = lx_term + ly_term;
            }
        }
        Self {
            grid,
            dct_x,
            dct_y,
            eigenvalues,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Eigenvalue of `-lap` for the first nonconstant x-mode; the smallest
    /// positive eigenvalue is `min` of this and the y analogue.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Forward 2-D DCT-II (analysis) of cell data, in place.
    ///
    /// Unnormalized rustdct convention; `inverse` applies the matching
    /// `2/nx * 2/ny` factor so `inverse(forward(x)) == x` to rounding.
    pub fn forward(&self, data: &mut [f64]) {
        debug_assert_eq!(data.len(), self.grid.len());
        self.transform_rows(data, &self.dct_x, true);
        self.transpose_in_place(data);
        self.transform_rows_t(data, &self.dct_y, true);
        self.transpose_back(data);
    }

    /// Inverse 2-D transform (DCT-III synthesis with normalization).
    pub fn inverse(&self, data: &mut [f64]) {
        debug_assert_eq!(data.len(), self.grid.len());
        self.transform_rows(data, &self.dct_x, false);
        self.transpose_in_place(data);
        self.transform_rows_t(data, &self.dct_y, false);
        self.transpose_back(data);
        let scale = 4.0 / (self.grid.nx() as f64 * self.grid.ny() as f64);
        par::map_inplace(data, |v| scale * v);
    }

    fn transform_rows(&self, data: &mut [f64], plan: &Arc<dyn TransformType2And3<f64>>, fwd: bool) {
        let nx = self.grid.nx();
        let plan = plan.clone();
        let scratch_len = plan.get_scratch_len();
        par::for_each_row_mut(data, nx, move |_j, row| {
            let mut scratch = vec![0.0; scratch_len];
            if fwd {
                plan.process_dct2_with_scratch(row, &mut scratch);
            } else {
                plan.process_dct3_with_scratch(row, &mut scratch);
            }
        });
    }

    // Same, but on the transposed buffer (nx rows of length ny).
    fn transform_rows_t(&self, data: &mut [f64], plan: &Arc<dyn TransformType2And3<f64>>, fwd: bool) {
        let ny = self.grid.ny();
        let plan = plan.clone();
        let scratch_len = plan.get_scratch_len();
        par::for_each_row_mut(data, ny, move |_j, row| {
            let mut scratch = vec![0.0; scratch_len];
            if fwd {
                plan.process_dct2_with_scratch(row, &mut scratch);
            } else {
                plan.process_dct3_with_scratch(row, &mut scratch);
            }
        });
    }

    fn transpose_in_place(&self, data: &mut [f64]) {
        let nx = self.grid.nx();
        let ny = self.grid.ny();
        let src = data.to_vec();
        par::fill_indexed(data, |idx| {
            // destination is nx rows of length ny: idx = i * ny + j
            let i = idx / ny;
            let j = idx % ny;
            src[j * nx + i]
        });
    }

    fn transpose_back(&self, data: &mut [f64]) {
        let nx = self.grid.nx();
        let ny = self.grid.ny();
        let src = data.to_vec();
        par::fill_indexed(data, |idx| {
            let j = idx / nx;
            let i = idx % nx;
            src[i * ny + j]
        });
    }

    /// Apply the stencil Laplacian (same operator the spectral solves invert).
    pub fn laplacian(&self, field: &Field) -> Field {
        let mut out = Field::zeros(self.grid);
        laplacian_neumann_into(self.grid, field.values(), out.values_mut());
        out
    }

    /// Inverse Neumann Laplacian `N`: solves `-lap z = psi` with
    /// `mean(z) = 0`, exactly in DCT space.
    ///
    /// Fails with [`GridError::NonZeroMean`] when `|mean(psi)|` exceeds
    /// `1e-10 * max|psi|` (absolute floor `1e-300`): the caller must subtract
    /// the mean first.
    pub fn inv_laplacian(&self, psi: &Field) -> Result<Field, GridError> {
        let mean = psi.mean();
        let tol = ZERO_MEAN_RTOL * psi.max_abs().max(1e-300);
        if mean.abs() > tol {
            return Err(GridError::NonZeroMean { mean, tol });
        }
        Ok(self.inv_laplacian_unchecked(psi))
    }

    /// `N` without the zero-mean precondition check; the mode-0 coefficient is
    /// discarded either way. Output mean is removed exactly.
    pub fn inv_laplacian_unchecked(&self, psi: &Field) -> Field {
        let mut buf = psi.values().to_vec();
        self.forward(&mut buf);
        buf[0] = 0.0;
        let eig = &self.eigenvalues;
        #[allow(clippy::needless_range_loop)]
        for k in 1..buf.len() {
            buf[k] /= eig[k];
        }
        self.inverse(&mut buf);
        let mut out = Field::from_values(self.grid, buf).expect("shape preserved");
        out.remove_mean();
        out
    }

    /// Solve `(a I - b lap) v = rhs` (requires `a + b*lambda > 0` on every
    /// retained mode; with `a > 0`, `b >= 0` this always holds).
    pub fn helmholtz_solve(&self, a: f64, b: f64, rhs: &Field) -> Field {
        let mut buf = rhs.values().to_vec();
        self.forward(&mut buf);
        let eig = &self.eigenvalues;
        for (k, v) in buf.iter_mut().enumerate() {
            *v /= a + b * eig[k];
        }
        self.inverse(&mut buf);
        Field::from_values(self.grid, buf).expect("shape preserved")
    }

    /// Dual (`V*`-type) norm: `sqrt(|grad N(psi - mean)|^2 + mean^2)`.
    ///
    /// The gradient norm uses the staggered face differences of
    /// [`Field::h1_seminorm_sq`], for which `<psi - mean, N(psi - mean)> =
    /// |grad N(psi - mean)|^2` holds discretely.
    pub fn dual_norm(&self, psi: &Field) -> f64 {
        let mean = psi.mean();
        let mut zero_mean = psi.clone();
        zero_mean.remove_mean();
        let z = self.inv_laplacian_unchecked(&zero_mean);
        (z.h1_seminorm_sq() + mean * mean).max(0.0).sqrt()
    }

    /// Diagonal (DCT-space) preconditioner solve for the reduced zero-mean
    /// operator `beta N + (-lap) + dbar I`: divides mode `k != 0` by
    /// `beta / lambda_k + lambda_k + dbar` (clamped positive) and zeroes the
    /// mean mode.
    pub fn precond_reduced(&self, beta: f64, dbar: f64, r: &Field) -> Field {
        let mut buf = r.values().to_vec();
        self.forward(&mut buf);
        buf[0] = 0.0;
        let eig = &self.eigenvalues;
        let floor = 1e-8 * beta.max(1.0);
        #[allow(clippy::needless_range_loop)]
        for k in 1..buf.len() {
            let sym = beta / eig[k] + eig[k] + dbar;
            buf[k] /= sym.max(floor);
        }
        self.inverse(&mut buf);
        Field::from_values(self.grid, buf).expect("shape preserved")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ops(nx: usize, ny: usize, lx: f64, ly: f64) -> NeumannOps {
        NeumannOps::new(Grid::new(nx, ny, lx, ly).unwrap())
    }

    fn pseudo_random(grid: Grid, seed: f64) -> Field {
        Field::from_fn(grid, |x, y| {
            ((x * 127.3 + y * 311.7 + seed).sin() * 43758.5453).fract() - 0.5
        })
    }

    #[test]
    fn roundtrip_forward_inverse() {
        let o = ops(12, 10, 1.5, 0.8);
        let f = pseudo_random(o.grid(), 1.0);
        let mut buf = f.values().to_vec();
        o.forward(&mut buf);
        o.inverse(&mut buf);
        for (a, b) in buf.iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_diagonalizes_laplacian() {
        // -lap applied in real space must equal eigenvalue multiplication in
        // DCT space.
        let o = ops(8, 6, 1.0, 2.0);
        let f = pseudo_random(o.grid(), 2.0);
        let lap = o.laplacian(&f);
        let mut lap_hat = lap.values().to_vec();
        o.forward(&mut lap_hat);
        let mut f_hat = f.values().to_vec();
        o.forward(&mut f_hat);
        for k in 0..f_hat.len() {
            let expect = -o.eigenvalues()[k] * f_hat[k];
            assert!(
                (lap_hat[k] - expect).abs() < 1e-9 * (1.0 + expect.abs()),
                "mode {k}: {} vs {expect}",
                lap_hat[k]
            );
        }
    }

    #[test]
    fn inv_laplacian_of_zero_is_zero() {
        let o = ops(8, 8, 1.0, 1.0);
        let z = o.inv_laplacian(&Field::zeros(o.grid())).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn inv_laplacian_eigenfield() {
        let o = ops(16, 8, 2.0, 1.0);
        let g = o.grid();
        let lx = g.lx();
        let psi = Field::from_fn(g, |x, _| (PI * x / lx).cos());
        let hx = g.hx();
        let lam = 2.0 / (hx * hx) * (1.0 - (PI * hx / lx).cos());
        let z = o.inv_laplacian(&psi).unwrap();
        for (zv, pv) in z.values().iter().zip(psi.values()) {
            assert!((zv - pv / lam).abs() < 1e-12);
        }
    }

    #[test]
    fn inv_laplacian_rejects_nonzero_mean() {
        let o = ops(8, 8, 1.0, 1.0);
        let psi = Field::constant(o.grid(), 0.3);
        assert!(matches!(
            o.inv_laplacian(&psi),
            Err(GridError::NonZeroMean { .. })
        ));
    }

    #[test]
    fn inv_laplacian_roundtrip_recovers_zero_mean_part() {
        let o = ops(12, 12, 1.0, 1.0);
        let z0 = pseudo_random(o.grid(), 3.0);
        let lap = o.laplacian(&z0);
        let neg_lap = lap.map(|v| -v);
        let z = o.inv_laplacian(&neg_lap).unwrap();
        let mut expected = z0.clone();
        expected.remove_mean();
        let diff = z.sub(&expected);
        assert!(diff.max_abs() < 1e-10, "roundtrip error {:e}", diff.max_abs());
    }

    #[test]
    fn dual_norm_of_constant_is_abs() {
        let o = ops(8, 8, 2.0, 2.0);
        let f = Field::constant(o.grid(), -1.25);
        assert!((o.dual_norm(&f) - 1.25).abs() < 1e-13);
    }

    #[test]
    fn dual_norm_scales_linearly() {
        let o = ops(16, 8, 2.0, 1.0);
        let g = o.grid();
        let lx = g.lx();
        let psi = Field::from_fn(g, |x, _| (PI * x / lx).cos());
        let scaled = psi.map(|v| 3.5 * v);
        let n1 = o.dual_norm(&psi);
        let n2 = o.dual_norm(&scaled);
        assert!((n2 - 3.5 * n1).abs() < 1e-12 * (1.0 + n2));
    }

    #[test]
    fn dual_norm_squared_equals_energy_pairing() {
        // For mean-zero psi: |psi|_*^2 = <psi, N psi> (two independent routes).
        let o = ops(16, 16, 1.0, 1.0);
        let mut psi = pseudo_random(o.grid(), 4.0);
        psi.remove_mean();
        let n = o.dual_norm(&psi);
        let z = o.inv_laplacian(&psi).unwrap();
        let pairing = psi.inner(&z);
        assert!(
            (n * n - pairing).abs() <= 1e-10 * pairing.abs().max(1e-30),
            "norm^2 {:e} vs pairing {:e}",
            n * n,
            pairing
        );
    }

    #[test]
    fn helmholtz_solve_inverts_shifted_operator() {
        let o = ops(12, 10, 1.0, 1.3);
        let rhs = pseudo_random(o.grid(), 5.0);
        let a = 2.0;
        let b = 0.7;
        let v = o.helmholtz_solve(a, b, &rhs);
        // residual a v - b lap(v) - rhs
        let lap = o.laplacian(&v);
        let mut resid = v.clone();
        resid.scale(a);
        resid.axpy(-b, &lap);
        let resid = resid.sub(&rhs);
        assert!(resid.max_abs() < 1e-10, "residual {:e}", resid.max_abs());
    }
}
