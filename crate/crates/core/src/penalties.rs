//! Convex penalties `J`: values, proximal maps, subgradients and Bregman
//! divergences, all with respect to the grid inner product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_slices, Grid, Signal};
use crate::operators::conjugate_gradient;

pub const TV_GAP_TOL: f64 = 1e-8;
pub const TV_MAX_ITER: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    /// `½‖u‖²`.
    SqL2,
    /// Squared forward differences. With `paper_scaling` each squared raw
    /// difference is weighted by `h` (in 1-D: `(1/n)Σ(u_{k+1}-u_k)²`);
    /// otherwise difference quotients give the Dirichlet energy `∫|∇u|²`.
    SqH1 {
        #[serde(default = "yes")]
        paper_scaling: bool,
    },
    /// Isotropic total variation `h Σ |∇_h u|`, Neumann boundary.
    Tv,
    /// `∫ u log u`; values and Bregman divergences only.
    Negentropy,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct BregmanResult {
    pub value: f64,
    pub subgradient_used: Signal,
}

/// Cell spacings `(h_rows, h_cols)`; 1-D grids are a single row.
fn spacings(grid: &Grid) -> (f64, f64) {
    let (r, c) = grid.shape2();
    (1.0 / r as f64, 1.0 / c as f64)
}

impl Penalty {
    pub fn is_quadratic(&self) -> bool {
        matches!(self, Self::SqL2 | Self::SqH1 { .. })
    }

    /// Per-axis weights `(w_rows, w_cols)` of the squared raw differences.
    fn h1_weights(&self, grid: &Grid) -> (f64, f64) {
        let h = grid.cell_measure();
        let (hy, hx) = spacings(grid);
        match self {
            Self::SqH1 { paper_scaling: true } => (h, h),
            _ => (h / (hy * hy), h / (hx * hx)),
        }
    }

    pub fn eval(&self, u: &Signal) -> Result<f64> {
        let grid = u.grid();
        let h = grid.cell_measure();
        let v = u.values();
        match self {
            Self::SqL2 => Ok(0.5 * inner_slices(v, v, h)),
            Self::SqH1 { .. } => {
                let (wy, wx) = self.h1_weights(grid);
                let (gy, gx) = raw_differences(grid, v);
                Ok(wy * gy.iter().map(|d| d * d).sum::<f64>() + wx * gx.iter().map(|d| d * d).sum::<f64>())
            }
            Self::Tv => Ok(h * grad_magnitudes(grid, v).iter().sum::<f64>()),
            Self::Negentropy => {
                if let Some(x) = v.iter().find(|x| **x < 0.0) {
                    return Err(Error::Domain(format!("negentropy needs u ≥ 0, found {x}")));
                }
                Ok(h * v.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>())
            }
        }
    }

    /// `argmin_w ½‖w - v‖² + τ J(w)`.
    pub fn prox(&self, v: &Signal, tau: f64) -> Result<Signal> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        match self {
            Self::SqL2 => Ok(v.scale(1.0 / (1.0 + tau))),
            Self::SqH1 { .. } => {
                let (wy, wx) = self.h1_weights(v.grid());
                let h = v.grid().cell_measure();
                let diag = vec![1.0; v.len()];
                let x = h1_solve(v.grid(), &diag, 2.0 * tau * wy / h, 2.0 * tau * wx / h, v.values(), None)?;
                Ok(v.with_values(x))
            }
            Self::Tv => prox_tv(v, tau),
            Self::Negentropy => Err(Error::InvalidParameter("negentropy has no proximal map here".into())),
        }
    }

    /// A canonical element of `∂J(u)`: the gradient for smooth kinds, the
    /// normalized-gradient divergence for TV.
    pub fn subgradient(&self, u: &Signal) -> Result<Signal> {
        match self {
            Self::SqL2 => Ok(u.clone()),
            Self::SqH1 { .. } => Ok(u.with_values(self.h1_gradient(u.grid(), u.values()))),
            Self::Tv => tv_subgradient_witness(u),
            Self::Negentropy => {
                if let Some(x) = u.values().iter().find(|x| **x <= 0.0) {
                    return Err(Error::Domain(format!("negentropy subgradient needs u > 0, found {x}")));
                }
                Ok(u.map(|x| 1.0 + x.ln()))
            }
        }
    }

    /// Gradient of the quadratic H¹ form w.r.t. the grid inner product:
    /// `(2/h) Σ_a w_a D_aᵀ D_a u`, a scaled Neumann Laplacian `-Δu`.
    pub(crate) fn h1_gradient(&self, grid: &Grid, u: &[f64]) -> Vec<f64> {
        let (wy, wx) = self.h1_weights(grid);
        let h = grid.cell_measure();
        let mut out = vec![0.0; u.len()];
        laplacian_add(grid, 2.0 * wy / h, 2.0 * wx / h, u, &mut out);
        out
    }

    /// Weights `(c_rows, c_cols)` with `∇J = Σ_a c_a D_aᵀ D_a` for sq_h1.
    pub(crate) fn h1_coefficients(&self, grid: &Grid) -> (f64, f64) {
        let (wy, wx) = self.h1_weights(grid);
        let h = grid.cell_measure();
        (2.0 * wy / h, 2.0 * wx / h)
    }

    /// `D_J^ξ(v, u) = J(v) - J(u) - ⟨ξ, v - u⟩`; `xi = None` uses [`subgradient`](Self::subgradient).
    pub fn bregman(&self, v: &Signal, u: &Signal, xi: Option<&Signal>) -> Result<BregmanResult> {
        v.grid().check_same(u.grid())?;
        let h = v.grid().cell_measure();
        let xi = match xi {
            Some(x) => {
                x.grid().check_same(u.grid())?;
                x.clone()
            }
            None => self.subgradient(u)?,
        };
        let canonical = xi.values() == self.subgradient(u).map(|s| s.into_values()).unwrap_or_default().as_slice();
        let value = match self {
            Self::SqL2 if canonical => {
                let d = v - u;
                0.5 * d.norm().powi(2)
            }
            Self::SqH1 { .. } if canonical => self.eval(&(v - u))?,
            Self::Negentropy if canonical => {
                if v.values().iter().any(|x| *x < 0.0) {
                    return Err(Error::Domain("KL divergence needs v ≥ 0".into()));
                }
                h * v
                    .values()
                    .iter()
                    .zip(u.values())
                    .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() - a + b } else { b })
                    .sum::<f64>()
            }
            _ => {
                let dv = v - u;
                self.eval(v)? - self.eval(u)? - inner_slices(xi.values(), dv.values(), h)
            }
        };
        let scale = 1.0 + self.eval(v)?.abs() + self.eval(u)?.abs();
        if value < -1e-10 * scale {
            return Err(Error::Domain(format!(
                "negative Bregman divergence {value:.3e}: xi is not a subgradient at u"
            )));
        }
        Ok(BregmanResult {
            value,
            subgradient_used: xi,
        })
    }
}

/// Raw forward differences `(u_{r+1,c} - u_{r,c}, u_{r,c+1} - u_{r,c})`,
/// zero on the last row/column.
fn raw_differences(grid: &Grid, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = grid.shape2();
    let mut gy = vec![0.0; u.len()];
    let mut gx = vec![0.0; u.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if r + 1 < rows {
                gy[i] = u[i + cols] - u[i];
            }
            if c + 1 < cols {
                gx[i] = u[i + 1] - u[i];
            }
        }
    }
    (gy, gx)
}

/// Gradient `G u` by difference quotients.
fn gradient(grid: &Grid, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (hy, hx) = spacings(grid);
    let (mut gy, mut gx) = raw_differences(grid, u);
    gy.iter_mut().for_each(|x| *x /= hy);
    gx.iter_mut().for_each(|x| *x /= hx);
    (gy, gx)
}

/// `Gᵀ p` (Euclidean adjoint of [`gradient`]), i.e. `-div p`.
fn gradient_adjoint(grid: &Grid, py: &[f64], px: &[f64]) -> Vec<f64> {
    let (rows, cols) = grid.shape2();
    let (hy, hx) = spacings(grid);
    let mut out = vec![0.0; py.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if r + 1 < rows {
                out[i] -= py[i] / hy;
                out[i + cols] += py[i] / hy;
            }
            if c + 1 < cols {
                out[i] -= px[i] / hx;
                out[i + 1] += px[i] / hx;
            }
        }
    }
    out
}

fn grad_magnitudes(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let (gy, gx) = gradient(grid, u);
    gy.iter().zip(&gx).map(|(a, b)| a.hypot(*b)).collect()
}

/// `out += cy·D_yᵀD_y u + cx·D_xᵀD_x u` (raw differences, Neumann).
fn laplacian_add(grid: &Grid, cy: f64, cx: f64, u: &[f64], out: &mut [f64]) {
    let (rows, cols) = grid.shape2();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if r + 1 < rows {
                let d = cy * (u[i + cols] - u[i]);
                out[i] -= d;
                out[i + cols] += d;
            }
            if c + 1 < cols {
                let d = cx * (u[i + 1] - u[i]);
                out[i] -= d;
                out[i + 1] += d;
            }
        }
    }
}

/// Solves `(diag + cy·D_yᵀD_y + cx·D_xᵀD_x) x = rhs`; tridiagonal
/// elimination in 1-D, conjugate gradients in 2-D.
pub(crate) fn h1_solve(
    grid: &Grid,
    diag: &[f64],
    cy: f64,
    cx: f64,
    rhs: &[f64],
    x0: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let (rows, cols) = grid.shape2();
    if rows == 1 {
        let n = cols;
        let mut sub = vec![0.0; n];
        let mut main = diag.to_vec();
        let mut sup = vec![0.0; n];
        for i in 0..n {
            if i + 1 < n {
                main[i] += cx;
                main[i + 1] += cx;
                sup[i] = -cx;
                sub[i + 1] = -cx;
            }
        }
        return Ok(thomas(&sub, &main, &sup, rhs));
    }
    let (x, _) = conjugate_gradient(
        |x, out| {
            for i in 0..x.len() {
                out[i] = diag[i] * x[i];
            }
            laplacian_add(grid, cy, cx, x, out);
        },
        rhs,
        x0,
        1e-13,
        20 * rhs.len() + 100,
    )?;
    Ok(x)
}

/// Tridiagonal solve; `sub[0]` and `sup[n-1]` are ignored.
fn thomas(sub: &[f64], main: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = main.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / main[0];
    d[0] = rhs[0] / main[0];
    for i in 1..n {
        let m = main[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / m;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m;
    }
    let mut x = d;
    for i in (0..n.saturating_sub(1)).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

/// TV proximal map: exact direct algorithm in 1-D, dual fast projected
/// gradient with duality-gap stopping in 2-D.
pub fn prox_tv(v: &Signal, tau: f64) -> Result<Signal> {
    let grid = v.grid();
    if grid.shape2().0 == 1 {
        let lambda = tau / grid.cell_measure();
        return Ok(v.with_values(tv1d_denoise(v.values(), lambda)));
    }
    let (x, _) = prox_tv_dual(grid, v.values(), tau, TV_GAP_TOL, TV_MAX_ITER, None)?;
    Ok(v.with_values(x))
}

/// Dual solver for `argmin_w ½Σ(w - v)² + τ Σ|G w|` (the grid measure
/// cancels). Returns the primal point and the final dual field.
pub fn prox_tv_dual(
    grid: &Grid,
    v: &[f64],
    tau: f64,
    gap_tol: f64,
    max_iter: usize,
    warm: Option<(Vec<f64>, Vec<f64>)>,
) -> Result<(Vec<f64>, (Vec<f64>, Vec<f64>))> {
    let n = v.len();
    let (hy, hx) = spacings(grid);
    let rows = grid.shape2().0;
    let lg = 4.0 / (hx * hx) + if rows > 1 { 4.0 / (hy * hy) } else { 0.0 };
    let step = 1.0 / (tau * tau * lg);
    let (mut py, mut px) = warm.unwrap_or_else(|| (vec![0.0; n], vec![0.0; n]));
    let (mut qy, mut qx) = (py.clone(), px.clone());
    let mut t = 1.0f64;
    let h = grid.cell_measure();
    let scale = 1.0 + inner_slices(v, v, h);
    let primal = |py: &[f64], px: &[f64]| -> Vec<f64> {
        let gt = gradient_adjoint(grid, py, px);
        v.iter().zip(&gt).map(|(a, b)| a - tau * b).collect()
    };
    let gap_of = |w: &[f64], py: &[f64], px: &[f64]| -> f64 {
        let (gy, gx) = gradient(grid, w);
        let mut g = 0.0;
        for i in 0..n {
            g += gy[i].hypot(gx[i]) - gy[i] * py[i] - gx[i] * px[i];
        }
        h * tau * g
    };
    let mut gap = f64::INFINITY;
    for it in 0..max_iter {
        let w = primal(&qy, &qx);
        let (gy, gx) = gradient(grid, &w);
        let (oy, ox) = (py.clone(), px.clone());
        for i in 0..n {
            let mut a = qy[i] + step * tau * gy[i];
            let mut b = qx[i] + step * tau * gx[i];
            let m = a.hypot(b);
            if m > 1.0 {
                a /= m;
                b /= m;
            }
            py[i] = a;
            px[i] = b;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        for i in 0..n {
            qy[i] = py[i] + mom * (py[i] - oy[i]);
            qx[i] = px[i] + mom * (px[i] - ox[i]);
        }
        t = t_next;
        if it % 10 == 9 || it + 1 == max_iter {
            let w = primal(&py, &px);
            gap = gap_of(&w, &py, &px);
            if gap <= gap_tol * scale {
                return Ok((w, (py, px)));
            }
        }
    }
    Err(Error::NotConverged {
        what: "TV proximal map",
        iterations: max_iter,
        residual: gap,
    })
}

/// Exact minimizer of `½Σ(x - y)² + λΣ|x_{k+1} - x_k|` (Condat's direct
/// algorithm).
pub fn tv1d_denoise(input: &[f64], lambda: f64) -> Vec<f64> {
    let width = input.len();
    let mut output = vec![0.0; width];
    if width == 0 {
        return output;
    }
    let (mut k, mut k0) = (0usize, 0usize);
    let (mut umin, mut umax) = (lambda, -lambda);
    let (mut vmin, mut vmax) = (input[0] - lambda, input[0] + lambda);
    let (mut kplus, mut kminus) = (0usize, 0usize);
    let twolambda = 2.0 * lambda;
    let minlambda = -lambda;
    loop {
        while k == width - 1 {
            if umin < 0.0 {
                loop {
                    output[k0] = vmin;
                    k0 += 1;
                    if k0 > kminus {
                        break;
                    }
                }
                k = k0;
                kminus = k0;
                vmin = input[k0];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                loop {
                    output[k0] = vmax;
                    k0 += 1;
                    if k0 > kplus {
                        break;
                    }
                }
                k = k0;
                kplus = k0;
                vmax = input[k0];
                umax = minlambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                loop {
                    output[k0] = vmin;
                    k0 += 1;
                    if k0 > k {
                        break;
                    }
                }
                return output;
            }
        }
        umin += input[k + 1] - vmin;
        if umin < minlambda {
            loop {
                output[k0] = vmin;
                k0 += 1;
                if k0 > kminus {
                    break;
                }
            }
            k = k0;
            kplus = k0;
            kminus = k0;
            vmin = input[k0];
            vmax = vmin + twolambda;
            umin = lambda;
            umax = minlambda;
            continue;
        }
        umax += input[k + 1] - vmax;
        if umax > lambda {
            loop {
                output[k0] = vmax;
                k0 += 1;
                if k0 > kplus {
                    break;
                }
            }
            k = k0;
            kplus = k0;
            kminus = k0;
            vmax = input[k0];
            vmin = vmax - twolambda;
            umin = lambda;
            umax = minlambda;
        } else {
            k += 1;
            if umin >= lambda {
                kminus = k;
                vmin += (umin - lambda) / (kminus - k0 + 1) as f64;
                umin = lambda;
            }
            if umax <= minlambda {
                kplus = k;
                vmax += (umax + lambda) / (kplus - k0 + 1) as f64;
                umax = minlambda;
            }
        }
    }
}

/// `ξ = Gᵀ z ∈ ∂TV(u)` with `z = G u/|G u|` wherever the gradient is
/// nonzero and `z = 0` elsewhere. Satisfies `⟨ξ, u⟩ = TV(u)`.
pub fn tv_subgradient_witness(u: &Signal) -> Result<Signal> {
    tv_subgradient_witness_with_field(u, |_| (0.0, 0.0))
}

/// As [`tv_subgradient_witness`], but where `G u = 0` the field `z` is taken
/// from `extension(center) = (z_rows, z_cols)`, clamped to the unit disc.
pub fn tv_subgradient_witness_with_field(
    u: &Signal,
    extension: impl Fn(&[f64]) -> (f64, f64),
) -> Result<Signal> {
    let grid = u.grid();
    let (gy, gx) = gradient(grid, u.values());
    let n = u.len();
    let (mut zy, mut zx) = (vec![0.0; n], vec![0.0; n]);
    let (rows, cols) = grid.shape2();
    let (hy, hx) = spacings(grid);
    let scale = u.max_abs().max(f64::MIN_POSITIVE) / hx.min(hy);
    for i in 0..n {
        let m = gy[i].hypot(gx[i]);
        if m > 1e-12 * scale {
            zy[i] = gy[i] / m;
            zx[i] = gx[i] / m;
        } else {
            let (r, c) = (i / cols, i % cols);
            // the field lives on cell edges; Neumann edges carry nothing
            let (mut a, mut b) = extension(&grid.center(i));
            if r + 1 == rows {
                a = 0.0;
            }
            if c + 1 == cols {
                b = 0.0;
            }
            let m = a.hypot(b);
            if !m.is_finite() {
                return Err(Error::Domain("non-finite extension field".into()));
            }
            if m > 1.0 {
                a /= m;
                b /= m;
            }
            zy[i] = a;
            zx[i] = b;
        }
    }
    Ok(u.with_values(gradient_adjoint(grid, &zy, &zx)))
}
