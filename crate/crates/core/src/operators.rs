//! Forward operators `K` with adjoints and fast solvers for `(I + ρK*K)u = b`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dictionary::{trig_atom, TrigAtom};
use crate::error::{Error, Result};
use crate::grid::{Grid, Signal};

type C64 = Complex<f64>;

/// Orthonormal system in which a diagonal operator acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Normalized cell indicators `h^{-1/2} χ_i`.
    Cells,
    /// The full real trigonometric basis, same ordering as the dictionary builder.
    Trigonometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    Gaussian,
    Box,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    /// Zero extension outside the unit cube, realized on a doubled grid.
    Padded,
}

/// Operator section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity,
    DiagonalSvd {
        #[serde(default = "default_basis")]
        basis: Basis,
        /// Explicit singular values; overrides `decay`.
        #[serde(default)]
        values: Option<Vec<f64>>,
        /// `s_n = (n+1)^{-decay}` for the 0-based index `n`.
        #[serde(default)]
        decay: f64,
    },
    Convolution {
        kernel: KernelShape,
        #[serde(default)]
        width: f64,
        #[serde(default)]
        boundary: Boundary,
    },
}

fn default_basis() -> Basis {
    Basis::Trigonometric
}

impl OperatorSpec {
    pub fn build(&self, grid: &Grid) -> Result<ForwardOperator> {
        match self {
            Self::Identity => Ok(ForwardOperator::identity(grid)),
            Self::DiagonalSvd { basis, values, decay } => {
                let s = match values {
                    Some(v) => v.clone(),
                    None => (0..grid.len()).map(|n| ((n + 1) as f64).powf(-decay)).collect(),
                };
                ForwardOperator::diagonal_svd(grid, *basis, s)
            }
            Self::Convolution { kernel, width, boundary } => {
                ForwardOperator::convolution(grid, *kernel, *width, *boundary)
            }
        }
    }
}

/// 1-D or 2-D complex FFT on a `rows × cols` row-major buffer.
#[derive(Clone)]
struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: p.plan_fft_forward(cols),
            row_inv: p.plan_fft_inverse(cols),
            col_fwd: p.plan_fft_forward(rows),
            col_inv: p.plan_fft_inverse(rows),
        }
    }

    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn run(&self, buf: &mut [C64], inverse: bool) {
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        if self.rows > 1 {
            let mut column = vec![C64::new(0.0, 0.0); self.rows];
            for c in 0..self.cols {
                for r in 0..self.rows {
                    column[r] = buf[r * self.cols + c];
                }
                col.process(&mut column);
                for r in 0..self.rows {
                    buf[r * self.cols + c] = column[r];
                }
            }
        }
        if inverse {
            let s = 1.0 / self.len() as f64;
            buf.iter_mut().for_each(|z| *z *= s);
        }
    }

    fn forward_real(&self, x: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.run(&mut buf, false);
        buf
    }

    fn inverse_real(&self, mut buf: Vec<C64>) -> Vec<f64> {
        self.run(&mut buf, true);
        buf.into_iter().map(|z| z.re).collect()
    }
}

#[derive(Clone)]
enum Kind {
    Identity,
    Diagonal {
        basis: Basis,
        s: Vec<f64>,
        fft: Option<Fft2>,
    },
    Convolution {
        kernel: Vec<f64>,
        kernel_hat: Vec<C64>,
        fft: Fft2,
        boundary: Boundary,
    },
}

/// A bounded linear map `K` from a grid to itself.
#[derive(Clone)]
pub struct ForwardOperator {
    grid: Grid,
    kind: Kind,
}

impl fmt::Debug for ForwardOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &self.kind {
            Kind::Identity => "identity".to_string(),
            Kind::Diagonal { basis, .. } => format!("diagonal_svd({basis:?})"),
            Kind::Convolution { boundary, .. } => format!("convolution({boundary:?})"),
        };
        f.debug_struct("ForwardOperator")
            .field("grid", &self.grid)
            .field("kind", &name)
            .finish()
    }
}

impl ForwardOperator {
    pub fn identity(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            kind: Kind::Identity,
        }
    }

    /// `K = Σ s_n ⟨·, φ_n⟩ φ_n` for the orthonormal `basis`.
    pub fn diagonal_svd(grid: &Grid, basis: Basis, s: Vec<f64>) -> Result<Self> {
        if s.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "need {} singular values, got {}",
                grid.len(),
                s.len()
            )));
        }
        if s.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter("singular values must be positive and finite".into()));
        }
        let fft = match basis {
            Basis::Cells => None,
            Basis::Trigonometric => {
                if grid.ndim() != 1 {
                    return Err(Error::InvalidGrid("trigonometric basis needs a 1-D grid".into()));
                }
                Some(Fft2::new(1, grid.len()))
            }
        };
        Ok(Self {
            grid: grid.clone(),
            kind: Kind::Diagonal { basis, s, fft },
        })
    }

    /// Convolution with a kernel sampled on the grid and renormalized to
    /// unit mass, so `K` maps constants to constants under periodic boundary.
    pub fn convolution(grid: &Grid, shape: KernelShape, width: f64, boundary: Boundary) -> Result<Self> {
        let (rows, cols) = grid.shape2();
        let (er, ec) = match boundary {
            Boundary::Periodic => (rows, cols),
            Boundary::Padded => (if rows > 1 { 2 * rows } else { 1 }, 2 * cols),
        };
        let hx = grid.spacing(grid.ndim() - 1);
        let hy = if grid.ndim() == 2 { grid.spacing(0) } else { 1.0 };
        let kernel = sample_kernel(shape, width, er, ec, hy, hx)?;
        Self::from_kernel_on(grid, kernel, er, ec, boundary)
    }

    /// Periodic convolution with explicit weights indexed by offset
    /// (index 0 is offset 0, wrapped). Weights are used as given.
    pub fn periodic_kernel(grid: &Grid, kernel: Vec<f64>) -> Result<Self> {
        if kernel.len() != grid.len() {
            return Err(Error::InvalidParameter("kernel length must match the grid".into()));
        }
        let (r, c) = grid.shape2();
        Self::from_kernel_on(grid, kernel, r, c, Boundary::Periodic)
    }

    fn from_kernel_on(grid: &Grid, kernel: Vec<f64>, er: usize, ec: usize, boundary: Boundary) -> Result<Self> {
        if kernel.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("kernel must be finite".into()));
        }
        let fft = Fft2::new(er, ec);
        let kernel_hat = fft.forward_real(&kernel);
        Ok(Self {
            grid: grid.clone(),
            kind: Kind::Convolution {
                kernel,
                kernel_hat,
                fft,
                boundary,
            },
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, Kind::Identity)
    }

    /// Singular values when `K` is diagonal.
    pub fn singular_values(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Diagonal { s, .. } => Some(s),
            _ => None,
        }
    }

    pub fn basis(&self) -> Option<Basis> {
        match &self.kind {
            Kind::Diagonal { basis, .. } => Some(*basis),
            _ => None,
        }
    }

    /// Kernel weights indexed by (wrapped) offset on the working grid.
    pub fn kernel(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Convolution { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    /// Upper bound on `‖K‖²`.
    pub fn norm_sq_bound(&self) -> f64 {
        match &self.kind {
            Kind::Identity => 1.0,
            Kind::Diagonal { s, .. } => s.iter().fold(0.0f64, |m, x| m.max(x * x)),
            Kind::Convolution { kernel_hat, .. } => kernel_hat.iter().fold(0.0f64, |m, z| m.max(z.norm_sqr())),
        }
    }

    pub fn apply(&self, u: &Signal) -> Result<Signal> {
        self.grid.check_same(u.grid())?;
        Ok(u.with_values(self.apply_slice(u.values(), false)))
    }

    pub fn adjoint(&self, v: &Signal) -> Result<Signal> {
        self.grid.check_same(v.grid())?;
        Ok(v.with_values(self.apply_slice(v.values(), true)))
    }

    pub(crate) fn apply_slice(&self, u: &[f64], adjoint: bool) -> Vec<f64> {
        match &self.kind {
            Kind::Identity => u.to_vec(),
            Kind::Diagonal { basis, s, fft } => {
                let mut c = analyze(*basis, fft.as_ref(), &self.grid, u);
                c.iter_mut().zip(s).for_each(|(x, s)| *x *= s);
                synthesize(*basis, fft.as_ref(), &self.grid, &c)
            }
            Kind::Convolution {
                kernel_hat,
                fft,
                boundary,
                ..
            } => {
                let ext = self.embed(u, *boundary, fft);
                let mut uh = fft.forward_real(&ext);
                for (z, k) in uh.iter_mut().zip(kernel_hat) {
                    *z *= if adjoint { k.conj() } else { *k };
                }
                let out = fft.inverse_real(uh);
                self.restrict(&out, *boundary, fft)
            }
        }
    }

    /// `K*K u`.
    pub(crate) fn normal_slice(&self, u: &[f64]) -> Vec<f64> {
        let ku = self.apply_slice(u, false);
        self.apply_slice(&ku, true)
    }

    fn embed(&self, u: &[f64], boundary: Boundary, fft: &Fft2) -> Vec<f64> {
        match boundary {
            Boundary::Periodic => u.to_vec(),
            Boundary::Padded => {
                let (rows, cols) = self.grid.shape2();
                let mut out = vec![0.0; fft.len()];
                for r in 0..rows {
                    out[r * fft.cols..r * fft.cols + cols].copy_from_slice(&u[r * cols..(r + 1) * cols]);
                }
                out
            }
        }
    }

    fn restrict(&self, x: &[f64], boundary: Boundary, fft: &Fft2) -> Vec<f64> {
        match boundary {
            Boundary::Periodic => x.to_vec(),
            Boundary::Padded => {
                let (rows, cols) = self.grid.shape2();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend_from_slice(&x[r * fft.cols..r * fft.cols + cols]);
                }
                out
            }
        }
    }

    /// Solves `u + ρ K*K u = b`.
    pub fn solve_regularized_normal(&self, rho: f64, b: &Signal) -> Result<Signal> {
        self.grid.check_same(b.grid())?;
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
        }
        Ok(b.with_values(self.solve_slice(rho, b.values())?))
    }

    pub(crate) fn solve_slice(&self, rho: f64, b: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            Kind::Identity => Ok(b.iter().map(|x| x / (1.0 + rho)).collect()),
            Kind::Diagonal { basis, s, fft } => {
                let mut c = analyze(*basis, fft.as_ref(), &self.grid, b);
                c.iter_mut().zip(s).for_each(|(x, s)| *x /= 1.0 + rho * s * s);
                Ok(synthesize(*basis, fft.as_ref(), &self.grid, &c))
            }
            Kind::Convolution {
                kernel_hat,
                fft,
                boundary: Boundary::Periodic,
                ..
            } => {
                let mut bh = fft.forward_real(b);
                for (z, k) in bh.iter_mut().zip(kernel_hat) {
                    *z /= 1.0 + rho * k.norm_sqr();
                }
                Ok(fft.inverse_real(bh))
            }
            Kind::Convolution { .. } => {
                let (x, _) = conjugate_gradient(
                    |x, out| {
                        let n = self.normal_slice(x);
                        for ((o, xi), ni) in out.iter_mut().zip(x).zip(&n) {
                            *o = xi + rho * ni;
                        }
                    },
                    b,
                    None,
                    1e-12,
                    10 * b.len() + 100,
                )?;
                Ok(x)
            }
        }
    }

    /// Coefficients `⟨u, φ_n⟩` in the diagonal basis.
    pub fn analyze(&self, u: &Signal) -> Result<Vec<f64>> {
        self.grid.check_same(u.grid())?;
        match &self.kind {
            Kind::Diagonal { basis, fft, .. } => Ok(analyze(*basis, fft.as_ref(), &self.grid, u.values())),
            _ => Err(Error::InvalidParameter("analyze needs a diagonal operator".into())),
        }
    }

    /// `Σ c_n φ_n` in the diagonal basis.
    pub fn synthesize(&self, c: &[f64]) -> Result<Signal> {
        match &self.kind {
            Kind::Diagonal { basis, fft, .. } => {
                if c.len() != self.grid.len() {
                    return Err(Error::InvalidParameter("coefficient length must match the grid".into()));
                }
                Signal::new(self.grid.clone(), synthesize(*basis, fft.as_ref(), &self.grid, c))
            }
            _ => Err(Error::InvalidParameter("synthesize needs a diagonal operator".into())),
        }
    }
}

fn analyze(basis: Basis, fft: Option<&Fft2>, grid: &Grid, u: &[f64]) -> Vec<f64> {
    let h = grid.cell_measure();
    match basis {
        Basis::Cells => u.iter().map(|x| x * h.sqrt()).collect(),
        Basis::Trigonometric => {
            let n = u.len();
            let uh = fft.expect("trigonometric basis has a plan").forward_real(u);
            (0..n)
                .map(|j| match trig_atom(j, n) {
                    TrigAtom::Constant => h * uh[0].re,
                    TrigAtom::Sin(k) if 2 * k == n => -h * (uh[k] * C64::from_polar(1.0, -PI * k as f64 / n as f64)).im,
                    TrigAtom::Cos(k) => {
                        2f64.sqrt() * h * (uh[k] * C64::from_polar(1.0, -PI * k as f64 / n as f64)).re
                    }
                    TrigAtom::Sin(k) => {
                        -(2f64.sqrt()) * h * (uh[k] * C64::from_polar(1.0, -PI * k as f64 / n as f64)).im
                    }
                })
                .collect()
        }
    }
}

fn synthesize(basis: Basis, fft: Option<&Fft2>, grid: &Grid, c: &[f64]) -> Vec<f64> {
    let h = grid.cell_measure();
    match basis {
        Basis::Cells => c.iter().map(|x| x / h.sqrt()).collect(),
        Basis::Trigonometric => {
            let n = c.len();
            let nf = n as f64;
            let mut x = vec![C64::new(0.0, 0.0); n];
            // pair cos/sin coefficients per frequency
            let mut a = vec![0.0; n / 2 + 1];
            let mut b = vec![0.0; n / 2 + 1];
            for (j, &cj) in c.iter().enumerate() {
                match trig_atom(j, n) {
                    TrigAtom::Constant => a[0] = cj,
                    TrigAtom::Cos(k) => a[k] = cj,
                    TrigAtom::Sin(k) => b[k] = cj,
                }
            }
            x[0] = C64::new(nf * a[0], 0.0);
            for k in 1..=(n - 1) / 2 {
                let z = C64::new(a[k], -b[k]) * C64::from_polar(2f64.sqrt(), PI * k as f64 / nf);
                x[k] = 0.5 * nf * z;
                x[n - k] = x[k].conj();
            }
            if n.is_multiple_of(2) && n >= 2 {
                x[n / 2] = C64::new(nf * b[n / 2], 0.0);
            }
            fft.expect("trigonometric basis has a plan").inverse_real(x)
        }
    }
}

/// Kernel weights by wrapped offset on an `rows × cols` working grid with
/// physical spacings `(hy, hx)`; normalized to unit sum.
fn sample_kernel(shape: KernelShape, width: f64, rows: usize, cols: usize, hy: f64, hx: f64) -> Result<Vec<f64>> {
    if shape != KernelShape::Delta && !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidParameter(format!("kernel width must be positive, got {width}")));
    }
    let wrap = |i: usize, n: usize| -> f64 {
        let i = i as f64;
        let n = n as f64;
        if i <= n / 2.0 {
            i
        } else {
            i - n
        }
    };
    let mut k = vec![0.0; rows * cols];
    for r in 0..rows {
        let dy = if rows > 1 { wrap(r, rows) * hy } else { 0.0 };
        for c in 0..cols {
            let dx = wrap(c, cols) * hx;
            k[r * cols + c] = match shape {
                KernelShape::Delta => f64::from(r == 0 && c == 0),
                KernelShape::Gaussian => {
                    let d2 = dx * dx + dy * dy;
                    if d2.sqrt() <= 4.0 * width {
                        (-d2 / (2.0 * width * width)).exp()
                    } else {
                        0.0
                    }
                }
                KernelShape::Box => f64::from(dx.abs() <= 0.5 * width + 1e-12 && dy.abs() <= 0.5 * width + 1e-12),
            };
        }
    }
    let mass: f64 = k.iter().sum();
    if mass <= 0.0 {
        return Err(Error::InvalidParameter("kernel has no mass on the grid".into()));
    }
    k.iter_mut().for_each(|x| *x /= mass);
    Ok(k)
}

/// Conjugate gradients for a symmetric positive definite map, stopping at
/// `‖r‖ ≤ tol·‖b‖`. Returns the solution and the iteration count.
pub(crate) fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if rr.sqrt() <= tol * bnorm {
            return Ok((x, it));
        }
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() <= tol * bnorm * 100.0 {
        return Ok((x, max_iter));
    }
    Err(Error::NotConverged {
        what: "conjugate gradient",
        iterations: max_iter,
        residual: rr.sqrt() / bnorm,
    })
}
