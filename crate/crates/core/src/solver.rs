//! SMRE solver: ADMM on `min J(u) + ι_C(Ku)` with a Dykstra projection onto
//! the slab intersection `C`, plus the penalized least-squares baseline and
//! the closed-form shrinkage estimator.

use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::grid::{inner_slices, Signal};
use crate::mrstat::MrFamily;
use crate::operators::{conjugate_gradient, Basis, ForwardOperator};
use crate::penalties::{h1_solve, prox_tv_dual, tv1d_denoise, Penalty};

/// `A = {w : |⟨Y - w, φ_n*⟩| ≤ c_n for all n}` in image space.
#[derive(Debug, Clone)]
pub struct ConstraintSet<'a> {
    dict: &'a Dictionary,
    bounds: Vec<f64>,
    sigma: f64,
    data: Signal,
}

impl<'a> ConstraintSet<'a> {
    /// Slab half-widths `c_n = σ (q + f_N(‖φ_n‖))`.
    pub fn new(dict: &'a Dictionary, family: &MrFamily, q: f64, sigma: f64, data: Signal) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be nonnegative, got {sigma}")));
        }
        if !q.is_finite() {
            return Err(Error::InvalidParameter(format!("q must be finite, got {q}")));
        }
        let bounds: Vec<f64> = family.offsets(dict)?.into_iter().map(|f| sigma * (q + f)).collect();
        Self::from_bounds(dict, bounds, sigma, data)
    }

    pub fn from_bounds(dict: &'a Dictionary, bounds: Vec<f64>, sigma: f64, data: Signal) -> Result<Self> {
        dict.grid().check_same(data.grid())?;
        if bounds.len() != dict.len() {
            return Err(Error::InvalidParameter("one bound per atom required".into()));
        }
        if let Some((n, c)) = bounds.iter().enumerate().find(|(_, c)| !(**c >= 0.0)) {
            return Err(Error::Infeasible(format!(
                "slab {n} has negative half-width {c}: q lies below the envelope -f_N(‖φ_n‖)"
            )));
        }
        Ok(Self {
            dict,
            bounds,
            sigma,
            data,
        })
    }

    pub fn dict(&self) -> &Dictionary {
        self.dict
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn data(&self) -> &Signal {
        &self.data
    }

    /// `max_n (|⟨Y - w, φ_n*⟩| - c_n)₊`.
    pub fn max_violation(&self, w: &[f64]) -> f64 {
        let r: Vec<f64> = self.data.values().iter().zip(w).map(|(y, w)| y - w).collect();
        let p = self.dict.projector(&r);
        self.bounds
            .iter()
            .enumerate()
            .map(|(n, c)| (p.coeff(n).abs() - c).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Scale for absolute tolerances on slab residuals.
    fn tol_scale(&self) -> f64 {
        let widest = self.bounds.iter().cloned().fold(0.0, f64::max);
        if widest > 0.0 {
            widest
        } else {
            self.sigma.max(1e-300)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rho: f64,
    pub max_outer: usize,
    /// Absolute; `None` means `1e-6·‖Y‖`.
    pub tol_primal: Option<f64>,
    pub tol_dual: Option<f64>,
    /// Sweep cap for the projection.
    pub dykstra_max: usize,
    /// Relative to the largest slab width.
    pub dykstra_tol: f64,
    /// Tolerance for iterative u-steps (CG, proximal gradient).
    pub inner_prox_tol: f64,
    pub inner_max: usize,
    pub adapt_rho: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_outer: 2000,
            tol_primal: None,
            tol_dual: None,
            dykstra_max: 100_000,
            dykstra_tol: 1e-8,
            inner_prox_tol: 1e-10,
            inner_max: 5000,
            adapt_rho: true,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.rho)
            || !pos(self.dykstra_tol)
            || !pos(self.inner_prox_tol)
            || self.max_outer == 0
            || self.dykstra_max == 0
            || self.inner_max == 0
            || self.tol_primal.is_some_and(|t| !pos(t))
            || self.tol_dual.is_some_and(|t| !pos(t))
        {
            return Err(Error::InvalidParameter("solver settings must be positive".into()));
        }
        Ok(())
    }
}

/// Output of [`project_admissible`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub point: Signal,
    pub sweeps: usize,
    pub max_violation: f64,
    pub converged: bool,
}

/// Euclidean projection onto the admissible set. Dykstra's corrections for
/// slabs are multiples of the unit normals, so they are stored as scalars
/// `μ_n` with `x = w + Σ μ_n φ_n*`; the sweep stops on a KKT certificate
/// (feasibility plus complementary slackness) at `dykstra_tol`.
pub fn project_admissible(c: &ConstraintSet, w: &Signal, cfg: &SolverConfig) -> Result<Projection> {
    c.dict.grid().check_same(w.grid())?;
    cfg.validate()?;
    let mut mu = vec![0.0; c.dict.len()];
    let tol = cfg.dykstra_tol * c.tol_scale();
    let (x, sweeps, viol, ok) = dykstra(c, w.values(), &mut mu, tol, cfg.dykstra_max);
    Ok(Projection {
        point: w.with_values(x),
        sweeps,
        max_violation: viol,
        converged: ok,
    })
}

/// Cyclic slab projections warm-started from `mu`, to absolute tolerance
/// `abs_tol`. Returns the point, the sweep count, the final violation and
/// whether the certificate holds.
fn dykstra(c: &ConstraintSet, w: &[f64], mu: &mut [f64], abs_tol: f64, max_sweeps: usize) -> (Vec<f64>, usize, f64, bool) {
    let dict = c.dict;
    let y = c.data.values();
    let mut x = w.to_vec();
    for (n, m) in mu.iter().enumerate() {
        if *m != 0.0 {
            dict.dual_axpy(n, *m, &mut x);
        }
    }
    // ⟨Y, φ_n*⟩ once; then t_n(x) = ⟨Y,φ*⟩ - ⟨x,φ*⟩
    let ycoef: Vec<f64> = {
        let p = dict.projector(y);
        (0..dict.len()).map(|n| p.coeff(n)).collect()
    };
    let certificate = |x: &[f64], mu: &[f64]| -> (f64, f64) {
        let p = dict.projector(x);
        let mut viol = 0.0f64;
        let mut slack = 0.0f64;
        for n in 0..dict.len() {
            let t = ycoef[n] - p.coeff(n);
            viol = viol.max(t.abs() - c.bounds[n]);
            if mu[n] != 0.0 {
                slack = slack.max((t - mu[n].signum() * c.bounds[n]).abs());
            }
        }
        (viol.max(0.0), slack)
    };
    let (viol, slack) = certificate(&x, mu);
    if viol <= abs_tol && slack <= abs_tol {
        return (x, 0, viol, true);
    }
    let mut last = viol;
    for sweep in 1..=max_sweeps {
        for n in 0..dict.len() {
            let t = ycoef[n] - dict.dual_dot(n, &x) + mu[n];
            let cn = c.bounds[n];
            let new = if t > cn {
                t - cn
            } else if t < -cn {
                t + cn
            } else {
                0.0
            };
            let delta = new - mu[n];
            if delta != 0.0 {
                dict.dual_axpy(n, delta, &mut x);
                mu[n] = new;
            }
        }
        let (viol, slack) = certificate(&x, mu);
        last = viol.max(slack);
        if viol <= abs_tol && slack <= abs_tol {
            return (x, sweep, viol, true);
        }
    }
    (x, max_sweeps, last, false)
}

/// Per-iteration ADMM diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub objective: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub estimate: Signal,
    pub iterations: usize,
    /// `max_n (|⟨Y - Kû, φ_n*⟩| - c_n)₊`, data units.
    pub max_constraint_violation: f64,
    pub objective: f64,
    /// Violation within the primal tolerance.
    pub feasible: bool,
    pub converged: bool,
    pub rho: f64,
    pub history: Vec<IterRecord>,
}

impl SolverResult {
    /// Diagnostics CSV `iter,primal_res,dual_res,objective,max_violation`.
    pub fn write_diagnostics(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "iter,primal_res,dual_res,objective,max_violation")?;
        for r in &self.history {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e}",
                r.iter, r.primal_res, r.dual_res, r.objective, r.max_violation
            )?;
        }
        Ok(())
    }
}

/// Solver for `argmin_u J(u) + (ρ/2)‖K u - b‖²`, reused across ADMM steps.
struct QuadStep<'a> {
    op: &'a ForwardOperator,
    penalty: Penalty,
    tol: f64,
    max_iter: usize,
    tv_dual: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> QuadStep<'a> {
    fn solve(&mut self, rho: f64, b: &[f64], warm: &[f64]) -> Result<Vec<f64>> {
        let op = self.op;
        let grid = op.grid();
        let kb = op.apply_slice(b, true);
        match self.penalty {
            Penalty::SqL2 => {
                let rhs: Vec<f64> = kb.iter().map(|x| rho * x).collect();
                op.solve_slice(rho, &rhs)
            }
            Penalty::SqH1 { .. } => {
                let (cy, cx) = self.penalty.h1_coefficients(grid);
                let rhs: Vec<f64> = kb.iter().map(|x| rho * x).collect();
                let cell_diag = match (op.is_identity(), op.basis(), op.singular_values()) {
                    (true, _, _) => Some(vec![rho; b.len()]),
                    (_, Some(Basis::Cells), Some(s)) => Some(s.iter().map(|s| rho * s * s).collect()),
                    _ => None,
                };
                match cell_diag {
                    Some(d) => h1_solve(grid, &d, cy, cx, &rhs, Some(warm)),
                    None => {
                        let pen = self.penalty;
                        let (x, _) = conjugate_gradient(
                            |x, out| {
                                let a = pen.h1_gradient(grid, x);
                                let n = op.normal_slice(x);
                                for i in 0..x.len() {
                                    out[i] = a[i] + rho * n[i];
                                }
                            },
                            &rhs,
                            Some(warm),
                            self.tol.min(1e-10),
                            self.max_iter.max(10 * b.len()),
                        )?;
                        Ok(x)
                    }
                }
            }
            Penalty::Tv => {
                if op.is_identity() {
                    return self.prox_tv(b, 1.0 / rho);
                }
                // accelerated proximal gradient on (ρ/2)‖Ku - b‖² + TV(u)
                let lip = rho * op.norm_sq_bound();
                let step = 1.0 / lip;
                let mut x = warm.to_vec();
                let mut yv = x.clone();
                let mut t = 1.0f64;
                let h = grid.cell_measure();
                for _ in 0..self.max_iter {
                    let ky = op.apply_slice(&yv, false);
                    let r: Vec<f64> = ky.iter().zip(b).map(|(a, b)| a - b).collect();
                    let g = op.apply_slice(&r, true);
                    let v: Vec<f64> = yv.iter().zip(&g).map(|(y, g)| y - step * rho * g).collect();
                    let xn = self.prox_tv(&v, step)?;
                    let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                    let diff: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let dn = inner_slices(&diff, &diff, h).sqrt();
                    let xnorm = inner_slices(&xn, &xn, h).sqrt();
                    for i in 0..x.len() {
                        yv[i] = xn[i] + (t - 1.0) / tn * diff[i];
                    }
                    x = xn;
                    t = tn;
                    if dn <= self.tol * (1.0 + xnorm) {
                        break;
                    }
                }
                Ok(x)
            }
            Penalty::Negentropy => Err(Error::InvalidParameter(
                "negentropy is not supported by the solver".into(),
            )),
        }
    }

    fn prox_tv(&mut self, v: &[f64], tau: f64) -> Result<Vec<f64>> {
        let grid = self.op.grid();
        if grid.shape2().0 == 1 {
            return Ok(tv1d_denoise(v, tau / grid.cell_measure()));
        }
        let warm = self.tv_dual.take();
        let (x, dual) = prox_tv_dual(grid, v, tau, self.tol.max(1e-12), self.max_iter, warm)?;
        self.tv_dual = Some(dual);
        Ok(x)
    }
}

/// ADMM for `min J(u)` subject to `Ku ∈ C`.
pub fn solve_smre(
    op: &ForwardOperator,
    c: &ConstraintSet,
    penalty: &Penalty,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    cfg.validate()?;
    let grid = op.grid().clone();
    grid.check_same(c.data.grid())?;
    let h = grid.cell_measure();
    let nrm = |v: &[f64]| inner_slices(v, v, h).sqrt();
    let ynorm = nrm(c.data.values()).max(1e-300);
    let tol_p = cfg.tol_primal.unwrap_or(1e-6 * ynorm);
    let tol_d = cfg.tol_dual.unwrap_or(1e-6 * ynorm);

    let n = grid.len();
    let mut step = QuadStep {
        op,
        penalty: *penalty,
        tol: cfg.inner_prox_tol,
        max_iter: cfg.inner_max,
        tv_dual: None,
    };
    let mut rho = cfg.rho;
    let mut u = vec![0.0; n];
    let mut ku = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut mu = vec![0.0; c.dict.len()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_r = f64::INFINITY;
    let mut tighten = false;
    let objective = |u: &[f64]| penalty.eval(&Signal::new(grid.clone(), u.to_vec())?);

    for it in 1..=cfg.max_outer {
        iterations = it;
        let b: Vec<f64> = z.iter().zip(&d).map(|(z, d)| z - d).collect();
        u = step.solve(rho, &b, &u)?;
        ku = op.apply_slice(&u, false);
        let target: Vec<f64> = ku.iter().zip(&d).map(|(k, d)| k + d).collect();
        // inexact projections early on, tightening with the primal residual;
        // convergence is only accepted after an exact one
        let exact_tol = cfg.dykstra_tol * c.tol_scale();
        let inner_tol = if tighten {
            exact_tol
        } else {
            exact_tol.max(1e-2 * last_r.min(c.tol_scale()))
        };
        let (znew, _, _, ok) = dykstra(c, &target, &mut mu, inner_tol, cfg.dykstra_max);
        if !ok {
            return Err(Error::NotConverged {
                what: "admissible-set projection",
                iterations: cfg.dykstra_max,
                residual: c.max_violation(&znew),
            });
        }
        let rvec: Vec<f64> = ku.iter().zip(&znew).map(|(k, z)| k - z).collect();
        let dz: Vec<f64> = znew.iter().zip(&z).map(|(a, b)| a - b).collect();
        let r = nrm(&rvec);
        let s = rho * nrm(&op.apply_slice(&dz, true));
        last_r = r;
        for i in 0..n {
            d[i] += rvec[i];
        }
        z = znew;
        history.push(IterRecord {
            iter: it,
            primal_res: r,
            dual_res: s,
            objective: objective(&u)?,
            max_violation: c.max_violation(&ku),
        });
        if r <= tol_p && s <= tol_d {
            if inner_tol <= exact_tol {
                converged = true;
                break;
            }
            tighten = true;
        }
        if cfg.adapt_rho {
            let factor = if r > 10.0 * s {
                2.0
            } else if s > 10.0 * r {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                d.iter_mut().for_each(|x| *x /= factor);
            }
        }
    }
    let viol = c.max_violation(&ku);
    Ok(SolverResult {
        objective: objective(&u)?,
        estimate: Signal::new(grid, u)?,
        iterations,
        max_constraint_violation: viol,
        feasible: viol <= tol_p,
        converged,
        rho,
        history,
    })
}

/// `argmin_u ‖Y - Ku‖² + λ J(u)` (grid norms).
pub fn solve_penalized_ls(op: &ForwardOperator, y: &Signal, penalty: &Penalty, lambda: f64) -> Result<Signal> {
    op.grid().check_same(y.grid())?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let mut step = QuadStep {
        op,
        penalty: *penalty,
        tol: 1e-12,
        max_iter: 100_000,
        tv_dual: None,
    };
    let u = step.solve(2.0 / lambda, y.values(), &vec![0.0; y.len()])?;
    Signal::new(y.grid().clone(), u)
}

/// Closed-form SMRE for a diagonal operator with `J = ½‖·‖²` and the
/// penalized-log statistic over the first `n_atoms` basis elements:
/// `û_n = s_n⁻¹ soft(y_n, σ(q + √(2 log N)))` for `n < N`, zero beyond.
pub fn solve_shrinkage(op: &ForwardOperator, y: &Signal, n_atoms: usize, q: f64, sigma: f64) -> Result<Signal> {
    let s = op
        .singular_values()
        .ok_or_else(|| Error::InvalidParameter("shrinkage needs a diagonal operator".into()))?;
    if n_atoms < 2 || n_atoms > s.len() {
        return Err(Error::InvalidParameter(format!(
            "atom count must lie in 2..={}, got {n_atoms}",
            s.len()
        )));
    }
    let tau = sigma * (q + (2.0 * (n_atoms as f64).ln()).sqrt());
    let mut coef = op.analyze(y)?;
    for (n, c) in coef.iter_mut().enumerate() {
        *c = if n < n_atoms && c.abs() > tau {
            (c.abs() - tau) * c.signum() / s[n]
        } else {
            0.0
        };
    }
    op.synthesize(&coef)
}
