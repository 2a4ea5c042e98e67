//! Parameter-choice schedules and approximation tools: source-element tail
//! errors, the orthonormal and dyadic `(N_k, η_k, α_k, ζ_k)` sequences, the
//! exact grid modulus of continuity and the level-weighted piecewise
//! constant approximation on dyadic cubes.

use std::collections::VecDeque;
use std::io::Write;

use crate::dictionary::{dyadic_cumulative_count, dyadic_levels};
use crate::error::{Error, Result};
use crate::grid::{Grid, Signal};

pub const N_SCAN_CAP: usize = 1_000_000;
pub const M_SCAN_CAP: usize = 20;

/// Source element `p†` by its coefficients `θ_n = ⟨p†, φ_n*⟩`, `n = 1, 2, …`
/// (stored 0-based), optionally asserted to lie in the ellipsoid
/// `Σ n^{2β} θ_n² ≤ Q²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceElement {
    coeffs: Vec<f64>,
    smoothness: Option<(f64, f64)>,
    /// `tail[N] = Σ_{n>N} θ_n²`.
    tail: Vec<f64>,
}

impl SourceElement {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("source coefficients must be finite".into()));
        }
        let mut tail = vec![0.0; coeffs.len() + 1];
        for i in (0..coeffs.len()).rev() {
            tail[i] = tail[i + 1] + coeffs[i] * coeffs[i];
        }
        Ok(Self {
            coeffs,
            smoothness: None,
            tail,
        })
    }

    /// Attaches `(β, Q)` after checking the ellipsoid inequality on the stored coefficients.
    pub fn with_smoothness(mut self, beta: f64, q: f64) -> Result<Self> {
        if !(beta > 0.0 && q > 0.0) {
            return Err(Error::InvalidParameter("beta and Q must be positive".into()));
        }
        let s = self.ellipsoid_norm_sq(beta);
        if s > q * q * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "Σ n^(2β) θ_n² = {s} exceeds Q² = {}",
                q * q
            )));
        }
        self.smoothness = Some((beta, q));
        Ok(self)
    }

    /// `θ_n = c n^{-decay}` for `n ≤ len`, with `c` chosen so that
    /// `Σ n^{2β} θ_n² = Q²`.
    pub fn power_law(len: usize, decay: f64, beta: f64, q: f64) -> Result<Self> {
        let raw: Vec<f64> = (1..=len).map(|n| (n as f64).powf(-decay)).collect();
        let s: f64 = raw.iter().enumerate().map(|(i, t)| ((i + 1) as f64).powf(2.0 * beta) * t * t).sum();
        let c = q / s.sqrt();
        Self::new(raw.into_iter().map(|t| c * t).collect())?.with_smoothness(beta, q)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn smoothness(&self) -> Option<(f64, f64)> {
        self.smoothness
    }

    pub fn ellipsoid_norm_sq(&self, beta: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, t)| ((i + 1) as f64).powf(2.0 * beta) * t * t)
            .sum()
    }

    /// Index of the last nonzero coefficient plus one.
    pub fn support_len(&self) -> usize {
        self.coeffs.iter().rposition(|x| *x != 0.0).map_or(0, |i| i + 1)
    }

    /// `err_N = ‖p† - Σ_{n≤N} θ_n φ_n*‖ = √(Σ_{n>N} θ_n²)`.
    pub fn err(&self, n: usize) -> f64 {
        self.tail[n.min(self.coeffs.len())].max(0.0).sqrt()
    }
}

pub fn err_n(p: &SourceElement, n: usize) -> f64 {
    p.err(n)
}

/// Advisory check of `Σ_N err_N/√N < ∞`: true for ellipsoids with `β > ½`
/// and finitely supported elements; otherwise the partial sums up to
/// `n_max` must have flattened (second-half increment at most 10% of the total).
pub fn bernstein_stechkin_check(p: &SourceElement, n_max: usize) -> bool {
    if p.smoothness.is_some_and(|(beta, _)| beta > 0.5) {
        return true;
    }
    let support = p.support_len();
    if support <= n_max {
        return true;
    }
    let mut partial = vec![0.0; n_max + 1];
    for n in 1..=n_max {
        partial[n] = partial[n - 1] + p.err(n) / (n as f64).sqrt();
    }
    let total = partial[n_max];
    total == 0.0 || partial[n_max] - partial[n_max / 2] <= 0.1 * total
}

/// One entry of a parameter schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRecord {
    pub k: usize,
    pub sigma: f64,
    /// Number of dyadic levels `m_k`; `None` for orthonormal schedules.
    pub level: Option<usize>,
    pub n_atoms: usize,
    pub eta: f64,
    pub alpha: f64,
    pub zeta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub records: Vec<ScheduleRecord>,
    /// Tail log-log slope of `α_k` against `k` below -1; `None` with fewer than three entries.
    pub summable: Option<bool>,
    /// The modulus vanished (constant source), so the scan was not informative.
    pub degenerate: bool,
}

impl Schedule {
    fn finish(records: Vec<ScheduleRecord>, degenerate: bool) -> Self {
        let summable = summability(&records);
        Self {
            records,
            summable,
            degenerate,
        }
    }

    /// CSV `k,sigma,N,eta,alpha,zeta`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "k,sigma,N,eta,alpha,zeta")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{},{:e},{:e},{:e}", r.k, r.sigma, r.n_atoms, r.eta, r.alpha, r.zeta)?;
        }
        Ok(())
    }
}

fn summability(records: &[ScheduleRecord]) -> Option<bool> {
    if records.len() < 3 {
        return None;
    }
    let tail = &records[records.len() / 2..];
    let tail = if tail.len() < 2 { &records[records.len() - 2..] } else { tail };
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .map(|r| (((r.k.max(1)) as f64).ln(), r.alpha.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxx > 0.0 && sxy / sxx < -1.0)
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::InvalidParameter("empty noise-level sequence".into()));
    }
    if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) || sigmas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("noise levels must be positive and strictly decreasing".into()));
    }
    Ok(())
}

/// `N_k = inf{N ≥ 2 : err_N ≤ σ_k √(2 log N)}`, `η_k = σ_k √(2 log N_k)`,
/// `α_k = N_k^{-2κ²}` and `ζ_k = σ_k max(√(2 log N_k), √(-log α_k))`.
/// Entry `k` is numbered from 1.
pub fn schedule_orthonormal(p: &SourceElement, sigmas: &[f64], kappa: f64) -> Result<Schedule> {
    check_sigmas(sigmas)?;
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter("kappa must be positive".into()));
    }
    let mut records = Vec::with_capacity(sigmas.len());
    let mut start = 2;
    for (i, &sigma) in sigmas.iter().enumerate() {
        // N_k is nondecreasing in k, so each scan resumes from the previous hit
        let n = (start..=N_SCAN_CAP)
            .find(|&n| p.err(n) <= sigma * (2.0 * (n as f64).ln()).sqrt())
            .ok_or_else(|| {
                Error::InvalidParameter(format!("no N ≤ {N_SCAN_CAP} satisfies the rule at sigma = {sigma}"))
            })?;
        start = n;
        let log_n = (n as f64).ln();
        let eta = sigma * (2.0 * log_n).sqrt();
        let alpha = (-2.0 * kappa * kappa * log_n).exp();
        let zeta = sigma * (2.0 * log_n).sqrt().max((-alpha.ln()).sqrt());
        records.push(ScheduleRecord {
            k: i + 1,
            sigma,
            level: None,
            n_atoms: n,
            eta,
            alpha,
            zeta,
        });
    }
    Ok(Schedule::finish(records, false))
}

/// `ω(δ, g) = max{|g(s) - g(t)| : |s - t| ≤ δ}` over cell centres.
pub fn modulus_of_continuity(g: &Signal, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let grid = g.grid();
    let (rows, cols) = grid.shape2();
    let (hy, hx) = (1.0 / rows as f64, 1.0 / cols as f64);
    let v = g.values();
    let eps = 1e-9;
    if rows == 1 {
        let w = ((delta / hx) * (1.0 + eps)).floor() as usize;
        return Ok(sliding_range(v, w));
    }
    let diam = (((rows - 1) as f64 * hy).powi(2) + ((cols - 1) as f64 * hx).powi(2)).sqrt();
    if delta >= diam {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        return Ok(hi - lo);
    }
    let d2 = delta * delta * (1.0 + eps);
    let max_dr = ((delta / hy) * (1.0 + eps)).floor() as usize;
    let max_dc = ((delta / hx) * (1.0 + eps)).floor() as usize;
    let mut best = 0.0f64;
    for dr in 0..=max_dr.min(rows - 1) {
        for dc in -(max_dc.min(cols - 1) as isize)..=max_dc.min(cols - 1) as isize {
            if dr == 0 && dc <= 0 {
                continue;
            }
            let dist2 = (dr as f64 * hy).powi(2) + (dc as f64 * hx).powi(2);
            if dist2 > d2 {
                continue;
            }
            for r in 0..rows - dr {
                let c0 = if dc < 0 { (-dc) as usize } else { 0 };
                let c1 = if dc > 0 { cols - dc as usize } else { cols };
                for c in c0..c1 {
                    let a = v[r * cols + c];
                    let b = v[(r + dr) * cols + (c as isize + dc) as usize];
                    best = best.max((a - b).abs());
                }
            }
        }
    }
    Ok(best)
}

/// `max_{|i-j| ≤ w} |v_i - v_j|` by monotone deques.
fn sliding_range(v: &[f64], w: usize) -> f64 {
    if w == 0 || v.len() < 2 {
        return 0.0;
    }
    let win = w + 1;
    let mut maxq: VecDeque<usize> = VecDeque::new();
    let mut minq: VecDeque<usize> = VecDeque::new();
    let mut best = 0.0f64;
    for i in 0..v.len() {
        while maxq.back().is_some_and(|&j| v[j] <= v[i]) {
            maxq.pop_back();
        }
        maxq.push_back(i);
        while minq.back().is_some_and(|&j| v[j] >= v[i]) {
            minq.pop_back();
        }
        minq.push_back(i);
        while *maxq.front().unwrap() + win <= i {
            maxq.pop_front();
        }
        while *minq.front().unwrap() + win <= i {
            minq.pop_front();
        }
        best = best.max(v[*maxq.front().unwrap()] - v[*minq.front().unwrap()]);
    }
    best
}

/// Result of [`pw_const_approx`].
#[derive(Debug, Clone, PartialEq)]
pub struct PwConstApprox {
    /// `b_{j,l}` per level, row-major over the level's cubes.
    pub coefficients: Vec<Vec<f64>>,
    /// Level weights `a_l`, summing to one.
    pub weights: Vec<f64>,
    /// `ω(δ_l, g)` per level.
    pub omegas: Vec<f64>,
    pub approximation: Signal,
    /// Squared grid-L² error of the approximation.
    pub error_sq: f64,
    /// `(m+1) / Σ_ν ω^{-2}(δ_ν, g)`; zero when some `ω` vanishes.
    pub bound: f64,
    /// `Σ_{j,l} |b_{j,l}|`.
    pub sum_abs: f64,
    /// `Σ_l max_j |b_{j,l}|`.
    pub sum_level_max: f64,
    pub sup_norm: f64,
    /// Some `ω(δ_l, g)` was zero.
    pub degenerate: bool,
}

/// Level-weighted dyadic cube averages `Σ_l a_l g_l` with
/// `a_l = ω^{-2}(δ_l)/Σ_ν ω^{-2}(δ_ν)`, levels `0..=m`. If some `ω(δ_l)`
/// vanishes, all weight goes to the coarsest such level.
pub fn pw_const_approx(g: &Signal, max_level: usize) -> Result<PwConstApprox> {
    let grid = g.grid();
    let d = grid.ndim();
    let (rows, cols) = grid.shape2();
    let side = 1usize << max_level;
    if cols % side != 0 || (d == 2 && rows % side != 0) {
        return Err(Error::Divisibility {
            dims: grid.dims().to_vec(),
            levels: max_level,
        });
    }
    let levels = dyadic_levels(d, max_level);
    let omegas: Vec<f64> = levels
        .iter()
        .map(|l| modulus_of_continuity(g, l.diameter))
        .collect::<Result<_>>()?;
    let degenerate = omegas.contains(&0.0);
    let (weights, bound) = if let Some(first) = omegas.iter().position(|w| *w == 0.0) {
        let mut a = vec![0.0; omegas.len()];
        a[first] = 1.0;
        (a, 0.0)
    } else {
        let inv: Vec<f64> = omegas.iter().map(|w| w.powi(-2)).collect();
        let s: f64 = inv.iter().sum();
        (inv.iter().map(|x| x / s).collect(), (max_level + 1) as f64 / s)
    };

    let v = g.values();
    let mut approx = vec![0.0; v.len()];
    let mut coefficients = Vec::with_capacity(levels.len());
    for (l, a) in weights.iter().enumerate() {
        let per_r = if d == 2 { 1usize << l } else { 1 };
        let per_c = 1usize << l;
        let (br, bc) = (rows / per_r, cols / per_c);
        let mut b = Vec::with_capacity(per_r * per_c);
        for qr in 0..per_r {
            for qc in 0..per_c {
                let mut sum = 0.0;
                for r in qr * br..(qr + 1) * br {
                    for c in qc * bc..(qc + 1) * bc {
                        sum += v[r * cols + c];
                    }
                }
                let coef = a * sum / (br * bc) as f64;
                if coef != 0.0 {
                    for r in qr * br..(qr + 1) * br {
                        for c in qc * bc..(qc + 1) * bc {
                            approx[r * cols + c] += coef;
                        }
                    }
                }
                b.push(coef);
            }
        }
        coefficients.push(b);
    }
    let h = grid.cell_measure();
    let error_sq = h * v.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let sum_abs = coefficients.iter().flatten().map(|b| b.abs()).sum();
    let sum_level_max = coefficients
        .iter()
        .map(|lv| lv.iter().fold(0.0f64, |m, b| m.max(b.abs())))
        .sum();
    Ok(PwConstApprox {
        coefficients,
        weights,
        omegas,
        approximation: Signal::new(grid.clone(), approx)?,
        error_sq,
        bound,
        sum_abs,
        sum_level_max,
        sup_norm: g.max_abs(),
        degenerate,
    })
}

/// `m_k = inf{m : (m+1)/Σ_{ν≤m} ω^{-2}(δ_ν, p†) ≤ -2σ_k² log ε_m}`,
/// `η_k = σ_k √(-2 log ε_{m_k})`, `α_k = exp(-(κ η_k/σ_k)²)`,
/// `N_k = n_{m_k+1}` and `ζ_k = σ_k max(√(-2d log ε_{m_k}), √(-log α_k))`
/// (the scale-calibrated envelope with `γ = d`). A vanishing modulus sets
/// `m_k = 0` and flags the schedule as degenerate.
pub fn schedule_dyadic(p: &Signal, sigmas: &[f64], kappa: f64) -> Result<Schedule> {
    check_sigmas(sigmas)?;
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter("kappa must be positive".into()));
    }
    let grid = p.grid();
    let d = grid.ndim();
    let finest = max_dyadic_level(grid).min(M_SCAN_CAP);
    let levels = dyadic_levels(d, finest);
    let omegas: Vec<f64> = levels
        .iter()
        .map(|l| modulus_of_continuity(p, l.diameter))
        .collect::<Result<_>>()?;
    let degenerate = omegas[0] == 0.0;
    let mut inv_sum = Vec::with_capacity(omegas.len());
    let mut s = 0.0;
    for w in &omegas {
        s += w.powi(-2);
        inv_sum.push(s);
    }
    let mut records = Vec::with_capacity(sigmas.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        let m = if degenerate {
            0
        } else {
            (0..=finest)
                .find(|&m| {
                    let lhs = (m + 1) as f64 / inv_sum[m];
                    lhs <= -2.0 * sigma * sigma * levels[m].scale.ln()
                })
                .ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "no level m ≤ {finest} satisfies the rule at sigma = {sigma}; refine the grid"
                    ))
                })?
        };
        let log_eps = levels[m].scale.ln();
        let eta = sigma * (-2.0 * log_eps).sqrt();
        let alpha = (-(kappa * eta / sigma).powi(2)).exp();
        let zeta = sigma * (-2.0 * d as f64 * log_eps).sqrt().max((-alpha.ln()).sqrt());
        records.push(ScheduleRecord {
            k: i + 1,
            sigma,
            level: Some(m),
            n_atoms: dyadic_cumulative_count(d, m),
            eta,
            alpha,
            zeta,
        });
    }
    Ok(Schedule::finish(records, degenerate))
}

/// Largest `m` with every grid dimension divisible by `2^m`.
pub fn max_dyadic_level(grid: &Grid) -> usize {
    grid.dims().iter().map(|&n| n.trailing_zeros() as usize).min().unwrap_or(0)
}
