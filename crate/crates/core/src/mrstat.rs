//! Multiresolution statistics `T_N(v) = max_n t_N(|⟨v, φ_n*⟩|, ‖φ_n‖)` for
//! the additive families `t_N(s, r) = s - f_N(r)`.

use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::grid::Signal;

/// Additive calibration `t_N(s, r) = s - f_N(r)`; every kind has Lipschitz constant 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MrFamily {
    /// `f_N ≡ 0`: the bare maximum of normalized local sums.
    Plain,
    /// `f_N(r) = √(2 log N)`.
    #[serde(rename = "penalized_logN", alias = "penalized_log_n")]
    PenalizedLogN,
    /// `f_N(r) = √(-2γ log r)`.
    ScaleCalibrated { gamma: f64 },
}

impl MrFamily {
    pub fn validate(&self) -> Result<()> {
        if let Self::ScaleCalibrated { gamma } = self {
            if !(*gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
            }
        }
        Ok(())
    }

    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    /// `f_N(r)`, the offset subtracted from `s`.
    pub fn offset(&self, n_atoms: usize, r: f64) -> Result<f64> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Domain(format!("atom norm r = {r} outside (0, 1]")));
        }
        match *self {
            Self::Plain => Ok(0.0),
            Self::PenalizedLogN => {
                if n_atoms < 2 {
                    return Err(Error::Domain(format!(
                        "penalized_logN needs N ≥ 2, got {n_atoms}"
                    )));
                }
                Ok((2.0 * (n_atoms as f64).ln()).sqrt())
            }
            Self::ScaleCalibrated { gamma } => Ok((-2.0 * gamma * r.ln()).max(0.0).sqrt()),
        }
    }

    /// `λ_N(r) = inf_s t_N(s, r) = -f_N(r)`.
    pub fn lower_envelope(&self, n_atoms: usize, r: f64) -> Result<f64> {
        Ok(-self.offset(n_atoms, r)?)
    }

    /// Per-atom offsets for `dict`.
    pub fn offsets(&self, dict: &Dictionary) -> Result<Vec<f64>> {
        self.validate()?;
        let n = dict.len();
        dict.norms().map(|r| self.offset(n, r)).collect()
    }
}

/// `t_N(s, r)`.
pub fn eval_t(family: &MrFamily, n_atoms: usize, s: f64, r: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::Domain(format!("s = {s} must be nonnegative")));
    }
    Ok(s - family.offset(n_atoms, r)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatValue {
    pub value: f64,
    pub argmax_atom: usize,
    pub per_atom_margins: Option<Vec<f64>>,
}

/// `T_N(v)` with lowest-index tie-breaking.
pub fn eval_stat(dict: &Dictionary, family: &MrFamily, v: &Signal) -> Result<StatValue> {
    dict.grid().check_same(v.grid())?;
    let offsets = family.offsets(dict)?;
    Ok(max_over_atoms(dict, &offsets, v.values(), false))
}

/// As [`eval_stat`], also returning every `t_N` term.
pub fn eval_stat_with_margins(dict: &Dictionary, family: &MrFamily, v: &Signal) -> Result<StatValue> {
    dict.grid().check_same(v.grid())?;
    let offsets = family.offsets(dict)?;
    Ok(max_over_atoms(dict, &offsets, v.values(), true))
}

pub(crate) fn max_over_atoms(dict: &Dictionary, offsets: &[f64], v: &[f64], keep: bool) -> StatValue {
    let p = dict.projector(v);
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    let mut margins = keep.then(|| Vec::with_capacity(dict.len()));
    for (n, off) in offsets.iter().enumerate() {
        let t = p.coeff(n).abs() - off;
        if t > best {
            best = t;
            arg = n;
        }
        if let Some(m) = margins.as_mut() {
            m.push(t);
        }
    }
    StatValue {
        value: best,
        argmax_atom: arg,
        per_atom_margins: margins,
    }
}

/// `inf_n λ_N(‖φ_n‖) = -max_n f_N(‖φ_n‖)`.
pub fn lambda_inf(dict: &Dictionary, family: &MrFamily) -> Result<f64> {
    let offsets = family.offsets(dict)?;
    Ok(-offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Numerical verdict on the multiresolution-statistic axioms.
#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub monotone: bool,
    pub convex: bool,
    pub lipschitz: bool,
    /// `-∞ < λ_N(r) < 0` for every sampled `r`.
    pub lower_bound: bool,
    /// `t(s,r) ≥ c₁ s + c₂ t(σ s, r)` for sampled `σ < σ₀`.
    pub scaling_inequality: bool,
    /// Fewer than three `s` samples: convexity is vacuous.
    pub degenerate: bool,
}

impl AxiomReport {
    pub fn all_pass(&self) -> bool {
        self.monotone && self.convex && self.lipschitz && self.lower_bound && self.scaling_inequality
    }
}

/// Checks monotonicity, midpoint convexity, the Lipschitz bound `lipschitz`,
/// the lower envelope and the scaling inequality with `c₁ = 1 - σ₀`, `c₂ = 1`
/// on the product of the given `s` and `r` samples.
pub fn check_mr_axioms(
    t: impl Fn(f64, f64) -> f64,
    lipschitz: f64,
    sigma0: f64,
    s_samples: &[f64],
    r_samples: &[f64],
) -> AxiomReport {
    let mut s: Vec<f64> = s_samples.iter().cloned().filter(|x| *x >= 0.0).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let tol = |a: f64, b: f64| 1e-12 * (1.0 + a.abs() + b.abs());
    let (c1, c2) = (1.0 - sigma0, 1.0);
    let sigmas = [0.0, 0.1, 0.5, 0.9, 0.999].map(|f| f * sigma0);

    let mut rep = AxiomReport {
        monotone: true,
        convex: true,
        lipschitz: true,
        lower_bound: true,
        scaling_inequality: true,
        degenerate: s.len() < 3,
    };
    for &r in r_samples {
        let vals: Vec<f64> = s.iter().map(|&x| t(x, r)).collect();
        for w in 0..vals.len().saturating_sub(1) {
            let (a, b) = (vals[w], vals[w + 1]);
            if b < a - tol(a, b) {
                rep.monotone = false;
            }
            if (b - a).abs() > lipschitz * (s[w + 1] - s[w]) + tol(a, b) {
                rep.lipschitz = false;
            }
        }
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                let mid = t(0.5 * (s[i] + s[j]), r);
                let chord = 0.5 * (vals[i] + vals[j]);
                if mid > chord + tol(mid, chord) {
                    rep.convex = false;
                }
            }
        }
        // λ_N(r) = inf_s t(s, r); monotone families attain it at s = 0.
        let lambda = vals
            .iter()
            .cloned()
            .chain(std::iter::once(t(0.0, r)))
            .fold(f64::INFINITY, f64::min);
        if !(lambda.is_finite() && lambda < 0.0) {
            rep.lower_bound = false;
        }
        for &x in &s {
            let lhs = t(x, r);
            for &sg in &sigmas {
                let rhs = c1 * x + c2 * t(sg * x, r);
                if lhs < rhs - tol(lhs, rhs) {
                    rep.scaling_inequality = false;
                }
            }
        }
    }
    rep
}

/// [`check_mr_axioms`] for a concrete family with `n_atoms` atoms.
pub fn check_family_axioms(
    family: &MrFamily,
    n_atoms: usize,
    sigma0: f64,
    s_samples: &[f64],
    r_samples: &[f64],
) -> Result<AxiomReport> {
    family.validate()?;
    for &r in r_samples {
        family.offset(n_atoms, r)?;
    }
    Ok(check_mr_axioms(
        |s, r| s - family.offset(n_atoms, r).unwrap_or(f64::NAN),
        family.lipschitz(),
        sigma0,
        s_samples,
        r_samples,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dyadic, build_intervals, build_trigonometric, Dictionary};
    use crate::grid::{Grid, Signal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_t_closed_forms() {
        // √(2 log 2) to 17 digits, computed independently in arbitrary precision
        let want = 1.177_410_022_515_474_7;
        let got = eval_t(&MrFamily::PenalizedLogN, 2, 0.0, 0.3).unwrap();
        assert!((got + want).abs() < 1e-15);

        let fam = MrFamily::ScaleCalibrated { gamma: 2.0 };
        let s = 1.3;
        let got = eval_t(&fam, 10, s, 0.5).unwrap();
        assert!((got - (s - (4.0 * 2f64.ln()).sqrt())).abs() < 1e-15);

        let f = fam.offset(10, 0.25).unwrap();
        assert_eq!(eval_t(&fam, 10, f, 0.25).unwrap(), 0.0);
        assert_eq!(eval_t(&fam, 10, 0.7, 1.0).unwrap(), 0.7);
    }

    #[test]
    fn eval_t_errors() {
        assert!(eval_t(&MrFamily::PenalizedLogN, 1, 0.0, 0.5).is_err());
        assert!(eval_t(&MrFamily::Plain, 1, 0.0, 0.0).is_err());
        assert!(eval_t(&MrFamily::Plain, 1, 0.0, 1.5).is_err());
        assert!(eval_t(&MrFamily::Plain, 1, -1.0, 0.5).is_err());
        assert!(MrFamily::ScaleCalibrated { gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn zero_signal_hits_envelope() {
        let grid = Grid::one_d(64).unwrap();
        let dict = build_intervals(&grid, 5).unwrap();
        let v = Signal::zeros(&grid);
        let t = eval_stat(&dict, &MrFamily::PenalizedLogN, &v).unwrap();
        assert!((t.value + (2.0 * (dict.len() as f64).ln()).sqrt()).abs() < 1e-14);
        assert_eq!(t.argmax_atom, 0);
    }

    #[test]
    fn scaled_atom_in_orthonormal_dictionary() {
        let grid = Grid::one_d(128).unwrap();
        let dict = build_trigonometric(&grid, 16).unwrap();
        let f = (2.0 * 16f64.ln()).sqrt();
        for c in [-5.0, -0.3, 0.0, 2.0, 7.5] {
            let v = dict.dual_signal(5).unwrap().scale(c);
            let t = eval_stat(&dict, &MrFamily::PenalizedLogN, &v).unwrap();
            let want = (c.abs() - f).max(-f);
            assert!((t.value - want).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_by_atom_changes_one_term() {
        let grid = Grid::one_d(64).unwrap();
        let dict = build_trigonometric(&grid, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Signal::new(grid.clone(), (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = eval_stat_with_margins(&dict, &MrFamily::PenalizedLogN, &v).unwrap();
        let w = v.axpy(3.0, &dict.dual_signal(4).unwrap());
        let b = eval_stat_with_margins(&dict, &MrFamily::PenalizedLogN, &w).unwrap();
        let (ma, mb) = (a.per_atom_margins.unwrap(), b.per_atom_margins.unwrap());
        for n in 0..12 {
            if n != 4 {
                assert!((ma[n] - mb[n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn threshold_form_matches_double_loop() {
        // max over 1 ≤ len ≤ 20 of |Σ_{l=i}^{j} v_l| / √len, computed by brute force
        let grid = Grid::one_d(1024).unwrap();
        let dict = build_intervals(&grid, 20).unwrap();
        let h = grid.cell_measure();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let raw: Vec<f64> = (0..1024).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut brute = f64::NEG_INFINITY;
            for i in 0..1024 {
                let mut s = 0.0;
                for j in i..(i + 20).min(1024) {
                    s += raw[j];
                    brute = brute.max(s.abs() / ((j - i + 1) as f64).sqrt());
                }
            }
            // the white-noise scaling h^{-1/2} turns ⟨·, φ*⟩ into raw local sums / √len
            let v = Signal::new(grid.clone(), raw.iter().map(|x| x / h.sqrt()).collect()).unwrap();
            let t = eval_stat(&dict, &MrFamily::Plain, &v).unwrap();
            assert!((t.value - brute).abs() < 1e-10 * brute.max(1.0));
        }
    }

    #[test]
    fn random_dense_dictionary_matches_brute_force() {
        let grid = Grid::one_d(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let atoms: Vec<Signal> = (0..1000)
            .map(|_| {
                let s = Signal::new(grid.clone(), (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let r = rng.random_range(0.05..1.0);
                s.scale(r / s.norm())
            })
            .collect();
        let dict = Dictionary::custom(&grid, &atoms).unwrap();
        let fam = MrFamily::ScaleCalibrated { gamma: 1.0 };
        let v = Signal::new(grid.clone(), (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let brute = atoms
            .iter()
            .map(|a| {
                let r = a.norm();
                let c: f64 = a.values().iter().zip(v.values()).map(|(x, y)| x * y).sum::<f64>() / 32.0 / r;
                c.abs() - (-2.0 * r.ln()).sqrt()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let t = eval_stat(&dict, &fam, &v).unwrap();
        assert!((t.value - brute).abs() < 1e-12);
        assert!(t.value >= lambda_inf(&dict, &fam).unwrap());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let grid = Grid::one_d(8).unwrap();
        let dict = build_intervals(&grid, 1).unwrap();
        let v = Signal::constant(&grid, 1.0);
        assert_eq!(eval_stat(&dict, &MrFamily::Plain, &v).unwrap().argmax_atom, 0);
    }

    #[test]
    fn lambda_inf_examples() {
        let grid = Grid::two_d(32, 32).unwrap();
        let dict = build_dyadic(&grid, 4).unwrap();
        let n = dict.len();
        let li = lambda_inf(&dict, &MrFamily::PenalizedLogN).unwrap();
        assert!((li + (2.0 * (n as f64).ln()).sqrt()).abs() < 1e-14);

        // γ = d: -√(-2γ log ε_m) with ε_m = 2^{-md/2}, i.e. -√(γ m d log 2); enumeration below
        let fam = MrFamily::ScaleCalibrated { gamma: 2.0 };
        let closed = -(2.0f64 * 4.0 * 2.0 * 2f64.ln()).sqrt();
        let enumerated = -dict
            .norms()
            .map(|r| (-2.0 * 2.0 * r.ln()).sqrt())
            .fold(0.0, f64::max);
        let li = lambda_inf(&dict, &fam).unwrap();
        assert!((li - closed).abs() < 1e-12);
        assert!((li - enumerated).abs() < 1e-12);

        let single = Dictionary::custom(&grid, &[Signal::constant(&grid, 1.0)]).unwrap();
        assert_eq!(lambda_inf(&single, &fam).unwrap(), 0.0);
    }

    fn samples() -> (Vec<f64>, Vec<f64>) {
        let s: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let r = vec![0.01, 0.1, 0.3, 0.5, 0.9];
        (s, r)
    }

    #[test]
    fn additive_families_satisfy_axioms() {
        let (s, r) = samples();
        for fam in [MrFamily::PenalizedLogN, MrFamily::ScaleCalibrated { gamma: 2.0 }] {
            let rep = check_family_axioms(&fam, 100, 0.5, &s, &r).unwrap();
            assert!(rep.all_pass(), "{fam:?}: {rep:?}");
            assert!(!rep.degenerate);
        }
        // λ = 0 for the plain family: only the strict lower bound fails
        let rep = check_family_axioms(&MrFamily::Plain, 100, 0.5, &s, &r).unwrap();
        assert!(rep.monotone && rep.convex && rep.lipschitz && rep.scaling_inequality);
        assert!(!rep.lower_bound);
    }

    #[test]
    fn tampered_family_is_flagged() {
        let (s, r) = samples();
        let rep = check_mr_axioms(|s, _| -2.0 * s - 1.0, 1.0, 0.5, &s, &r);
        assert!(!rep.monotone);
        assert!(!rep.lipschitz);
        let rep = check_mr_axioms(|s, _| (s - 1.0).powi(2).min(1.0) - 2.0, 1.0, 0.5, &s, &r);
        assert!(!rep.convex);
    }

    #[test]
    fn single_s_sample_is_degenerate() {
        let rep = check_mr_axioms(|s, r| s - r, 1.0, 0.5, &[1.0], &[0.5]);
        assert!(rep.degenerate);
        assert!(rep.convex);
    }

    #[test]
    fn family_from_config() {
        let f: MrFamily = toml::from_str("kind = \"scale_calibrated\"\ngamma = 2.0\n").unwrap();
        assert_eq!(f, MrFamily::ScaleCalibrated { gamma: 2.0 });
        let f: MrFamily = toml::from_str("kind = \"penalized_logN\"\n").unwrap();
        assert_eq!(f, MrFamily::PenalizedLogN);
        let f: MrFamily = toml::from_str("kind = \"plain\"\n").unwrap();
        assert_eq!(f, MrFamily::Plain);
    }
}
