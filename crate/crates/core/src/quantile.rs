//! Monte-Carlo calibration of `T_N(ε)`: empirical quantiles, their standard
//! errors and the Borel-type bound `med + L√(-2 log 2α)`.

use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::grid::fill_standard_normals;
use crate::mrstat::{max_over_atoms, MrFamily};

pub const MIN_DRAWS: usize = 100;

/// Sorted draws of `T_N(ε)` plus the replicate-ordered originals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTable {
    samples: Vec<f64>,
    by_replicate: Vec<f64>,
    seed: u64,
    dict_fingerprint: String,
    family: Option<MrFamily>,
}

impl QuantileTable {
    /// Builds a table from raw draws (any order).
    pub fn from_samples(draws: Vec<f64>, seed: u64) -> Result<Self> {
        if draws.len() < 2 {
            return Err(Error::InvalidParameter("a quantile table needs at least 2 samples".into()));
        }
        if draws.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite sample".into()));
        }
        let mut samples = draws.clone();
        samples.sort_by(f64::total_cmp);
        Ok(Self {
            samples,
            by_replicate: draws,
            seed,
            dict_fingerprint: String::new(),
            family: None,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Draws in replicate order.
    pub fn draws(&self) -> &[f64] {
        &self.by_replicate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dict_fingerprint(&self) -> &str {
        &self.dict_fingerprint
    }

    pub fn family(&self) -> Option<&MrFamily> {
        self.family.as_ref()
    }

    /// Smallest sample whose empirical cdf reaches `1 - alpha`.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        check_alpha(alpha)?;
        Ok(self.samples[order_index(self.len(), 1.0 - alpha)])
    }

    /// Standard error of [`quantile`](Self::quantile) from the 95%
    /// order-statistic binomial window, rescaled to one standard deviation.
    pub fn quantile_se(&self, alpha: f64) -> Result<f64> {
        check_alpha(alpha)?;
        let m = self.len() as f64;
        let p = 1.0 - alpha;
        let z = 1.959_963_984_540_054;
        let half = z * (m * p * (1.0 - p)).sqrt();
        let lo = ((m * p - half).floor().max(1.0) as usize).min(self.len()) - 1;
        let hi = ((m * p + half).ceil().max(1.0) as usize).min(self.len()) - 1;
        Ok((self.samples[hi] - self.samples[lo]) / (2.0 * z))
    }

    pub fn median(&self) -> f64 {
        self.samples[order_index(self.len(), 0.5)]
    }

    /// `q[alpha]=<value> se=<value>`.
    pub fn summary_line(&self, alpha: f64) -> Result<String> {
        Ok(format!(
            "q[{alpha}]={} se={}",
            self.quantile(alpha)?,
            self.quantile_se(alpha)?
        ))
    }

    /// CSV with header `replicate,statistic`, replicate order.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "replicate,statistic")?;
        for (i, s) in self.by_replicate.iter().enumerate() {
            writeln!(w, "{i},{s:e}")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl Read, seed: u64) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "replicate,statistic" => {}
            _ => return Err(Error::Parse("expected header `replicate,statistic`".into())),
        }
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("line {}: expected two columns", ln + 2)))?;
            let i = a.trim().parse().map_err(|e| Error::Parse(format!("line {}: {e}", ln + 2)))?;
            let s = b.trim().parse().map_err(|e| Error::Parse(format!("line {}: {e}", ln + 2)))?;
            rows.push((i, s));
        }
        rows.sort_by_key(|r| r.0);
        Self::from_samples(rows.into_iter().map(|r| r.1).collect(), seed)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// 0-based index of the smallest order statistic with ecdf ≥ p.
fn order_index(m: usize, p: f64) -> usize {
    let k = (p * m as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(m) - 1
}

fn fingerprint(dict: &Dictionary) -> String {
    format!("{:?}/{:?}/{}atoms", dict.kind(), dict.grid().dims(), dict.len())
}

/// `draws` replicates of `T_N(ε)`, replicate `r` using noise stream `(seed, r)`.
pub fn simulate(dict: &Dictionary, family: &MrFamily, draws: usize, seed: u64) -> Result<QuantileTable> {
    if draws < MIN_DRAWS {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_DRAWS} draws, got {draws}"
        )));
    }
    let offsets = family.offsets(dict)?;
    let n = dict.grid().len();
    let scale = dict.grid().cell_measure().sqrt().recip();
    let stats: Vec<f64> = (0..draws as u64)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, r| {
                fill_standard_normals(buf, seed, r);
                buf.iter_mut().for_each(|x| *x *= scale);
                max_over_atoms(dict, &offsets, buf, false).value
            },
        )
        .collect();
    let mut table = QuantileTable::from_samples(stats, seed)?;
    table.dict_fingerprint = fingerprint(dict);
    table.family = Some(*family);
    Ok(table)
}

/// `med + L √(-2 log 2α)`.
pub fn borel_bound(median: f64, lipschitz: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1/2), got {alpha}")));
    }
    Ok(median + lipschitz * (-2.0 * (2.0 * alpha).ln()).sqrt())
}

/// Exact `(1-α)`-quantile of `T_N(ε)` for `N` orthonormal atoms, where
/// `T_N = max_n |Z_n| - f_N` with i.i.d. standard normal `Z_n`.
pub fn orthonormal_quantile(n_atoms: usize, family: &MrFamily, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if n_atoms == 0 {
        return Err(Error::InvalidParameter("no atoms".into()));
    }
    let offset = match family {
        MrFamily::Plain => 0.0,
        MrFamily::PenalizedLogN => family.offset(n_atoms, 1.0)?,
        MrFamily::ScaleCalibrated { .. } => {
            return Err(Error::InvalidParameter(
                "orthonormal quantile needs a scale-free family".into(),
            ))
        }
    };
    // P(max|Z| ≤ x) = (1 - p)^N with p = P(|Z| > x); solve for the per-atom tail p.
    let tail = -((-alpha).ln_1p() / n_atoms as f64).exp_m1();
    let x = -Normal::standard().inverse_cdf(0.5 * tail);
    Ok(x - offset)
}
