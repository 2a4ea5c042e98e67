//! Atom systems tested by multiresolution statistics.
//!
//! Indicator atoms (intervals, dyadic cubes) are stored as index blocks so
//! projections reduce to box sums; basis atoms are stored densely as their
//! unit-norm duals `φ* = φ / ‖φ‖`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_slices, Grid, Signal};

/// Rectangular block of cells `[r0, r0+rows) × [c0, c0+cols)`; 1-D grids use a single row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub r0: usize,
    pub c0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    Indicator(Block),
    /// Unit-norm dual values on the full grid.
    Dense(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub support: Support,
    /// `‖φ_n‖` under the grid inner product, in `(0, 1]`.
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryKind {
    Intervals,
    Dyadic,
    Trigonometric,
    Custom,
}

/// Builder parameters, as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictionarySpec {
    Intervals {
        max_len: usize,
        #[serde(default = "one")]
        min_len: usize,
    },
    Dyadic {
        max_level: usize,
    },
    Trigonometric {
        count: usize,
    },
}

fn one() -> usize {
    1
}

impl DictionarySpec {
    pub fn build(&self, grid: &Grid) -> Result<Dictionary> {
        match *self {
            Self::Intervals { max_len, min_len } => build_interval_range(grid, min_len, max_len),
            Self::Dyadic { max_level } => build_dyadic(grid, max_level),
            Self::Trigonometric { count } => build_trigonometric(grid, count),
        }
    }
}

/// Per-level constants of a dyadic system.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicLevel {
    pub level: usize,
    /// Cumulative atom count through this level, `(2^{d(l+1)} - 1) / (2^d - 1)`.
    pub cumulative: usize,
    /// `ε_l = 2^{-l d / 2}`, the atom norm at this level.
    pub scale: f64,
    /// `δ_l = 2^{-l} √d`, the cube diameter.
    pub diameter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DictionaryMeta {
    Intervals { min_len: usize, max_len: usize },
    Dyadic { max_level: usize, levels: Vec<DyadicLevel> },
    Trigonometric { count: usize },
    Custom,
}

#[derive(Debug, Clone)]
pub struct Dictionary {
    grid: Grid,
    atoms: Vec<Atom>,
    kind: DictionaryKind,
    meta: DictionaryMeta,
}

impl Dictionary {
    fn from_parts(grid: &Grid, atoms: Vec<Atom>, kind: DictionaryKind, meta: DictionaryMeta) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidParameter("dictionary is empty".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            atoms,
            kind,
            meta,
        })
    }

    /// Dictionary from arbitrary nonzero atoms `φ_n` with `‖φ_n‖ ≤ 1`.
    pub fn custom(grid: &Grid, atoms: &[Signal]) -> Result<Self> {
        let h = grid.cell_measure();
        let mut out = Vec::with_capacity(atoms.len());
        for (i, a) in atoms.iter().enumerate() {
            grid.check_same(a.grid())?;
            let norm = a.norm();
            if !(norm > 0.0) || norm > 1.0 + 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "atom {i} has norm {norm}, expected (0, 1]"
                )));
            }
            let dual: Vec<f64> = a.values().iter().map(|v| v / norm).collect();
            debug_assert!((inner_slices(&dual, &dual, h) - 1.0).abs() < 1e-9);
            out.push(Atom {
                support: Support::Dense(dual),
                norm: norm.min(1.0),
            });
        }
        Self::from_parts(grid, out, DictionaryKind::Custom, DictionaryMeta::Custom)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    pub fn meta(&self) -> &DictionaryMeta {
        &self.meta
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom(&self, n: usize) -> Result<&Atom> {
        self.atoms.get(n).ok_or(Error::IndexOutOfRange {
            index: n,
            len: self.atoms.len(),
        })
    }

    pub fn norm(&self, n: usize) -> f64 {
        self.atoms[n].norm
    }

    pub fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.norm)
    }

    pub fn min_norm(&self) -> f64 {
        self.norms().fold(f64::INFINITY, f64::min)
    }

    /// The unit-norm dual `φ_n*` as a dense signal.
    pub fn dual_signal(&self, n: usize) -> Result<Signal> {
        let atom = self.atom(n)?;
        let values = match &atom.support {
            Support::Dense(v) => v.clone(),
            Support::Indicator(b) => {
                let mut v = vec![0.0; self.grid.len()];
                self.dual_axpy_block(b, 1.0, &mut v);
                v
            }
        };
        Signal::new(self.grid.clone(), values)
    }

    /// `⟨v, φ_n*⟩` by direct summation over the atom's support.
    pub fn dual_dot(&self, n: usize, v: &[f64]) -> f64 {
        let h = self.grid.cell_measure();
        match &self.atoms[n].support {
            Support::Dense(d) => inner_slices(d, v, h),
            Support::Indicator(b) => {
                let (_, cols) = self.grid.shape2();
                let mut s = 0.0;
                for r in b.r0..b.r0 + b.rows {
                    let row = &v[r * cols + b.c0..r * cols + b.c0 + b.cols];
                    s += row.iter().sum::<f64>();
                }
                s * (h / b.cells() as f64).sqrt()
            }
        }
    }

    /// `v += alpha * φ_n*`.
    pub fn dual_axpy(&self, n: usize, alpha: f64, v: &mut [f64]) {
        match &self.atoms[n].support {
            Support::Dense(d) => {
                for (x, y) in v.iter_mut().zip(d) {
                    *x += alpha * y;
                }
            }
            Support::Indicator(b) => self.dual_axpy_block(b, alpha, v),
        }
    }

    fn dual_axpy_block(&self, b: &Block, alpha: f64, v: &mut [f64]) {
        let (_, cols) = self.grid.shape2();
        let h = self.grid.cell_measure();
        let val = alpha / (b.cells() as f64 * h).sqrt();
        for r in b.r0..b.r0 + b.rows {
            for x in &mut v[r * cols + b.c0..r * cols + b.c0 + b.cols] {
                *x += val;
            }
        }
    }

    /// Precomputes box sums of `v` so every indicator projection costs O(1).
    pub fn projector<'a>(&'a self, v: &'a [f64]) -> Projector<'a> {
        Projector::new(self, v)
    }
}

/// Projections `⟨v, φ_n*⟩` of one fixed signal onto every atom.
pub struct Projector<'a> {
    dict: &'a Dictionary,
    v: &'a [f64],
    /// Summed-area table with a zero border, `(rows+1) × (cols+1)`.
    table: Vec<f64>,
    cols1: usize,
}

impl<'a> Projector<'a> {
    fn new(dict: &'a Dictionary, v: &'a [f64]) -> Self {
        let (rows, cols) = dict.grid.shape2();
        let has_blocks = dict
            .atoms
            .iter()
            .any(|a| matches!(a.support, Support::Indicator(_)));
        let cols1 = cols + 1;
        let mut table = Vec::new();
        if has_blocks {
            table = vec![0.0; (rows + 1) * cols1];
            for r in 0..rows {
                let mut run = 0.0;
                for c in 0..cols {
                    run += v[r * cols + c];
                    table[(r + 1) * cols1 + c + 1] = table[r * cols1 + c + 1] + run;
                }
            }
        }
        Self {
            dict,
            v,
            table,
            cols1,
        }
    }

    pub fn coeff(&self, n: usize) -> f64 {
        let h = self.dict.grid.cell_measure();
        match &self.dict.atoms[n].support {
            Support::Dense(d) => inner_slices(d, self.v, h),
            Support::Indicator(b) => {
                let t = &self.table;
                let w = self.cols1;
                let (r0, c0, r1, c1) = (b.r0, b.c0, b.r0 + b.rows, b.c0 + b.cols);
                let s = t[r1 * w + c1] - t[r0 * w + c1] - t[r1 * w + c0] + t[r0 * w + c0];
                s * (h / b.cells() as f64).sqrt()
            }
        }
    }
}

/// `⟨v, φ_n*⟩` for a single atom.
pub fn project_coeff(dict: &Dictionary, n: usize, v: &Signal) -> Result<f64> {
    dict.grid.check_same(v.grid())?;
    dict.atom(n)?;
    Ok(dict.dual_dot(n, v.values()))
}

fn block_atom(grid: &Grid, b: Block) -> Atom {
    Atom {
        support: Support::Indicator(b),
        norm: (b.cells() as f64 * grid.cell_measure()).sqrt(),
    }
}

/// Indicators of all discrete intervals of length `1..=max_len`,
/// ordered by `(length, start)`.
pub fn build_intervals(grid: &Grid, max_len: usize) -> Result<Dictionary> {
    build_interval_range(grid, 1, max_len)
}

/// Indicators of all discrete intervals with `min_len ≤ length ≤ max_len`.
pub fn build_interval_range(grid: &Grid, min_len: usize, max_len: usize) -> Result<Dictionary> {
    if grid.ndim() != 1 {
        return Err(Error::InvalidGrid("interval dictionaries need a 1-D grid".into()));
    }
    let n = grid.len();
    if min_len < 1 || max_len < min_len {
        return Err(Error::InvalidParameter(format!(
            "interval lengths must satisfy 1 ≤ min_len ≤ max_len, got {min_len}..={max_len}"
        )));
    }
    if max_len > n {
        return Err(Error::InvalidParameter(format!(
            "max_len {max_len} exceeds grid size {n}"
        )));
    }
    let mut atoms = Vec::new();
    for len in min_len..=max_len {
        for start in 0..=n - len {
            atoms.push(block_atom(
                grid,
                Block {
                    r0: 0,
                    c0: start,
                    rows: 1,
                    cols: len,
                },
            ));
        }
    }
    Dictionary::from_parts(
        grid,
        atoms,
        DictionaryKind::Intervals,
        DictionaryMeta::Intervals { min_len, max_len },
    )
}

/// `n_{l+1} = (2^{d(l+1)} - 1) / (2^d - 1)`: dyadic cubes through level `l`.
pub fn dyadic_cumulative_count(d: usize, level: usize) -> usize {
    ((1usize << (d * (level + 1))) - 1) / ((1usize << d) - 1)
}

pub fn dyadic_levels(d: usize, max_level: usize) -> Vec<DyadicLevel> {
    (0..=max_level)
        .map(|l| DyadicLevel {
            level: l,
            cumulative: dyadic_cumulative_count(d, l),
            scale: 2f64.powf(-(l as f64) * d as f64 / 2.0),
            diameter: 2f64.powi(-(l as i32)) * (d as f64).sqrt(),
        })
        .collect()
}

/// Indicators of all dyadic cubes of levels `0..=max_level`, ordered by
/// `(level, row-major position)`.
pub fn build_dyadic(grid: &Grid, max_level: usize) -> Result<Dictionary> {
    let side = 1usize
        .checked_shl(max_level as u32)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::InvalidParameter(format!("level {max_level} too large")))?;
    if grid.dims().iter().any(|&n| n % side != 0) {
        return Err(Error::Divisibility {
            dims: grid.dims().to_vec(),
            levels: max_level,
        });
    }
    let d = grid.ndim();
    let (rows, cols) = grid.shape2();
    let mut atoms = Vec::new();
    for l in 0..=max_level {
        let k = 1usize << l;
        let (row_blocks, br) = if d == 1 { (1, 1) } else { (k, rows / k) };
        let bc = cols / k;
        for i in 0..row_blocks {
            for j in 0..k {
                atoms.push(block_atom(
                    grid,
                    Block {
                        r0: i * br,
                        c0: j * bc,
                        rows: br,
                        cols: bc,
                    },
                ));
            }
        }
    }
    Dictionary::from_parts(
        grid,
        atoms,
        DictionaryKind::Dyadic,
        DictionaryMeta::Dyadic {
            max_level,
            levels: dyadic_levels(d, max_level),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TrigAtom {
    Constant,
    Cos(usize),
    Sin(usize),
}

/// Position `j` of the full real trigonometric basis on `n` cells:
/// `1, cos(2π·1x), sin(2π·1x), cos(2π·2x), …`, with the degenerate Nyquist
/// cosine (zero at cell centres) replaced by the Nyquist sine.
pub(crate) fn trig_atom(j: usize, n: usize) -> TrigAtom {
    if j == 0 {
        return TrigAtom::Constant;
    }
    let k = j.div_ceil(2);
    if j % 2 == 1 {
        if 2 * k == n {
            TrigAtom::Sin(k)
        } else {
            TrigAtom::Cos(k)
        }
    } else {
        TrigAtom::Sin(k)
    }
}

/// First `count` atoms of the trigonometric basis, each re-normalized to
/// unit grid norm.
pub fn build_trigonometric(grid: &Grid, count: usize) -> Result<Dictionary> {
    if grid.ndim() != 1 {
        return Err(Error::InvalidGrid("trigonometric dictionaries need a 1-D grid".into()));
    }
    let n = grid.len();
    if count == 0 || count > n {
        return Err(Error::InvalidParameter(format!(
            "trigonometric count must be in 1..={n}, got {count}"
        )));
    }
    let h = grid.cell_measure();
    let mut atoms = Vec::with_capacity(count);
    for j in 0..count {
        let f = |x: f64| match trig_atom(j, n) {
            TrigAtom::Constant => 1.0,
            TrigAtom::Cos(k) => 2f64.sqrt() * (2.0 * std::f64::consts::PI * k as f64 * x).cos(),
            TrigAtom::Sin(k) => 2f64.sqrt() * (2.0 * std::f64::consts::PI * k as f64 * x).sin(),
        };
        let v: Vec<f64> = (0..n).map(|i| f((i as f64 + 0.5) * h)).collect();
        let nrm = inner_slices(&v, &v, h).sqrt();
        if nrm < 1e-8 {
            return Err(Error::InvalidParameter(format!("trigonometric atom {j} vanishes on the grid")));
        }
        atoms.push(Atom {
            support: Support::Dense(v.iter().map(|x| x / nrm).collect()),
            norm: 1.0,
        });
    }
    Dictionary::from_parts(
        grid,
        atoms,
        DictionaryKind::Trigonometric,
        DictionaryMeta::Trigonometric { count },
    )
}
