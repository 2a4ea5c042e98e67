//! Regular 1-D/2-D grids on the unit cube and the signals living on them.
//!
//! Every cell carries the measure `h = 1 / cells`, so the discrete inner
//! product `h * sum(a_i * b_i)` reproduces continuum cube measures: the
//! indicator of `k` cells has squared norm `k / n`, the constant one has norm 1.

use std::io::{BufRead, BufReader, Read, Write};
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Equi-spaced grid on `[0,1]^d`, `d ∈ {1, 2}`. Dims are `[n]` or `[rows, cols]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    dims: Vec<usize>,
}

impl Grid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "only 1-D and 2-D grids are supported, got {} dims",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("zero extent in {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
        })
    }

    pub fn one_d(n: usize) -> Result<Self> {
        Self::new(&[n])
    }

    pub fn two_d(rows: usize, cols: usize) -> Result<Self> {
        Self::new(&[rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell measure `h = 1 / len`.
    pub fn cell_measure(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Side length of a cell along `axis`.
    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / self.dims[axis] as f64
    }

    /// `(rows, cols)`; a 1-D grid is a single row.
    pub fn shape2(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("grid dimension validated at construction"),
        }
    }

    /// Cell-centre coordinates of flat index `i`, ordered `(x)` or `(row, col)`.
    pub fn center(&self, i: usize) -> Vec<f64> {
        match self.dims.as_slice() {
            [n] => vec![(i as f64 + 0.5) / *n as f64],
            [r, c] => {
                let (row, col) = (i / c, i % c);
                vec![(row as f64 + 0.5) / *r as f64, (col as f64 + 0.5) / *c as f64]
            }
            _ => unreachable!(),
        }
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(self.dims.clone(), other.dims.clone()));
        }
        Ok(())
    }
}

/// Real-valued grid function, row-major in 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    grid: Grid,
    values: Vec<f64>,
}

impl Signal {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "signal length {} does not match grid {:?}",
                values.len(),
                grid.dims()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at cell {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![c; grid.len()],
        }
    }

    /// Samples `f` at cell centres.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    /// Indicator of the given cells.
    pub fn indicator(grid: &Grid, cells: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::zeros(grid);
        for c in cells {
            s.values[c] = 1.0;
        }
        s
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same grid, new values. Length is the caller's responsibility.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.grid.len());
        Self {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Signal) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        )
    }

    pub fn norm(&self) -> f64 {
        norm(self)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Add for &Signal {
    type Output = Signal;
    fn add(self, rhs: &Signal) -> Signal {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &Signal {
    type Output = Signal;
    fn sub(self, rhs: &Signal) -> Signal {
        self.axpy(-1.0, rhs)
    }
}

impl Mul<f64> for &Signal {
    type Output = Signal;
    fn mul(self, rhs: f64) -> Signal {
        self.scale(rhs)
    }
}

/// Grid-measure inner product `h * Σ a_i b_i`.
pub fn inner(a: &Signal, b: &Signal) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    Ok(inner_slices(&a.values, &b.values, a.grid.cell_measure()))
}

pub(crate) fn inner_slices(a: &[f64], b: &[f64], h: f64) -> f64 {
    h * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

pub fn norm(a: &Signal) -> f64 {
    inner_slices(&a.values, &a.values, a.grid.cell_measure()).sqrt()
}

/// Noise level and seed of the observation model `Y = K u + σ ε`.
///
/// `sigma` is the continuum level: projections of `σ ε` onto unit-norm
/// signals have standard deviation `σ`. A per-cell standard deviation
/// `s` on a grid with cell measure `h` corresponds to `σ = s * sqrt(h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
    seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise level must be positive, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }

    /// Model whose per-cell noise has standard deviation `sigma_cell`.
    pub fn from_per_cell(sigma_cell: f64, grid: &Grid, seed: u64) -> Result<Self> {
        Self::new(sigma_cell * grid.cell_measure().sqrt(), seed)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-cell standard deviation of `σ ε` on `grid`.
    pub fn per_cell_sigma(&self, grid: &Grid) -> f64 {
        self.sigma / grid.cell_measure().sqrt()
    }
}

/// Draws white noise `ε` (without the `σ` factor) for replicate `replicate`.
///
/// Cells are i.i.d. `N(0, 1/h)`, so `inner(ε, φ)` is `N(0, ‖φ‖²)`. The
/// stream is a ChaCha8 keystream keyed by `seed` and selected by
/// `replicate`, consumed cell by cell, so any replicate can be regenerated
/// independently of the others.
pub fn draw_white_noise(grid: &Grid, seed: u64, replicate: u64) -> Signal {
    let mut values = vec![0.0; grid.len()];
    fill_standard_normals(&mut values, seed, replicate);
    let scale = grid.cell_measure().sqrt().recip();
    for v in &mut values {
        *v *= scale;
    }
    Signal {
        grid: grid.clone(),
        values,
    }
}

/// Fills `out` with i.i.d. standard normals from the `(seed, replicate)` stream.
pub(crate) fn fill_standard_normals(out: &mut [f64], seed: u64, replicate: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// Observation `Y = signal + σ ε` for replicate `replicate` of `model`.
pub fn observe(clean: &Signal, model: &NoiseModel, replicate: u64) -> Signal {
    let eps = draw_white_noise(clean.grid(), model.seed(), replicate);
    clean.axpy(model.sigma(), &eps)
}

// ---------------------------------------------------------------------------
// Persistence

/// Writes one value per line under a `value` header.
pub fn write_csv(signal: &Signal, w: impl Write) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "value")?;
    for v in &signal.values {
        writeln!(w, "{v:e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(grid: &Grid, r: impl Read) -> Result<Signal> {
    let mut lines = BufReader::new(r).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "value" => {}
        Some(Ok(h)) => return Err(Error::Parse(format!("expected header `value`, got `{h}`"))),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(Error::Parse("empty signal file".into())),
    }
    let mut values = Vec::with_capacity(grid.len());
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        values.push(v);
    }
    Signal::new(grid.clone(), values)
}

pub fn save_csv(signal: &Signal, path: impl AsRef<Path>) -> Result<()> {
    write_csv(signal, std::fs::File::create(path)?)
}

pub fn load_csv(grid: &Grid, path: impl AsRef<Path>) -> Result<Signal> {
    read_csv(grid, std::fs::File::open(path)?)
}

/// Raw binary: two little-endian `u32` extents (`[n, 0]` in 1-D,
/// `[rows, cols]` in 2-D) followed by little-endian `f64` values.
pub fn write_raw(signal: &Signal, mut w: impl Write) -> Result<()> {
    let (a, b) = match signal.grid.dims() {
        [n] => (*n, 0),
        [r, c] => (*r, *c),
        _ => unreachable!(),
    };
    let to_u32 = |x: usize| {
        u32::try_from(x).map_err(|_| Error::InvalidGrid(format!("extent {x} exceeds u32")))
    };
    w.write_all(&to_u32(a)?.to_le_bytes())?;
    w.write_all(&to_u32(b)?.to_le_bytes())?;
    for v in &signal.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw(mut r: impl Read) -> Result<Signal> {
    let mut hdr = [0u8; 8];
    r.read_exact(&mut hdr)?;
    let a = u32::from_le_bytes(hdr[..4].try_into().unwrap()) as usize;
    let b = u32::from_le_bytes(hdr[4..].try_into().unwrap()) as usize;
    let grid = if b == 0 {
        Grid::one_d(a)?
    } else {
        Grid::two_d(a, b)?
    };
    let mut values = Vec::with_capacity(grid.len());
    let mut buf = [0u8; 8];
    for _ in 0..grid.len() {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Signal::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_one_has_unit_norm() {
        for g in [Grid::one_d(7).unwrap(), Grid::two_d(4, 6).unwrap()] {
            let one = Signal::constant(&g, 1.0);
            assert!((inner(&one, &one).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn disjoint_supports_are_orthogonal() {
        let g = Grid::one_d(10).unwrap();
        let a = Signal::indicator(&g, 0..4);
        let b = Signal::indicator(&g, 4..10);
        assert_eq!(inner(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn indicator_norm_matches_cell_fraction() {
        let g = Grid::one_d(12).unwrap();
        for k in 1..=12 {
            let a = Signal::indicator(&g, 0..k);
            // direct summation: k cells of measure 1/12
            let direct: f64 = (0..k).map(|_| 1.0 / 12.0).sum();
            assert!((inner(&a, &a).unwrap() - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn inner_rejects_grid_mismatch() {
        let a = Signal::zeros(&Grid::one_d(4).unwrap());
        let b = Signal::zeros(&Grid::one_d(5).unwrap());
        assert!(matches!(inner(&a, &b), Err(Error::GridMismatch(..))));
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(&[]).is_err());
        assert!(Grid::new(&[2, 2, 2]).is_err());
        assert!(Grid::new(&[0]).is_err());
        assert!(NoiseModel::new(0.0, 1).is_err());
        assert!(NoiseModel::new(-1.0, 1).is_err());
    }

    #[test]
    fn noise_is_deterministic_per_seed_and_replicate() {
        let g = Grid::two_d(8, 8).unwrap();
        let a = draw_white_noise(&g, 42, 3);
        let b = draw_white_noise(&g, 42, 3);
        let c = draw_white_noise(&g, 42, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_projection_moments() {
        // unit-norm φ* = constant one, ψ* = normalized ±1 alternation (orthogonal to φ*)
        let g = Grid::one_d(64).unwrap();
        let phi = Signal::constant(&g, 1.0);
        let psi = Signal::from_fn(&g, |x| if ((x[0] * 64.0) as usize).is_multiple_of(2) { 1.0 } else { -1.0 });
        assert!(inner(&phi, &psi).unwrap().abs() < 1e-14);
        let m = 100_000u64;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for r in 0..m {
            let e = draw_white_noise(&g, 9, r);
            let x = inner(&e, &phi).unwrap();
            let y = inner(&e, &psi).unwrap();
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        let (vx, vy, cxy) = (sxx / m as f64, syy / m as f64, sxy / m as f64);
        assert!((vx - 1.0).abs() < 0.02, "var {vx}");
        assert!((vy - 1.0).abs() < 0.02, "var {vy}");
        assert!(cxy.abs() < 0.02, "cov {cxy}");
    }

    #[test]
    fn csv_and_raw_round_trip() {
        let g = Grid::two_d(3, 5).unwrap();
        let s = Signal::from_fn(&g, |x| x[0] * 3.5 - x[1].powi(3) + 1e-17);
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        assert_eq!(read_csv(&g, buf.as_slice()).unwrap(), s);

        let mut raw = Vec::new();
        write_raw(&s, &mut raw).unwrap();
        assert_eq!(raw.len(), 8 + 8 * 15);
        assert_eq!(read_raw(raw.as_slice()).unwrap(), s);

        let s1 = Signal::from_fn(&Grid::one_d(4).unwrap(), |x| x[0]);
        let mut raw = Vec::new();
        write_raw(&s1, &mut raw).unwrap();
        assert_eq!(read_raw(raw.as_slice()).unwrap(), s1);
    }

    #[test]
    fn csv_rejects_bad_header_and_length() {
        let g = Grid::one_d(2).unwrap();
        assert!(read_csv(&g, "val\n1\n2\n".as_bytes()).is_err());
        assert!(read_csv(&g, "value\n1\n".as_bytes()).is_err());
        assert!(read_csv(&g, "value\n1\nx\n".as_bytes()).is_err());
    }
}
