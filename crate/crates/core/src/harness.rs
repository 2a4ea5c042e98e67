//! Experiment runner and command-line front end.
//!
//! An [`ExperimentConfig`] is a TOML document:
//!
//! ```toml
//! [problem]
//! grid = [1024]
//! operator = { kind = "identity" }
//! penalty = { kind = "sq_h1", paper_scaling = true }
//! dictionary = { kind = "intervals", max_len = 20 }
//! statistic = { kind = "plain" }
//! signal = { name = "bumps_kinks_jumps" }
//!
//! [noise]
//! sigma_cell = 0.05
//! seed = 7
//!
//! [quantile]
//! alpha = 0.1
//! draws = 10000
//! seed = 1
//!
//! [outputs]
//! dir = "out"
//! ```
//!
//! Optional sections: `[solver]` (see [`SolverConfig`]), `[rates]` for
//! schedules and consistency runs, and a top-level `replications`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::dictionary::{Dictionary, DictionarySpec};
use crate::error::{Error, Result};
use crate::grid::{load_csv, observe, save_csv, Grid, NoiseModel, Signal};
use crate::mrstat::{eval_stat, MrFamily};
use crate::operators::{ForwardOperator, OperatorSpec};
use crate::penalties::Penalty;
use crate::quantile::{orthonormal_quantile, simulate, QuantileTable};
use crate::rates::{schedule_dyadic, schedule_orthonormal, Schedule, SourceElement};
use crate::solver::{solve_penalized_ls, solve_shrinkage, solve_smre, ConstraintSet, SolverConfig, SolverResult};

/// Synthetic truths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestSignal {
    /// Jump of height 1 at 0.2, slope change at 0.45, Gaussian peak of
    /// width 0.01 at 0.65 and a sine section on `[0.75, 1]`.
    BumpsKinksJumps,
    Step {
        #[serde(default = "half")]
        at: f64,
        #[serde(default = "unit")]
        height: f64,
    },
    /// Indicator of the disc of `radius` about the centre of the unit square.
    Disc2d {
        #[serde(default = "quarter")]
        radius: f64,
    },
    /// `|x - c|^β` about the centre of the domain.
    HoelderBeta { beta: f64 },
}

fn half() -> f64 {
    0.5
}
fn unit() -> f64 {
    1.0
}
fn quarter() -> f64 {
    0.25
}

impl TestSignal {
    pub fn render(&self, grid: &Grid) -> Result<Signal> {
        let one_d = || {
            if grid.ndim() == 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("signal {self:?} needs a 1-D grid")))
            }
        };
        match *self {
            Self::BumpsKinksJumps => {
                one_d()?;
                Ok(Signal::from_fn(grid, |p| bumps_kinks_jumps(p[0])))
            }
            Self::Step { at, height } => {
                one_d()?;
                Ok(Signal::from_fn(grid, |p| if p[0] >= at { height } else { 0.0 }))
            }
            Self::Disc2d { radius } => {
                if grid.ndim() != 2 || !(radius > 0.0) {
                    return Err(Error::Config("disc_2d needs a 2-D grid and a positive radius".into()));
                }
                Ok(Signal::from_fn(grid, |p| {
                    let r2 = (p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2);
                    if r2 <= radius * radius {
                        1.0
                    } else {
                        0.0
                    }
                }))
            }
            Self::HoelderBeta { beta } => {
                if !(beta > 0.0) {
                    return Err(Error::Config("hoelder_beta needs beta > 0".into()));
                }
                Ok(Signal::from_fn(grid, |p| {
                    p.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>().sqrt().powf(beta)
                }))
            }
        }
    }
}

fn bumps_kinks_jumps(x: f64) -> f64 {
    let jump = if x >= 0.2 { 1.0 } else { 0.0 };
    let kink = -1.5 * (x - 0.45).max(0.0);
    let peak = (-(x - 0.65).powi(2) / (2.0 * 0.01f64.powi(2))).exp();
    let wave = if x >= 0.75 {
        0.5 * (4.0 * std::f64::consts::PI * (x - 0.75)).sin()
    } else {
        0.0
    };
    jump + kink + peak + wave
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub grid: Vec<usize>,
    #[serde(default = "identity_spec")]
    pub operator: OperatorSpec,
    pub penalty: Penalty,
    pub dictionary: DictionarySpec,
    pub statistic: MrFamily,
    #[serde(default)]
    pub signal: Option<TestSignal>,
}

fn identity_spec() -> OperatorSpec {
    OperatorSpec::Identity
}

/// Geometric levels `σ_k = scale·base^{-k}`, `k = k_min..=k_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricSchedule {
    #[serde(default = "two")]
    pub base: f64,
    #[serde(default = "unit")]
    pub scale: f64,
    pub k_min: i32,
    pub k_max: i32,
}

fn two() -> f64 {
    2.0
}

/// Noise levels are continuum levels `σ` unless given per cell
/// (`σ = σ_cell √h`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: Option<f64>,
    pub sigma_cell: Option<f64>,
    pub sigmas: Option<Vec<f64>>,
    pub schedule: Option<GeometricSchedule>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fixed threshold; skips simulation.
    pub value: Option<f64>,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_draws() -> usize {
    10_000
}

impl Default for QuantileConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            draws: default_draws(),
            seed: 0,
            value: None,
        }
    }
}

/// `θ_n ∝ n^{-decay}` scaled into the ellipsoid `Σ n^{2β} θ_n² = radius²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub decay: f64,
    pub beta: f64,
    #[serde(default = "unit")]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    #[serde(default = "unit")]
    pub kappa: f64,
    pub source: Option<SourceConfig>,
    /// Noise seeds per level in consistency runs.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
}

fn default_seeds() -> u64 {
    20
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            source: None,
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "dot")]
    pub dir: PathBuf,
}

fn dot() -> PathBuf {
    PathBuf::from(".")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: dot() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "one_rep")]
    pub replications: usize,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub quantile: QuantileConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub rates: RatesConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn one_rep() -> usize {
    1
}

/// The assembled problem: grid, operator, dictionary and penalty.
pub struct Problem {
    pub grid: Grid,
    pub op: ForwardOperator,
    pub dict: Dictionary,
    pub penalty: Penalty,
    pub family: MrFamily,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Io(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if !(self.quantile.alpha > 0.0 && self.quantile.alpha < 1.0) {
            return bad("quantile.alpha must lie in (0, 1)");
        }
        if !(self.rates.kappa > 0.0) || self.rates.seeds == 0 {
            return bad("rates.kappa must be positive and rates.seeds at least 1");
        }
        let n = &self.noise;
        if n.sigma.is_some() && n.sigma_cell.is_some() {
            return bad("give noise.sigma or noise.sigma_cell, not both");
        }
        if n.sigmas.is_some() && n.schedule.is_some() {
            return bad("give noise.sigmas or noise.schedule, not both");
        }
        if [n.sigma, n.sigma_cell].iter().flatten().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise levels must be finite and nonnegative");
        }
        self.problem.statistic.validate().map_err(config_err)?;
        let grid = self.grid()?;
        if let Some(s) = &self.problem.signal {
            s.render(&grid)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.problem.grid).map_err(config_err)
    }

    /// Builds the operator, dictionary and penalty on the configured grid.
    pub fn problem(&self) -> Result<Problem> {
        let grid = self.grid()?;
        Ok(Problem {
            op: self.problem.operator.build(&grid).map_err(config_err)?,
            dict: self.problem.dictionary.build(&grid).map_err(config_err)?,
            penalty: self.problem.penalty,
            family: self.problem.statistic,
            grid,
        })
    }

    pub fn truth(&self, grid: &Grid) -> Result<Signal> {
        self.problem
            .signal
            .ok_or_else(|| Error::Config("problem.signal is required".into()))?
            .render(grid)
    }

    /// Continuum noise level `σ`.
    pub fn sigma(&self, grid: &Grid) -> Result<f64> {
        match (self.noise.sigma, self.noise.sigma_cell) {
            (Some(s), _) => Ok(s),
            (_, Some(c)) => Ok(c * grid.cell_measure().sqrt()),
            _ => Err(Error::Config("noise.sigma or noise.sigma_cell is required".into())),
        }
    }

    /// Strictly decreasing sequence `σ_k` with its indices `k`.
    pub fn sigma_schedule(&self) -> Result<Vec<(i32, f64)>> {
        let list: Vec<(i32, f64)> = match (&self.noise.sigmas, &self.noise.schedule) {
            (Some(v), _) => v.iter().enumerate().map(|(i, s)| (i as i32 + 1, *s)).collect(),
            (_, Some(g)) => {
                if !(g.base > 1.0 && g.scale > 0.0) || g.k_min > g.k_max {
                    return Err(Error::Config("noise.schedule needs base > 1, scale > 0, k_min ≤ k_max".into()));
                }
                (g.k_min..=g.k_max).map(|k| (k, g.scale * g.base.powi(-k))).collect()
            }
            _ => return Err(Error::Config("noise.sigmas or noise.schedule is required".into())),
        };
        if list.is_empty() || list.iter().any(|p| !(p.1 > 0.0)) || list.windows(2).any(|w| w[1].1 >= w[0].1) {
            return Err(Error::Config("noise levels must be positive and strictly decreasing".into()));
        }
        Ok(list)
    }

    /// Configured threshold, or the simulated `(1-α)`-quantile.
    pub fn threshold(&self, dict: &Dictionary) -> Result<f64> {
        match self.quantile.value {
            Some(q) => Ok(q),
            None => simulate(dict, &self.problem.statistic, self.quantile.draws, self.quantile.seed)?
                .quantile(self.quantile.alpha),
        }
    }

    fn out_path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.outputs.dir)?;
        Ok(self.outputs.dir.join(name))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `sup_x |F_n(x) - Φ(x)|` for the sample against the standard normal.
pub fn ks_statistic(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Pairs `(Φ⁻¹((i + ½)/n), r_(i))` of a normal qq-plot.
pub fn qq_points(sample: &[f64]) -> Vec<(f64, f64)> {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let n = s.len() as f64;
    s.into_iter()
        .enumerate()
        .map(|(i, x)| (normal.inverse_cdf((i as f64 + 0.5) / n), x))
        .collect()
}

fn write_qq(path: &Path, sample: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "theoretical_quantile,sample_quantile")?;
    for (t, s) in qq_points(sample) {
        writeln!(w, "{t:e},{s:e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-cell standardized residuals `(Y - Kû)/σ_cell`.
fn standardized_residuals(op: &ForwardOperator, y: &Signal, u: &Signal, sigma: f64) -> Result<Vec<f64>> {
    let sigma_cell = sigma / y.grid().cell_measure().sqrt();
    let ku = op.apply(u)?;
    Ok(y.values().iter().zip(ku.values()).map(|(y, k)| (y - k) / sigma_cell).collect())
}

/// Penalized least squares with `λ` tuned by bisection in `log λ` so that
/// the residual statistic equals `q` (the largest such `λ` up to `1e-6` relative).
pub fn tune_penalized_ls(
    op: &ForwardOperator,
    y: &Signal,
    penalty: &Penalty,
    dict: &Dictionary,
    family: &MrFamily,
    q: f64,
    sigma: f64,
) -> Result<(f64, Signal)> {
    let stat = |lambda: f64| -> Result<(f64, Signal)> {
        let u = solve_penalized_ls(op, y, penalty, lambda)?;
        let r = y.axpy(-1.0, &op.apply(&u)?).scale(1.0 / sigma);
        Ok((eval_stat(dict, family, &r)?.value, u))
    };
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    let (t_lo, mut best) = stat(lo.exp())?;
    if t_lo > q {
        return Ok((lo.exp(), best));
    }
    if stat(hi.exp())?.0 <= q {
        let u = stat(hi.exp())?.1;
        return Ok((hi.exp(), u));
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        let (t, u) = stat(mid.exp())?;
        if t <= q {
            lo = mid;
            best = u;
        } else {
            hi = mid;
        }
    }
    Ok((lo.exp(), best))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub q: f64,
    pub lambda: f64,
    pub smre_ks: f64,
    pub pls_ks: f64,
    pub smre_objective: f64,
    pub pls_objective: f64,
    pub truth_objective: f64,
    pub smre: SolverResult,
    pub pls: Signal,
}

/// One denoising run on noise replicate `replicate`: SMRE against the
/// λ-tuned penalized least squares, compared through the normality of
/// their standardized residuals.
pub fn denoise_once(cfg: &ExperimentConfig, problem: &Problem, q: f64, replicate: u64) -> Result<(DemoReport, Signal, Signal)> {
    let truth = cfg.truth(&problem.grid)?;
    let sigma = cfg.sigma(&problem.grid)?;
    let clean = problem.op.apply(&truth)?;
    let y = if sigma > 0.0 {
        observe(&clean, &NoiseModel::new(sigma, cfg.noise.seed)?, replicate)
    } else {
        clean
    };
    // σ = 0 keeps the slabs at the scale of a unit noise level
    let s_eff = if sigma > 0.0 { sigma } else { 1.0 };
    let c = ConstraintSet::new(&problem.dict, &problem.family, q, s_eff, y.clone())?;
    let smre = solve_smre(&problem.op, &c, &problem.penalty, &cfg.solver)?;
    let (lambda, pls) = tune_penalized_ls(&problem.op, &y, &problem.penalty, &problem.dict, &problem.family, q, s_eff)?;
    let smre_ks = ks_statistic(&standardized_residuals(&problem.op, &y, &smre.estimate, s_eff)?);
    let pls_ks = ks_statistic(&standardized_residuals(&problem.op, &y, &pls, s_eff)?);
    let report = DemoReport {
        q,
        lambda,
        smre_ks,
        pls_ks,
        smre_objective: smre.objective,
        pls_objective: problem.penalty.eval(&pls)?,
        truth_objective: problem.penalty.eval(&truth)?,
        smre,
        pls: pls.clone(),
    };
    Ok((report, truth, y))
}

/// Writes `estimates.csv` (`x,truth,data,smre,penalized_ls`), `residuals.csv`
/// (`smre,penalized_ls`, standardized), `qq_smre.csv`, `qq_penalized_ls.csv`
/// and `diagnostics.csv` into the output directory.
pub fn run_denoise_demo(cfg: &ExperimentConfig) -> Result<DemoReport> {
    let problem = cfg.problem()?;
    let q = cfg.threshold(&problem.dict)?;
    let (rep, truth, y) = denoise_once(cfg, &problem, q, 0)?;
    let sigma = cfg.sigma(&problem.grid)?;
    let s_eff = if sigma > 0.0 { sigma } else { 1.0 };
    let rs = standardized_residuals(&problem.op, &y, &rep.smre.estimate, s_eff)?;
    let rp = standardized_residuals(&problem.op, &y, &rep.pls, s_eff)?;

    let mut w = create(&cfg.out_path("estimates.csv")?)?;
    writeln!(w, "x,truth,data,smre,penalized_ls")?;
    for i in 0..problem.grid.len() {
        let x = problem.grid.center(i)[0];
        writeln!(
            w,
            "{x:e},{:e},{:e},{:e},{:e}",
            truth.values()[i],
            y.values()[i],
            rep.smre.estimate.values()[i],
            rep.pls.values()[i]
        )?;
    }
    w.flush()?;
    let mut w = create(&cfg.out_path("residuals.csv")?)?;
    writeln!(w, "smre,penalized_ls")?;
    for (a, b) in rs.iter().zip(&rp) {
        writeln!(w, "{a:e},{b:e}")?;
    }
    w.flush()?;
    write_qq(&cfg.out_path("qq_smre.csv")?, &rs)?;
    write_qq(&cfg.out_path("qq_penalized_ls.csv")?, &rp)?;
    rep.smre.write_diagnostics(create(&cfg.out_path("diagnostics.csv")?)?)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRecord {
    pub replicate: u64,
    pub objective: f64,
    pub covered: bool,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub alpha: f64,
    pub q: f64,
    pub truth_objective: f64,
    pub replications: usize,
    pub covered: usize,
    pub frequency: f64,
    /// Clopper–Pearson 95% interval for the coverage probability.
    pub ci: (f64, f64),
    /// `1 - α - 3√(α(1-α)/R)`.
    pub threshold: f64,
    pub non_converged: usize,
    pub records: Vec<CoverageRecord>,
}

impl CoverageReport {
    pub fn passes(&self) -> bool {
        self.frequency >= self.threshold
    }

    /// CSV `replicate,objective,covered,iterations,converged`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "replicate,objective,covered,iterations,converged")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{},{},{}", r.replicate, r.objective, r.covered as u8, r.iterations, r.converged as u8)?;
        }
        Ok(())
    }
}

/// Exact binomial interval at level 95%.
pub fn clopper_pearson(successes: usize, trials: usize) -> (f64, f64) {
    let (k, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0).map_or(0.0, |b| b.inverse_cdf(0.025))
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(k + 1.0, n - k).map_or(1.0, |b| b.inverse_cdf(0.975))
    };
    (lo, hi)
}

/// Frequency of `J(û) ≤ J(u†) + 1e-9` over `replications` noise draws with
/// `q = q(α)`.
pub fn run_coverage(cfg: &ExperimentConfig, replications: usize) -> Result<CoverageReport> {
    if replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    let problem = cfg.problem()?;
    let truth = cfg.truth(&problem.grid)?;
    let sigma = cfg.sigma(&problem.grid)?;
    if !(sigma > 0.0) {
        return Err(Error::Config("coverage needs a positive noise level".into()));
    }
    let q = cfg.threshold(&problem.dict)?;
    let model = NoiseModel::new(sigma, cfg.noise.seed)?;
    let clean = problem.op.apply(&truth)?;
    let j_true = problem.penalty.eval(&truth)?;
    let records = (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let y = observe(&clean, &model, r);
            let c = ConstraintSet::new(&problem.dict, &problem.family, q, sigma, y)?;
            let res = solve_smre(&problem.op, &c, &problem.penalty, &cfg.solver)?;
            Ok(CoverageRecord {
                replicate: r,
                objective: res.objective,
                covered: res.objective <= j_true + 1e-9,
                iterations: res.iterations,
                converged: res.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let covered = records.iter().filter(|r| r.covered).count();
    let alpha = cfg.quantile.alpha;
    let rf = replications as f64;
    Ok(CoverageReport {
        alpha,
        q,
        truth_objective: j_true,
        replications,
        covered,
        frequency: covered as f64 / rf,
        ci: clopper_pearson(covered, replications),
        threshold: 1.0 - alpha - 3.0 * (alpha * (1.0 - alpha) / rf).sqrt(),
        non_converged: records.iter().filter(|r| !r.converged).count(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyRow {
    pub k: i32,
    pub sigma: f64,
    pub n_atoms: usize,
    pub eta: f64,
    pub alpha: f64,
    pub zeta: f64,
    pub q: f64,
    /// Median over seeds of `D_J^{K*p†}(û_k, u†)`.
    pub bregman: f64,
    /// Median over seeds of `max_n |⟨φ_n*, Kû_k - Ku†⟩|`.
    pub image_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    /// Least-squares slope of `log D` against `log η`; `None` for a single level.
    pub slope: Option<f64>,
    /// `max/min` of `D/η` over the levels.
    pub bregman_spread: f64,
    /// `max/min` of the image error over `ζ`.
    pub image_spread: f64,
}

impl ConsistencyReport {
    pub fn bounded(&self, factor: f64) -> bool {
        self.bregman_spread <= factor && self.image_spread <= factor
    }

    /// CSV `k,sigma,N,eta,alpha,zeta,q,bregman,image_error,bregman_over_eta,image_over_zeta`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "k,sigma,N,eta,alpha,zeta,q,bregman,image_error,bregman_over_eta,image_over_zeta")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.k,
                r.sigma,
                r.n_atoms,
                r.eta,
                r.alpha,
                r.zeta,
                r.q,
                r.bregman,
                r.image_error,
                r.bregman / r.eta,
                r.image_error / r.zeta
            )?;
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn spread(v: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = v.fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(x), b.max(x)));
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Rate experiment in the diagonal setting: `K` diagonal in its basis,
/// `J = ½‖·‖²`, the penalized-log statistic over the first `N_k` basis
/// elements and `u† = K*p†` for a power-law source. Each level uses the
/// orthonormal schedule and the exact quantile, and the estimator is the
/// closed-form soft-thresholding SMRE.
pub fn run_consistency(cfg: &ExperimentConfig) -> Result<ConsistencyReport> {
    let grid = cfg.grid()?;
    let op = cfg.problem.operator.build(&grid).map_err(config_err)?;
    let s = op
        .singular_values()
        .ok_or_else(|| Error::Config("consistency runs need a diagonal_svd operator".into()))?
        .to_vec();
    if cfg.problem.penalty != Penalty::SqL2 || cfg.problem.statistic != MrFamily::PenalizedLogN {
        return Err(Error::Config("consistency runs need penalty sq_l2 and statistic penalized_logN".into()));
    }
    let src = cfg
        .rates
        .source
        .ok_or_else(|| Error::Config("rates.source is required".into()))?;
    let p = SourceElement::power_law(grid.len(), src.decay, src.beta, src.radius).map_err(config_err)?;
    let levels = cfg.sigma_schedule()?;
    let sigmas: Vec<f64> = levels.iter().map(|l| l.1).collect();
    let schedule = schedule_orthonormal(&p, &sigmas, cfg.rates.kappa)?;
    let truth_coef: Vec<f64> = p.coeffs().iter().zip(&s).map(|(t, s)| t * s).collect();
    let truth = op.synthesize(&truth_coef)?;
    let clean = op.apply(&truth)?;
    let clean_coef = op.analyze(&clean)?;

    let mut rows = Vec::with_capacity(levels.len());
    for (rec, &(k, sigma)) in schedule.records.iter().zip(&levels) {
        let n = rec.n_atoms;
        if n > grid.len() {
            return Err(Error::Config(format!("level k = {k} needs {n} basis elements, grid has {}", grid.len())));
        }
        let q = orthonormal_quantile(n, &MrFamily::PenalizedLogN, rec.alpha)?;
        let model = NoiseModel::new(sigma, cfg.noise.seed)?;
        let per_seed = (0..cfg.rates.seeds)
            .into_par_iter()
            .map(|r| {
                let y = observe(&clean, &model, r);
                let u = solve_shrinkage(&op, &y, n, q, sigma)?;
                let diff = u.axpy(-1.0, &truth);
                let d = 0.5 * diff.norm().powi(2);
                let img = op.analyze(&op.apply(&u)?)?;
                let e = img[..n]
                    .iter()
                    .zip(&clean_coef[..n])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                Ok((d, e))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(ConsistencyRow {
            k,
            sigma,
            n_atoms: n,
            eta: rec.eta,
            alpha: rec.alpha,
            zeta: rec.zeta,
            q,
            bregman: median(per_seed.iter().map(|x| x.0).collect()),
            image_error: median(per_seed.iter().map(|x| x.1).collect()),
        });
    }
    let slope = (rows.len() >= 2).then(|| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.eta.ln(), r.bregman.max(f64::MIN_POSITIVE).ln())).collect();
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx
    });
    Ok(ConsistencyReport {
        bregman_spread: spread(rows.iter().map(|r| r.bregman / r.eta)),
        image_spread: spread(rows.iter().map(|r| r.image_error / r.zeta)),
        rows,
        slope,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleKind {
    Dyadic,
    Orthonormal,
}

/// Orthonormal schedules use `rates.source`; dyadic ones the problem signal
/// on the problem grid.
pub fn run_schedule(cfg: &ExperimentConfig, kind: ScheduleKind) -> Result<Schedule> {
    let sigmas: Vec<f64> = cfg.sigma_schedule()?.into_iter().map(|l| l.1).collect();
    match kind {
        ScheduleKind::Orthonormal => {
            let src = cfg
                .rates
                .source
                .ok_or_else(|| Error::Config("rates.source is required".into()))?;
            let len = cfg.grid()?.len();
            let p = SourceElement::power_law(len, src.decay, src.beta, src.radius).map_err(config_err)?;
            schedule_orthonormal(&p, &sigmas, cfg.rates.kappa)
        }
        ScheduleKind::Dyadic => {
            let grid = cfg.grid()?;
            schedule_dyadic(&cfg.truth(&grid)?, &sigmas, cfg.rates.kappa)
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "smre", about = "Statistical multiresolution estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the null distribution of the statistic.
    Quantile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        draws: Option<usize>,
        /// Defaults to `quantile.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one SMRE problem.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Observations as a `value` CSV; simulated from the problem signal if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Parameter schedule `k,sigma,N,eta,alpha,zeta`.
    Schedule {
        #[arg(long, value_enum)]
        kind: ScheduleKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Denoising comparison with qq-plot data.
    Demo {
        #[arg(long)]
        config: PathBuf,
    },
    /// Monte-Carlo coverage of `J(û) ≤ J(u†)`.
    Coverage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Error-versus-noise-level sweep.
    Consistency {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Exit code for an error: 2 for non-convergence, 1 for I/O and numerical
/// failures, 3 for everything caused by the configuration.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotConverged { .. } => 2,
        Error::Io(_) | Error::Domain(_) => 1,
        _ => 3,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn or_default(cfg: &ExperimentConfig, given: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match given {
        Some(p) => Ok(p),
        None => cfg.out_path(name),
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Quantile { config, alpha, draws, out } => {
            let mut cfg = ExperimentConfig::load(config)?;
            if let Some(a) = alpha {
                cfg.quantile.alpha = a;
            }
            if let Some(d) = draws {
                cfg.quantile.draws = d;
            }
            cfg.validate()?;
            let p = cfg.problem()?;
            let table: QuantileTable = simulate(&p.dict, &p.family, cfg.quantile.draws, cfg.quantile.seed)?;
            let path = or_default(&cfg, out, "quantile.csv")?;
            let mut w = create(&path)?;
            table.write_csv(&mut w)?;
            w.flush()?;
            println!("{}", table.summary_line(cfg.quantile.alpha)?);
            Ok(0)
        }
        Command::Solve { config, data, out, diagnostics } => {
            let cfg = ExperimentConfig::load(config)?;
            let p = cfg.problem()?;
            let sigma = cfg.sigma(&p.grid)?;
            let y = match data {
                Some(path) => load_csv(&p.grid, path)?,
                None => {
                    let clean = p.op.apply(&cfg.truth(&p.grid)?)?;
                    observe(&clean, &NoiseModel::new(sigma, cfg.noise.seed)?, 0)
                }
            };
            let q = cfg.threshold(&p.dict)?;
            let c = ConstraintSet::new(&p.dict, &p.family, q, sigma, y)?;
            let res = solve_smre(&p.op, &c, &p.penalty, &cfg.solver)?;
            save_csv(&res.estimate, or_default(&cfg, out, "estimate.csv")?)?;
            let mut w = create(&or_default(&cfg, diagnostics, "diagnostics.csv")?)?;
            res.write_diagnostics(&mut w)?;
            w.flush()?;
            println!(
                "iterations={} objective={:e} max_violation={:e} feasible={} converged={}",
                res.iterations, res.objective, res.max_constraint_violation, res.feasible, res.converged
            );
            Ok(if res.converged { 0 } else { 2 })
        }
        Command::Schedule { kind, config, out } => {
            let cfg = ExperimentConfig::load(config)?;
            let s = run_schedule(&cfg, kind)?;
            let mut w = create(&or_default(&cfg, out, "schedule.csv")?)?;
            s.write_csv(&mut w)?;
            w.flush()?;
            println!(
                "levels={} summable={} degenerate={}",
                s.records.len(),
                s.summable.map_or("n/a".to_string(), |b| b.to_string()),
                s.degenerate
            );
            Ok(0)
        }
        Command::Demo { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let r = run_denoise_demo(&cfg)?;
            println!(
                "q={} lambda={:e} ks_smre={:.4} ks_penalized_ls={:.4} J_smre={:e} J_truth={:e}",
                r.q, r.lambda, r.smre_ks, r.pls_ks, r.smre_objective, r.truth_objective
            );
            Ok(if r.smre.converged { 0 } else { 2 })
        }
        Command::Coverage { config, replications } => {
            let cfg = ExperimentConfig::load(config)?;
            let reps = replications.unwrap_or(cfg.replications);
            let r = run_coverage(&cfg, reps)?;
            let mut w = create(&cfg.out_path("coverage.csv")?)?;
            r.write_csv(&mut w)?;
            w.flush()?;
            println!(
                "frequency={:.4} ci=[{:.4},{:.4}] threshold={:.4} q={} non_converged={}",
                r.frequency, r.ci.0, r.ci.1, r.threshold, r.q, r.non_converged
            );
            Ok(if r.non_converged == 0 { 0 } else { 2 })
        }
        Command::Consistency { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let r = run_consistency(&cfg)?;
            let mut w = create(&cfg.out_path("consistency.csv")?)?;
            r.write_csv(&mut w)?;
            w.flush()?;
            println!(
                "levels={} slope={} bregman_spread={:.3} image_spread={:.3}",
                r.rows.len(),
                r.slope.map_or("n/a".to_string(), |s| format!("{s:.3}")),
                r.bregman_spread,
                r.image_spread
            );
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
replications = 3

[problem]
grid = [64]
penalty = { kind = "sq_h1" }
dictionary = { kind = "intervals", max_len = 8 }
statistic = { kind = "plain" }
signal = { name = "step" }

[noise]
sigma_cell = 0.1
seed = 3

[quantile]
alpha = 0.1
draws = 200
seed = 5
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.problem.penalty, Penalty::SqH1 { paper_scaling: true });
        let p = cfg.problem().unwrap();
        assert_eq!(p.dict.len(), (1..=8).map(|l| 65 - l).sum::<usize>());
        assert!((cfg.sigma(&p.grid).unwrap() - 0.1 / 8.0).abs() < 1e-15);
        assert_eq!(cfg.solver, SolverConfig::default());
    }

    #[test]
    fn config_errors() {
        for bad in [
            SMALL.replace("grid = [64]", "grid = [0]"),
            SMALL.replace("max_len = 8", "max_len = 80"),
            SMALL.replace("alpha = 0.1", "alpha = 1.5"),
            SMALL.replace("seed = 3", "seed = 3\nsigma = 0.1"),
            SMALL.replace("plain", "nonsense"),
            SMALL.replace("[noise]", "[noise]\nbogus = 1"),
        ] {
            let e = ExperimentConfig::from_toml(&bad).and_then(|c| c.problem().map(|_| ()));
            assert!(matches!(e, Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn signals() {
        let g = Grid::one_d(1000).unwrap();
        let s = TestSignal::BumpsKinksJumps.render(&g).unwrap();
        let v = s.values();
        assert!((v[200] - v[199] - 1.0).abs() < 1e-6);
        assert!((bumps_kinks_jumps(0.65) - (1.0 - 1.5 * 0.2 + 1.0)).abs() < 1e-12);
        assert_eq!(TestSignal::Step { at: 0.5, height: 1.0 }.render(&g).unwrap().sum(), 500.0);
        assert!(TestSignal::Disc2d { radius: 0.25 }.render(&g).is_err());
        let disc = TestSignal::Disc2d { radius: 0.25 }.render(&Grid::two_d(200, 200).unwrap()).unwrap();
        assert!((disc.mean() - std::f64::consts::PI / 16.0).abs() < 2e-3);
        let h = TestSignal::HoelderBeta { beta: 0.5 }.render(&g).unwrap();
        assert!((h.values()[999] - 0.4995f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ks_and_qq() {
        assert!((ks_statistic(&[0.0]) - 0.5).abs() < 1e-15);
        let normal = Normal::standard();
        let n = 2000;
        let exact: Vec<f64> = (0..n).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
        assert!((ks_statistic(&exact) - 0.5 / n as f64).abs() < 1e-9);
        let qq = qq_points(&[3.0, 1.0, 2.0]);
        assert_eq!(qq.iter().map(|p| p.1).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert!(qq[1].0.abs() < 1e-12);
    }

    #[test]
    fn clopper_pearson_examples() {
        let (lo, hi) = clopper_pearson(1, 1);
        assert_eq!(hi, 1.0);
        assert!((lo - 0.025).abs() < 1e-9);
        let (lo, hi) = clopper_pearson(0, 1);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.975).abs() < 1e-9);
        let (lo, hi) = clopper_pearson(450, 500);
        assert!(lo < 0.9 && 0.9 < hi && hi - lo < 0.06);
    }

    #[test]
    fn coverage_single_replicate() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let r = run_coverage(&cfg, 1).unwrap();
        assert_eq!(r.records.len(), 1);
        assert!(r.ci.0 == 0.0 || r.ci.1 == 1.0);
    }

    #[test]
    fn noiseless_demo_truth_is_feasible() {
        let text = SMALL.replace("sigma_cell = 0.1", "sigma = 0.0");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let p = cfg.problem().unwrap();
        let (rep, truth, y) = denoise_once(&cfg, &p, 2.0, 0).unwrap();
        assert_eq!(y, truth);
        assert!(rep.smre_objective <= rep.truth_objective + 1e-9);
    }

    #[test]
    fn huge_threshold_gives_constant() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let p = cfg.problem().unwrap();
        let (rep, _, _) = denoise_once(&cfg, &p, 1e6, 0).unwrap();
        let u = rep.smre.estimate.values();
        let spread = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - u.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-6, "{spread}");
    }

    #[test]
    fn consistency_single_level() {
        let text = r#"
[problem]
grid = [256]
operator = { kind = "diagonal_svd", decay = 1.0 }
penalty = { kind = "sq_l2" }
dictionary = { kind = "trigonometric", count = 256 }
statistic = { kind = "penalized_logN" }

[noise]
sigmas = [0.01]

[rates]
source = { decay = 1.6, beta = 1.0 }
seeds = 3
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let r = run_consistency(&cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.slope.is_none());
        assert_eq!(r.bregman_spread, 1.0);
    }
}
