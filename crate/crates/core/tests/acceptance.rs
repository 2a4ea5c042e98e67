//! Acceptance suite: one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smre::dictionary::{build_dyadic, build_intervals, build_trigonometric, Dictionary};
use smre::grid::{inner, Grid, Signal};
use smre::harness::{run_consistency, run_coverage, ExperimentConfig};
use smre::mrstat::MrFamily;
use smre::operators::{Basis, ForwardOperator};
use smre::penalties::{tv_subgradient_witness_with_field, Penalty};
use smre::quantile::{borel_bound, simulate};
use smre::rates::pw_const_approx;
use smre::solver::{project_admissible, solve_shrinkage, solve_smre, ConstraintSet, SolverConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rnd(grid: &Grid, rng: &mut ChaCha8Rng, amp: f64) -> Signal {
    Signal::new(grid.clone(), (0..grid.len()).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1() -> Outcome {
    let grid = Grid::one_d(1024).unwrap();
    let dict = build_intervals(&grid, 20).unwrap();
    let t = Instant::now();
    let table = simulate(&dict, &MrFamily::Plain, 10_000, 1).unwrap();
    let el = t.elapsed();
    let q = table.quantile(0.01).unwrap();
    let lower = table.quantile(0.99).unwrap();
    outcome(
        (2.7..=3.1).contains(&q) && el < Duration::from_secs(60),
        format!(
            "N={} q(0.01)={q:.3} target [2.7,3.1]; lower 1% point {lower:.3}, median {:.3}; {}",
            dict.len(),
            table.median(),
            secs(el)
        ),
    )
}

fn criterion_2() -> Outcome {
    let n = 256;
    let grid = Grid::one_d(n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut all_converged = true;
    for _ in 0..20 {
        let decay = rng.random_range(0.0..1.5);
        let s: Vec<f64> = (0..n).map(|k| ((k + 1) as f64).powf(-decay)).collect();
        let op = ForwardOperator::diagonal_svd(&grid, Basis::Trigonometric, s).unwrap();
        let n_atoms = rng.random_range(n / 4..=n);
        let dict = build_trigonometric(&grid, n_atoms).unwrap();
        let y = rnd(&grid, &mut rng, 1.0);
        let q = rng.random_range(0.0..1.5);
        let sigma = rng.random_range(0.005..0.05);
        let c = ConstraintSet::new(&dict, &MrFamily::PenalizedLogN, q, sigma, y.clone()).unwrap();
        let res = solve_smre(&op, &c, &Penalty::SqL2, &SolverConfig::default()).unwrap();
        all_converged &= res.converged;
        let want = solve_shrinkage(&op, &y, n_atoms, q, sigma).unwrap();
        let err = (&res.estimate - &want).norm() / want.norm().max(1e-300);
        worst = worst.max(err);
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-4 && all_converged && el < Duration::from_secs(60),
        format!("max relative L2 error {worst:.2e} over 20 instances; {}", secs(el)),
    )
}

fn criterion_3() -> Outcome {
    let text = r#"
replications = 500

[problem]
grid = [256]
penalty = { kind = "sq_h1", paper_scaling = true }
dictionary = { kind = "intervals", max_len = 16 }
statistic = { kind = "plain" }
signal = { name = "bumps_kinks_jumps" }

[noise]
sigma_cell = 0.1
seed = 7

[quantile]
alpha = 0.1
draws = 10000
seed = 99
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let t = Instant::now();
    let r = run_coverage(&cfg, cfg.replications).unwrap();
    let el = t.elapsed();
    outcome(
        r.passes() && el < Duration::from_secs(600),
        format!(
            "frequency {:.3} (CI [{:.3},{:.3}]) vs threshold {:.4}, q={:.3}, non-converged {}; {}",
            r.frequency,
            r.ci.0,
            r.ci.1,
            r.threshold,
            r.q,
            r.non_converged,
            secs(el)
        ),
    )
}

fn criterion_4() -> Outcome {
    let g1 = Grid::one_d(256).unwrap();
    let g2 = Grid::two_d(32, 32).unwrap();
    let setups: Vec<(&str, Dictionary, MrFamily)> = vec![
        ("intervals", build_intervals(&g1, 16).unwrap(), MrFamily::Plain),
        ("dyadic", build_dyadic(&g2, 4).unwrap(), MrFamily::ScaleCalibrated { gamma: 2.0 }),
        ("trigonometric", build_trigonometric(&g1, 64).unwrap(), MrFamily::PenalizedLogN),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, dict, family)) in setups.iter().enumerate() {
        let table = simulate(dict, family, 4000, 40 + i as u64).unwrap();
        for alpha in [0.01, 0.05] {
            let q = table.quantile(alpha).unwrap();
            let bound = borel_bound(table.median(), family.lipschitz(), alpha).unwrap()
                + 3.0 * table.quantile_se(alpha).unwrap();
            pass &= q <= bound;
            parts.push(format!("{name} α={alpha}: {q:.3}≤{bound:.3}"));
        }
    }
    outcome(pass, parts.join("; "))
}

fn criterion_5() -> Outcome {
    let g1 = Grid::one_d(1024).unwrap();
    let g2 = Grid::two_d(64, 64).unwrap();
    let fixtures = [
        ("linear", Signal::from_fn(&g1, |x| x[0])),
        ("sqrt", Signal::from_fn(&g1, |x| x[0].sqrt())),
        (
            "hoelder-2d",
            Signal::from_fn(&g2, |x| ((x[0] - 0.3).powi(2) + (x[1] - 0.6).powi(2)).powf(0.25)),
        ),
    ];
    let mut bound_ok = true;
    let mut literal_ok = true;
    let mut corrected_ok = true;
    let mut worst_literal = 0.0f64;
    for (_, g) in &fixtures {
        for m in 1..=6 {
            let a = pw_const_approx(g, m).unwrap();
            // independent error: rebuild Σ_l a_l (level averages) cell by cell
            let (rows, cols) = g.grid().shape2();
            let d2 = g.grid().ndim() == 2;
            let mut approx = vec![0.0; g.len()];
            for (l, coeffs) in a.coefficients.iter().enumerate() {
                let (pr, pc) = (if d2 { 1 << l } else { 1 }, 1usize << l);
                let (br, bc) = (rows / pr, cols / pc);
                for r in 0..rows {
                    for c in 0..cols {
                        approx[r * cols + c] += coeffs[(r / br) * pc + c / bc];
                    }
                }
            }
            let err: f64 = g.values().iter().zip(&approx).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                * g.grid().cell_measure();
            bound_ok &= (err - a.error_sq).abs() <= 1e-12 && err <= a.bound + 1e-12;
            literal_ok &= a.sum_abs <= a.sup_norm + 1e-12;
            corrected_ok &= a.sum_level_max <= a.sup_norm + 1e-12;
            worst_literal = worst_literal.max(a.sum_abs / a.sup_norm);
        }
    }
    outcome(
        bound_ok && literal_ok,
        format!(
            "error² ≤ bound: {bound_ok}; Σ_(j,l)|b| ≤ ‖g‖∞: {literal_ok} (worst ratio {worst_literal:.2}); \
             Σ_l max_j|b| ≤ ‖g‖∞: {corrected_ok}"
        ),
    )
}

/// Exact projection by enumerating active sets and signs of the KKT system.
fn qp_oracle(dict: &Dictionary, bounds: &[f64], y: &Signal, w0: &Signal) -> Vec<f64> {
    let k = dict.len();
    let duals: Vec<Signal> = (0..k).map(|n| dict.dual_signal(n).unwrap()).collect();
    let t0: Vec<f64> = duals.iter().map(|p| inner(&(y - w0), p).unwrap()).collect();
    let gram = DMatrix::from_fn(k, k, |i, j| inner(&duals[i], &duals[j]).unwrap());
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(k as u32) {
        let mut signs = vec![0i32; k];
        let mut c = code;
        for s in signs.iter_mut() {
            *s = (c % 3) as i32 - 1;
            c /= 3;
        }
        let act: Vec<usize> = (0..k).filter(|&i| signs[i] != 0).collect();
        // w = w0 + Σ ν_i φ_i*; active constraints hold with equality
        let m = act.len();
        let nu = if m == 0 {
            DVector::zeros(0)
        } else {
            let g = DMatrix::from_fn(m, m, |a, b| gram[(act[a], act[b])]);
            let rhs = DVector::from_fn(m, |a, _| t0[act[a]] - signs[act[a]] as f64 * bounds[act[a]]);
            match g.lu().solve(&rhs) {
                Some(x) => x,
                None => continue,
            }
        };
        // multiplier for s·t ≤ c is s·ν ≥ 0
        if act.iter().enumerate().any(|(a, &i)| signs[i] as f64 * nu[a] < -1e-12) {
            continue;
        }
        let mut w = w0.values().to_vec();
        for (a, &i) in act.iter().enumerate() {
            for (x, p) in w.iter_mut().zip(duals[i].values()) {
                *x += nu[a] * p;
            }
        }
        let ws = like(w0, &w);
        let feasible = (0..k).all(|i| inner(&(y - &ws), &duals[i]).unwrap().abs() <= bounds[i] + 1e-10);
        if feasible {
            let dist = (&ws - w0).norm();
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, w));
            }
        }
    }
    best.expect("projection exists").1
}

fn like(s: &Signal, v: &[f64]) -> Signal {
    Signal::new(s.grid().clone(), v.to_vec()).unwrap()
}

fn criterion_6() -> Outcome {
    let grid = Grid::one_d(16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = SolverConfig::default();
    let mut worst = 0.0f64;
    let mut fixed_ok = true;
    for _ in 0..50 {
        let k = rng.random_range(1..=8);
        let atoms: Vec<Signal> = (0..k)
            .map(|_| {
                let a = rnd(&grid, &mut rng, 1.0);
                a.scale(rng.random_range(0.2..1.0) / a.norm())
            })
            .collect();
        let dict = Dictionary::custom(&grid, &atoms).unwrap();
        let bounds: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.5)).collect();
        let y = rnd(&grid, &mut rng, 1.0);
        let c = ConstraintSet::from_bounds(&dict, bounds.clone(), 1.0, y.clone()).unwrap();
        let w = rnd(&grid, &mut rng, 2.0);
        let got = project_admissible(&c, &w, &cfg).unwrap();
        let want = qp_oracle(&dict, &bounds, &y, &w);
        let diff = (&got.point - &like(&w, &want)).norm();
        worst = worst.max(diff);
        // the projection is itself feasible, hence fixed
        let again = project_admissible(&c, &got.point, &cfg).unwrap();
        let tol = cfg.dykstra_tol * bounds.iter().cloned().fold(0.0, f64::max);
        fixed_ok &= got.converged && (&again.point - &got.point).max_abs() <= tol && again.max_violation <= tol;
    }
    outcome(
        worst <= 1e-6 && fixed_ok,
        format!("max distance to QP oracle {worst:.2e}; fixed point within dykstra_tol: {fixed_ok}"),
    )
}

fn criterion_7() -> Outcome {
    let text = r#"
[problem]
grid = [1024]
operator = { kind = "diagonal_svd", basis = "trigonometric", decay = 1.0 }
penalty = { kind = "sq_l2" }
dictionary = { kind = "trigonometric", count = 1024 }
statistic = { kind = "penalized_logN" }

[noise]
schedule = { base = 2.0, k_min = 6, k_max = 12 }
seed = 11

[rates]
kappa = 1.0
source = { decay = 1.6, beta = 1.0, radius = 1.0 }
seeds = 20
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let r = run_consistency(&cfg).unwrap();
    outcome(
        r.bounded(10.0),
        format!(
            "max/min of D/η = {:.2}, of image error/ζ = {:.2}; log D vs log η slope {:.2}",
            r.bregman_spread,
            r.image_spread,
            r.slope.unwrap_or(f64::NAN)
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut prox_ok = true;
    let kinds = [
        Penalty::SqL2,
        Penalty::SqH1 { paper_scaling: true },
        Penalty::SqH1 { paper_scaling: false },
        Penalty::Tv,
    ];
    for grid in [Grid::one_d(64).unwrap(), Grid::two_d(12, 12).unwrap()] {
        for p in kinds {
            let v = rnd(&grid, &mut rng, 1.0);
            for tau in [0.003, 0.05, 0.5] {
                let w = p.prox(&v, tau).unwrap();
                let xi = (&v - &w).scale(1.0 / tau);
                let jw = p.eval(&w).unwrap();
                let scale = 1.0 + jw.abs() + p.eval(&v).unwrap().abs();
                for k in 0..60 {
                    let amp = [1e-3, 0.1, 1.0][k % 3];
                    let y = w.axpy(1.0, &rnd(&grid, &mut rng, amp));
                    prox_ok &= p.eval(&y).unwrap() >= jw + inner(&xi, &(&y - &w)).unwrap() - 1e-6 * scale;
                }
            }
        }
    }

    let grid = Grid::one_d(40).unwrap();
    let u = rnd(&grid, &mut rng, 1.0);
    let v = rnd(&grid, &mut rng, 1.0);
    let direct = 0.5 * grid.cell_measure() * u.values().iter().zip(v.values()).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
    let sq = Penalty::SqL2.bregman(&v, &u, None).unwrap().value;
    let sq_ok = (sq - direct).abs() <= 1e-15 * (1.0 + direct);
    let pos = u.map(|x| x.abs() + 0.1);
    let kl_ok = Penalty::Negentropy.bregman(&pos, &pos, None).unwrap().value == 0.0;

    let mut tv_ok = true;
    for n in [2usize, 7, 64, 1000, 4096] {
        let step = Signal::from_fn(&Grid::one_d(n).unwrap(), |x| f64::from(x[0] >= 0.5));
        tv_ok &= (Penalty::Tv.eval(&step).unwrap() - 1.0).abs() <= 1e-12;
    }
    let g2 = Grid::two_d(32, 32).unwrap();
    let step2 = Signal::from_fn(&g2, |x| f64::from(x[1] >= 0.5));
    tv_ok &= (Penalty::Tv.eval(&step2).unwrap() - 1.0).abs() <= 1e-12;

    let disc_grid = Grid::two_d(128, 128).unwrap();
    let disc = Signal::from_fn(&disc_grid, |x| f64::from((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2) <= 0.0625));
    let xi = tv_subgradient_witness_with_field(&disc, |x| {
        let (a, b) = (x[0] - 0.5, x[1] - 0.5);
        let r = a.hypot(b).max(1e-12);
        let damp = (-(r - 0.25).powi(2) / 0.01).exp();
        (-damp * a / r, -damp * b / r)
    })
    .unwrap();
    let j = Penalty::Tv.eval(&disc).unwrap();
    let mut disc_ok = true;
    for k in 0..100 {
        let w = if k % 2 == 0 {
            rnd(&disc_grid, &mut rng, 1.0)
        } else {
            disc.axpy(0.1, &rnd(&disc_grid, &mut rng, 1.0))
        };
        let lhs = Penalty::Tv.eval(&w).unwrap();
        disc_ok &= lhs >= j + inner(&xi, &(&w - &disc)).unwrap() - 1e-6 * (1.0 + lhs.abs());
    }
    outcome(
        prox_ok && sq_ok && kl_ok && tv_ok && disc_ok,
        format!("prox {prox_ok}, sq_l2 Bregman {sq_ok}, KL(u,u)=0 {kl_ok}, TV(step)=1 {tv_ok}, disc witness {disc_ok}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 quantile reproduction", criterion_1),
        ("2 shrinkage oracle equivalence", criterion_2),
        ("3 coverage", criterion_3),
        ("4 Borel bound", criterion_4),
        ("5 piecewise-constant certificate", criterion_5),
        ("6 projection correctness", criterion_6),
        ("7 consistency ratios", criterion_7),
        ("8 penalty unit suite", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
