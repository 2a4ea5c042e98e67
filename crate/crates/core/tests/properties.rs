use proptest::prelude::*;

use smre::dictionary::build_intervals;
use smre::grid::{inner, read_csv, read_raw, write_csv, write_raw, Grid, Signal};
use smre::penalties::Penalty;
use smre::quantile::QuantileTable;
use smre::rates::{modulus_of_continuity, SourceElement};
use smre::solver::{project_admissible, ConstraintSet, SolverConfig};

fn signal(n: usize) -> impl Strategy<Value = Signal> {
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Signal::new(Grid::one_d(n).unwrap(), v).unwrap())
}

fn pair(n: usize) -> impl Strategy<Value = (Signal, Signal)> {
    (signal(n), signal(n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inner_is_symmetric_and_bilinear((a, b) in pair(17), c in signal(17), s in -2.0f64..2.0) {
        let ab = inner(&a, &b).unwrap();
        prop_assert!((ab - inner(&b, &a).unwrap()).abs() < 1e-12);
        let lhs = inner(&a.axpy(s, &c), &b).unwrap();
        let rhs = ab + s * inner(&c, &b).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
        prop_assert!(inner(&a, &a).unwrap() >= 0.0);
    }

    #[test]
    fn quantiles_decrease_in_alpha(draws in prop::collection::vec(0.0f64..10.0, 100..300), a in 0.001f64..0.99, b in 0.001f64..0.99) {
        let t = QuantileTable::from_samples(draws, 0).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(t.quantile(lo).unwrap() >= t.quantile(hi).unwrap());
    }

    #[test]
    fn prox_is_nonexpansive((a, b) in pair(24), tau in 0.001f64..1.0, kind in 0usize..3) {
        let p = [Penalty::SqL2, Penalty::SqH1 { paper_scaling: true }, Penalty::Tv][kind];
        let (pa, pb) = (p.prox(&a, tau).unwrap(), p.prox(&b, tau).unwrap());
        prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-9);
    }

    #[test]
    fn tail_error_is_nonincreasing(c in prop::collection::vec(-1.0f64..1.0, 1..60)) {
        let p = SourceElement::new(c.clone()).unwrap();
        for n in 0..c.len() {
            prop_assert!(p.err(n + 1) <= p.err(n));
        }
        prop_assert_eq!(p.err(c.len()), 0.0);
    }

    #[test]
    fn modulus_is_monotone_in_delta(g in signal(50), d1 in 0.001f64..1.0, d2 in 0.001f64..1.0) {
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(modulus_of_continuity(&g, lo).unwrap() <= modulus_of_continuity(&g, hi).unwrap());
    }

    #[test]
    fn projection_is_feasible_and_idempotent((y, w) in pair(16), width in 0.05f64..1.0) {
        let dict = build_intervals(y.grid(), 4).unwrap();
        let c = ConstraintSet::from_bounds(&dict, vec![width; dict.len()], 1.0, y).unwrap();
        let cfg = SolverConfig::default();
        let p = project_admissible(&c, &w, &cfg).unwrap();
        prop_assert!(p.converged);
        prop_assert!(p.max_violation <= 1e-8 * width);
        let again = project_admissible(&c, &p.point, &cfg).unwrap();
        prop_assert_eq!(again.point, p.point);
    }

    #[test]
    fn signals_round_trip(g in signal(13)) {
        let mut buf = Vec::new();
        write_csv(&g, &mut buf).unwrap();
        prop_assert_eq!(read_csv(g.grid(), buf.as_slice()).unwrap(), g.clone());
        let mut raw = Vec::new();
        write_raw(&g, &mut raw).unwrap();
        prop_assert_eq!(read_raw(raw.as_slice()).unwrap(), g);
    }
}
