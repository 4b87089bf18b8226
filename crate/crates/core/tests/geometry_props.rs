//! Randomised invariants of the ball operations.

use hyperipc::geometry::{
    exp_map, gyromidpoint, hyp_distance, log_map, mobius_add, mobius_scalar_mul, project_to_ball, BallPoint, Curvature,
};
use proptest::prelude::*;

const TOL: f64 = 1e-8;

fn curvature() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.01), Just(0.1), Just(1.0), 0.05f64..3.0]
}

/// Point with scaled radius `sqrt(c)|x|` at most 0.9.
fn point(dim: usize, c: f64) -> impl Strategy<Value = BallPoint> {
    (prop::collection::vec(-1.0f64..1.0, dim), 0.0f64..0.9).prop_map(move |(v, r)| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let k = r / c.sqrt() / n;
        BallPoint::new(v.iter().map(|a| a * k).collect(), Curvature::new(c).unwrap()).unwrap()
    })
}

fn pair() -> impl Strategy<Value = (BallPoint, BallPoint)> {
    (1usize..9, curvature()).prop_flat_map(|(d, c)| (point(d, c), point(d, c)))
}

fn triple() -> impl Strategy<Value = (BallPoint, BallPoint, BallPoint)> {
    (1usize..9, curvature()).prop_flat_map(|(d, c)| (point(d, c), point(d, c), point(d, c)))
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn left_cancellation((x, y) in pair()) {
        let xy = mobius_add(&x, &y).unwrap();
        let back = mobius_add(&x.neg(), &xy).unwrap();
        prop_assert!(gap(back.coords(), y.coords()) < TOL);
    }

    #[test]
    fn distance_is_a_metric((x, y, z) in triple()) {
        let dxy = hyp_distance(&x, &y).unwrap();
        let dyx = hyp_distance(&y, &x).unwrap();
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - dyx).abs() <= 1e-12 * dxy.max(1.0));
        let dxz = hyp_distance(&x, &z).unwrap();
        let dzy = hyp_distance(&z, &y).unwrap();
        prop_assert!(dxy <= dxz + dzy + 1e-9);
        prop_assert!(hyp_distance(&x, &x).unwrap() < TOL);
    }

    #[test]
    fn exp_inverts_log((x, y) in pair()) {
        let v = log_map(&x, &y).unwrap();
        let back = exp_map(&x, &v).unwrap();
        prop_assert!(gap(back.coords(), y.coords()) < TOL);
    }

    #[test]
    fn scalar_multiplication_composes((_, x) in pair(), r in -2.0f64..2.0, s in -2.0f64..2.0) {
        let nested = mobius_scalar_mul(r, &mobius_scalar_mul(s, &x));
        let direct = mobius_scalar_mul(r * s, &x);
        prop_assert!(gap(nested.coords(), direct.coords()) < TOL);
    }

    #[test]
    fn midpoint_is_equidistant((x, y) in pair()) {
        let m = gyromidpoint(&[x.clone(), y.clone()]).unwrap();
        let (a, b) = (hyp_distance(&m, &x).unwrap(), hyp_distance(&m, &y).unwrap());
        prop_assert!((a - b).abs() < 1e-6 * a.max(1.0));
    }

    #[test]
    fn projection_lands_inside(v in prop::collection::vec(-1e3f64..1e3, 1..8), c in curvature()) {
        let c = Curvature::new(c).unwrap();
        let p = project_to_ball(&v, c);
        prop_assert!(p.norm() <= c.max_norm() * (1.0 + 1e-12));
    }
}
