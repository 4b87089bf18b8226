//! Randomised properties of the contrastive and hierarchy losses.

use hyperipc::geometry::{hyp_distance, BallPoint, Curvature};
use hyperipc::grad::{finite_diff_check, FD_STEP};
use hyperipc::losses::{dho_loss, hdo_score, hyp_infonce_symmetric, root_align, root_node, NegativeBank};
use proptest::prelude::*;

fn batch(n: usize, dim: usize, c: f64) -> impl Strategy<Value = Vec<BallPoint>> {
    prop::collection::vec(prop::collection::vec(-0.5f64..0.5, dim), n).prop_map(move |rows| {
        let c = Curvature::new(c).unwrap();
        rows.into_iter().map(|r| BallPoint::new(r, c).unwrap()).collect()
    })
}

fn two_views() -> impl Strategy<Value = (Vec<BallPoint>, Vec<BallPoint>)> {
    (2usize..7, 1usize..5, prop_oneof![Just(0.1), Just(1.0)]).prop_flat_map(|(n, d, c)| (batch(n, d, c), batch(n, d, c)))
}

fn bank() -> impl Strategy<Value = NegativeBank> {
    prop_oneof![Just(NegativeBank::Cross), Just(NegativeBank::Both)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn infonce_is_symmetric_and_bounded((z1, z2) in two_views(), tau in 0.05f64..2.0, bank in bank()) {
        let ab = hyp_infonce_symmetric(&z1, &z2, tau, bank).unwrap();
        let ba = hyp_infonce_symmetric(&z2, &z1, tau, bank).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        // The positive sits in its own denominator, so every term is >= 0.
        prop_assert!(ab >= -1e-12);
        let pool = match bank {
            NegativeBank::Cross => z1.len(),
            NegativeBank::Both => 2 * z1.len() - 1,
        };
        // Each term is at most D(a, p)/tau + log(pool).
        let far = z1
            .iter()
            .flat_map(|a| z2.iter().map(move |b| hyp_distance(a, b).unwrap()))
            .fold(0.0, f64::max);
        prop_assert!(ab <= far / tau + (pool as f64).ln() + 1e-9);
    }

    #[test]
    fn dho_lies_in_unit_half_interval((z, _) in two_views()) {
        let root = root_node(&z).unwrap();
        let aligned = root_align(&z, &root).unwrap();
        let hdo = hdo_score(&aligned).unwrap();
        let dho = dho_loss(&aligned).unwrap();
        prop_assert!(hdo >= 0.0);
        prop_assert!(dho > 0.0 && dho <= 0.5);
    }

    #[test]
    fn distance_gradient_matches_differences(
        x in prop::collection::vec(-0.4f64..0.4, 3),
        y in prop::collection::vec(-0.4f64..0.4, 3),
    ) {
        prop_assume!(x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 1e-4);
        let point = [x, y].concat();
        let report = finite_diff_check(
            "hyp_distance",
            |t, p| {
                let a = t.slice(p, 0, 1, 3);
                let b = t.slice(p, 3, 1, 3);
                t.hyp_distance(a, b, 1.0)
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
