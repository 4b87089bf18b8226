//! Properties of the evaluation statistics.

use hyperipc::eval::{average_ranks, mean_std, spearman, stratified_split};
use proptest::prelude::*;

fn distinct(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, len).prop_filter("needs spread", |v| {
        v.iter().any(|x| (x - v[0]).abs() > 1e-9)
    })
}

proptest! {
    #[test]
    fn spearman_is_bounded_and_rank_based(x in distinct(3..40), y_seed in distinct(3..40)) {
        let n = x.len().min(y_seed.len());
        let (x, y) = (&x[..n], &y_seed[..n]);
        prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-9) && x.iter().any(|v| (v - x[0]).abs() > 1e-9));
        let rho = spearman(x, y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        // A strictly increasing transform leaves the ranks alone.
        let warped: Vec<f64> = x.iter().map(|v| v.atan() * 3.0 + 1.0).collect();
        let rho2 = spearman(&warped, y).unwrap();
        prop_assert!((rho - rho2).abs() < 1e-12);
        prop_assert!((spearman(x, x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_to_triangular_number(v in prop::collection::vec(0u8..5, 1..30)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let r = average_ranks(&v);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn population_std_of_shifted_data(v in prop::collection::vec(-10.0f64..10.0, 1..20), shift in -5.0f64..5.0) {
        let (m, s) = mean_std(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let (m2, s2) = mean_std(&shifted);
        prop_assert!((m2 - m - shift).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-9);
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        prop_assert!((s * s - var).abs() < 1e-9);
    }

    #[test]
    fn split_partitions_every_class(labels in prop::collection::vec(0usize..4, 8..60), seed in any::<u64>()) {
        let (train, test) = stratified_split(&labels, seed, 0.7);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        prop_assert_eq!(stratified_split(&labels, seed, 0.7), (train, test));
    }
}
