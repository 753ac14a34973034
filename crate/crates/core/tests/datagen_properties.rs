use cggm::datagen::{f1_structure, gen_chain, gen_clustered_with, sample};
use cggm::linalg::CholeskyFactor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    // Below q = 11 or p = 10 the requested edge and Θ counts cannot be placed.
    fn clustered_lambda_is_positive_definite(clusters in 1usize..4, size in 11usize..20, p in 10usize..40, seed in any::<u64>()) {
        let q = clusters * size;
        let truth = gen_clustered_with(p, q, seed, size).unwrap();
        prop_assert!(truth.lambda.is_symmetric(0.0));
        prop_assert!(CholeskyFactor::new(&truth.lambda).unwrap().is_some());
        prop_assert_eq!(truth.theta.nrows(), p);
    }

    #[test]
    fn sampling_is_a_function_of_the_seed(q in 2usize..10, n in 2usize..30, seed in any::<u64>()) {
        let truth = gen_chain(q, 1).unwrap();
        let a = sample(&truth, n, seed).unwrap();
        prop_assert_eq!(&a, &sample(&truth, n, seed).unwrap());
        prop_assert_ne!(a, sample(&truth, n, seed.wrapping_add(1)).unwrap());
    }

    #[test]
    fn f1_is_one_on_the_truth_and_bounded(q in 2usize..30) {
        let truth = gen_chain(q, 0).unwrap();
        prop_assert_eq!(f1_structure(&truth.lambda, &truth.lambda, true).unwrap().f1, 1.0);
        let s = f1_structure(&truth.theta, &truth.lambda, true).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.f1));
    }
}
