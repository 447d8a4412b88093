mod common;

use common::golden;
use mimpc_core::critic::fit_weights;
use mimpc_core::minlp::{ExampleMinlp, MinlpStrategy};
use mimpc_core::ocp::{ExampleOcp, ThetaVector};
use mimpc_core::policy::softmax;
use mimpc_core::sens::{estimate_m_c, score_function, CovarianceForm};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn theta_strategy() -> impl Strategy<Value = ThetaVector> {
    (-0.3f64..0.3, -0.3f64..0.3, -0.1f64..0.5, 0.0f64..2.0, -0.05f64..0.1)
        .prop_map(|(a, b, c, d, e)| ThetaVector::new(a, b, c, d, e))
}

fn values_strategy() -> impl Strategy<Value = Vec<Option<f64>>> {
    prop::collection::vec(prop::option::weighted(0.8, -5.0f64..5.0), 1..6)
        .prop_filter("one feasible entry", |v| v.iter().any(Option::is_some))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in values_strategy(), sigma in 1e-3f64..1.0) {
        let p = softmax(&values, sigma).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, v) in p.iter().zip(&values) {
            prop_assert!(*pi >= 0.0);
            if v.is_none() {
                prop_assert_eq!(*pi, 0.0);
            }
        }
    }

    #[test]
    fn softmax_ignores_common_shifts(values in values_strategy(), sigma in 1e-2f64..1.0, shift in -50.0f64..50.0) {
        let p = softmax(&values, sigma).unwrap();
        let moved: Vec<Option<f64>> = values.iter().map(|v| v.map(|x| x + shift)).collect();
        let q = softmax(&moved, sigma).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_average_to_zero(
        values in values_strategy(),
        grads in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 6),
        sigma in 1e-2f64..1.0,
    ) {
        let p = softmax(&values, sigma).unwrap();
        let g: Vec<Option<Vec<f64>>> = values.iter().zip(&grads).map(|(v, g)| v.map(|_| g.clone())).collect();
        let mut mean = [0.0; 5];
        for (i, pi) in p.iter().enumerate() {
            if *pi == 0.0 {
                continue;
            }
            let s = score_function(i, &p, &g, sigma).unwrap();
            for j in 0..5 {
                mean[j] += pi * s[j];
            }
        }
        // scores are O(|g| / sigma); the identity holds to rounding of that scale
        let scale = 3.0 / sigma;
        for m in mean {
            prop_assert!(m.abs() <= 1e-12 * scale.max(1.0) * 10.0, "mean score {}", m);
        }
    }

    #[test]
    fn covariance_weight_is_positive_semidefinite(s in -5.0f64..5.0, second in -10.0f64..10.0) {
        prop_assume!(s.abs() > 1e-3);
        for form in [CovarianceForm::Gram, CovarianceForm::InverseGram] {
            let (m, c) = estimate_m_c(&DMatrix::from_element(1, 1, s), &DVector::from_element(1, second), 0.01, form).unwrap();
            prop_assert!(m[(0, 0)] >= -1e-12);
            prop_assert!((&m - m.transpose()).amax() == 0.0);
            prop_assert!((c[0] - 0.005 * second).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_fit_recovers_planted_weights(
        planted in prop::collection::vec(-2.0f64..2.0, 5),
        feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 40),
    ) {
        let targets: Vec<f64> = feats.iter().map(|f| f.iter().zip(&planted).map(|(a, b)| a * b).sum()).collect();
        let fit = fit_weights(&feats, &targets).unwrap();
        prop_assume!(fit.condition < 1e4);
        for (w, p) in fit.w.iter().zip(&planted) {
            prop_assert!((w - p).abs() < 1e-6, "{} vs {}", w, p);
        }
    }

    #[test]
    fn weight_fit_ignores_sample_order(
        feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 20),
        targets in prop::collection::vec(-1.0f64..1.0, 20),
        rot in 0usize..20,
    ) {
        let a = fit_weights(&feats, &targets).unwrap();
        let mut f2 = feats.clone();
        let mut t2 = targets.clone();
        f2.rotate_left(rot);
        t2.rotate_left(rot);
        f2.reverse();
        t2.reverse();
        let b = fit_weights(&f2, &t2).unwrap();
        for (x, y) in a.w.iter().zip(&b.w) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()) * a.condition.max(1.0).sqrt());
        }
    }

    #[test]
    fn fitted_residual_is_orthogonal_to_features(
        feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 30),
        targets in prop::collection::vec(-1.0f64..1.0, 30),
    ) {
        let fit = fit_weights(&feats, &targets).unwrap();
        // sum psi (A - w' psi) = lambda w exactly for the regularized normal equations
        for j in 0..5 {
            let g: f64 = feats
                .iter()
                .zip(&targets)
                .map(|(f, a)| f[j] * (a - f.iter().zip(&fit.w).map(|(x, y)| x * y).sum::<f64>()))
                .sum();
            prop_assert!((g - fit.regularization * fit.w[j]).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn branch_values_dominate_the_optimum(theta in theta_strategy(), s in -1.5f64..1.5) {
        let ocp = ExampleOcp::new(10, golden()).unwrap();
        let minlp = ExampleMinlp::new(&ocp, &theta).unwrap();
        let table = minlp.table(s, MinlpStrategy::DynamicProgramming).unwrap();
        let (_, best) = minlp.solve(s, MinlpStrategy::DynamicProgramming).unwrap();
        for v in table.values().into_iter().flatten() {
            prop_assert!(v >= best.value - 1e-12);
        }
        for (i, plan) in table.feasible() {
            prop_assert_eq!(plan.profile.bits()[0], i);
        }
    }
}
