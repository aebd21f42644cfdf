use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use vcl::baselines::*;
use vcl::bayes::PriorSpec;
use vcl::data::LabeledDataset;
use vcl::models::{ArchitectureSpec, PointNet};
use vcl::rng;
use vcl::trainer::{LrSchedule, TrainConfig};
use vcl::Tensor;

fn small_net(seed: u64) -> PointNet {
    let arch = ArchitectureSpec::multi_head(3, vec![5], 2, 2);
    PointNet::new_random(&arch, &mut rng::stream(seed, &[1])).unwrap()
}

fn small_data(seed: u64, n: usize, task: usize) -> LabeledDataset {
    let r = &mut rng::stream(seed, &[2]);
    let x = Tensor::randn(&[n, 3], r);
    let labels = (0..n).map(|_| r.gen_range(0..2)).collect();
    LabeledDataset::new(x, labels, 2, task).unwrap()
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: None,
        learning_rate: 0.05,
        mc_train_samples: 1,
        mc_pred_samples: 1,
        seed,
        lr_schedule: LrSchedule::Constant,
        init_variance: 1e-6,
    }
}

fn random_like(template: &[Tensor], r: &mut rng::Rng) -> Vec<Tensor> {
    template.iter().map(|t| Tensor::randn(t.shape(), r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fisher_is_additive_over_disjoint_rows(seed in any::<u64>(), n in 2usize..20, cut in 0usize..20) {
        let cut = cut % n;
        let net = small_net(seed);
        let data = small_data(seed, n, 0);
        let all: Vec<usize> = (0..n).collect();
        let whole = classifier_fisher(&net, 0, &data, &all).unwrap();
        let a = classifier_fisher(&net, 0, &data, &all[..cut]).unwrap();
        let b = classifier_fisher(&net, 0, &data, &all[cut..]).unwrap();
        for (w, s) in whole.iter().zip(add_precisions(&a, &b).unwrap()) {
            for (x, y) in w.data().iter().zip(s.data()) {
                prop_assert!(x >= &0.0);
                prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn laplace_precision_never_shrinks(seed in any::<u64>(), n in 1usize..15) {
        let net = small_net(seed);
        let prev: Vec<Tensor> = net.params().iter().map(|t| Tensor::full(t.shape(), 1.0)).collect();
        let next = laplace_propagation_update(&prev, &net, 1, &small_data(seed, n, 1)).unwrap();
        for (p, q) in prev.iter().zip(&next) {
            prop_assert!(p.data().iter().zip(q.data()).all(|(a, b)| b >= a));
        }
    }

    #[test]
    fn si_importance_is_non_negative(
        seed in any::<u64>(),
        xi in 1e-3f64..1.0,
        steps in 1usize..6,
    ) {
        let r = &mut rng::stream(seed, &[]);
        let template = vec![Tensor::zeros(&[4]), Tensor::zeros(&[2, 3])];
        let start = random_like(&template, r);
        let mut theta = start.clone();
        let mut omega: Vec<Tensor> = template.clone();
        // steps along the negative gradient of a convex quadratic decrease the loss
        for _ in 0..steps {
            let grads: Vec<Tensor> = theta.iter().map(|t| t.map(|v| 0.8 * v)).collect();
            let lr = r.gen_range(0.01..0.3);
            let delta: Vec<Tensor> = grads.iter().map(|g| g.map(|v| -lr * v)).collect();
            omega = si_accumulate(&omega, &grads, &delta).unwrap();
            theta = theta.iter().zip(&delta).map(|(t, d)| t.zip_map(d, |a, b| a + b).unwrap()).collect();
        }
        let big = si_consolidate(&omega, &start, &theta, &template, xi).unwrap();
        for t in &big {
            prop_assert!(t.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ewc_single_anchor_equals_laplace_penalty(seed in any::<u64>()) {
        let prior = PriorSpec::standard();
        let net = small_net(seed);
        let data = small_data(seed, 12, 0);
        let mut lp = RegularizedLearner::new(RegularizedMethod::Lp { lambda: 1.0 }, &net.params(), &prior).unwrap();
        let (trained, _) = regularized_task_step(&net, &mut lp, &data, 0, &cfg(seed)).unwrap();
        // the prior-inclusive Laplace precision used as an EWC Fisher at the same anchor
        let prec: Vec<Tensor> = net.params().iter().map(|t| Tensor::full(t.shape(), prior.precision())).collect();
        let phi = laplace_propagation_update(&prec, &trained, 0, &data).unwrap();
        let mut ewc = RegularizerState::new(&net.params());
        ewc.push(trained.params(), phi, 1.0).unwrap();
        let r = &mut rng::stream(seed, &[3]);
        for _ in 0..10 {
            let theta = random_like(&net.params(), r);
            let a = ewc_penalty(&theta, &ewc).unwrap();
            let b = lp.state.penalty(&theta).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn penalties_vanish_at_their_anchor(seed in any::<u64>(), lambda in 0.0f64..100.0) {
        let r = &mut rng::stream(seed, &[]);
        let theta = random_like(&[Tensor::zeros(&[3]), Tensor::zeros(&[2, 2])], r);
        let prec: Vec<Tensor> = theta.iter().map(|t| t.map(|v| v * v)).collect();
        prop_assert_eq!(quadratic_penalty(&theta, &theta, &prec, lambda).unwrap(), 0.0);
    }
}

/// Minimises `c·(½ a (θ − b)²) + c·λ Ω (θ − θ₀)²` by gradient descent.
fn argmin(c: f64, a: f64, b: f64, lambda: f64, omega: f64, theta0: f64) -> f64 {
    let curvature = c * (a + 2.0 * lambda * omega);
    let step = 0.5 / curvature;
    let mut theta = 0.0;
    for _ in 0..2000 {
        let grad = c * (a * (theta - b) + 2.0 * lambda * omega * (theta - theta0));
        theta -= step * grad;
    }
    theta
}

#[test]
fn si_argmin_unchanged_by_joint_scaling() {
    let r = &mut rng::stream(4, &[]);
    for _ in 0..20 {
        let a = r.gen_range(0.1..3.0);
        let b: f64 = r.sample(StandardNormal);
        let theta0: f64 = r.sample(StandardNormal);
        let lambda = r.gen_range(0.01..2.0);
        let omega = r.gen_range(0.0..2.0);
        let closed = (a * b + 2.0 * lambda * omega * theta0) / (a + 2.0 * lambda * omega);
        for c in [1.0, 7.5, 600.0] {
            assert!((argmin(c, a, b, lambda, omega, theta0) - closed).abs() < 1e-9);
        }
    }
}

#[test]
fn lambda_grids_have_five_points() {
    assert_eq!(EWC_LAMBDA_GRID, [1.0, 10.0, 100.0, 1000.0, 10000.0]);
    assert_eq!(SI_LAMBDA_GRID.len(), 5);
    assert_eq!(LP_LAMBDA_GRID.len(), 5);
    assert_eq!(DGM_LAMBDA_GRID, [1.0, 10.0, 100.0]);
}

#[test]
fn mle_learner_keeps_no_penalty() {
    let net = small_net(0);
    let mut l = RegularizedLearner::new(RegularizedMethod::Mle, &net.params(), &PriorSpec::standard()).unwrap();
    regularized_task_step(&net, &mut l, &small_data(0, 8, 0), 0, &cfg(0)).unwrap();
    assert!(l.state.is_empty());
    assert_eq!(l.tasks_seen, 1);
}
