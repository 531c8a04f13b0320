mod common;

use common::LinearLoss;
use proptest::prelude::*;
use rand::Rng;
use ticketlab::attack::{fgsm_perturb, perturb, pgd_attack, project_linf, AttackConfig, Classifier};
use ticketlab::model::Model;
use ticketlab::seed;
use ticketlab::tensor::Tensor;

fn linear_case(w: &[f64], b: f64, x: &[f64]) -> (LinearLoss, Tensor<f64>) {
    let d = w.len();
    let t = Tensor::new(vec![x.len() / d, d], x.to_vec()).unwrap();
    (LinearLoss { w: w.to_vec(), b }, t)
}

fn nonzero() -> impl Strategy<Value = f64> {
    prop_oneof![0.05f64..2.0, -2.0f64..-0.05]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pgd_hits_the_linear_maximum(
        w in prop::collection::vec(nonzero(), 1..8),
        b in -1.0f64..1.0,
        n in 1usize..5,
        alpha_mult in 1.0f64..2.0,
        steps in 1usize..10,
        seed_value in any::<u64>(),
    ) {
        let eps = AttackConfig::EPS;
        let mut rng = seed::rng(seed_value);
        let x: Vec<f64> = (0..n * w.len()).map(|_| rng.random_range(0.1..0.9)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let (m, xt) = linear_case(&w, b, &x);
        let cfg = AttackConfig { epsilon: eps, alpha: alpha_mult * eps, steps, random_init: false };
        let p = pgd_attack(&m, &xt, &labels, &cfg, seed_value).unwrap();
        for (s, &y) in labels.iter().enumerate() {
            for (j, wj) in w.iter().enumerate() {
                prop_assert_eq!(p.delta.data()[s * w.len() + j], eps * (-LinearLoss::sign(y) * wj).signum());
            }
        }
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        let gap = m.loss(&p.apply(&xt), &labels) - (m.loss(&xt, &labels) + eps * l1);
        prop_assert!(gap.abs() < 1e-9, "gap {gap}");
        prop_assert_eq!(p.grad_evals, steps);
    }

    #[test]
    fn random_start_with_wide_step_still_saturates(
        w in prop::collection::vec(nonzero(), 1..8),
        alpha_mult in 2.0f64..4.0,
        seed_value in any::<u64>(),
    ) {
        let eps = AttackConfig::EPS;
        let x: Vec<f64> = vec![0.5; w.len()];
        let (m, xt) = linear_case(&w, 0.0, &x);
        let cfg = AttackConfig { epsilon: eps, alpha: alpha_mult * eps, steps: 1, random_init: true };
        let p = fgsm_perturb(&m, &xt, &[1], &cfg, seed_value).unwrap();
        for (j, wj) in w.iter().enumerate() {
            prop_assert_eq!(p.delta.data()[j], -eps * wj.signum());
        }
    }

    #[test]
    fn perturbations_stay_in_the_ball_and_the_box(
        eps in 0.0f64..0.3,
        steps in 0usize..6,
        random_init in any::<bool>(),
        seed_value in any::<u64>(),
    ) {
        let mut rng = seed::rng(seed_value);
        let d = 6;
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Points on and near the box faces exercise the shift.
        let x: Vec<f64> = (0..2 * d).map(|i| [0.0, 1.0, 0.02, 0.97, 0.5, 0.3][i % 6]).collect();
        let (m, xt) = linear_case(&w, 0.1, &x);
        let cfg = AttackConfig { epsilon: eps, alpha: 0.5 * eps.max(0.01), steps, random_init };
        let p = perturb(&m, &xt, &[0, 1], &cfg, seed_value).unwrap();
        for (dv, xv) in p.delta.data().iter().zip(xt.data()) {
            prop_assert!(dv.abs() <= eps);
            prop_assert!((0.0..=1.0).contains(&(xv + dv)));
        }
    }
}

#[test]
fn fgsm_worked_example() {
    let (m, x) = linear_case(&[1.0, -2.0], 0.0, &[0.5, 0.5]);
    let cfg = AttackConfig { epsilon: 0.1, alpha: 0.1, steps: 1, random_init: false };
    let p = fgsm_perturb(&m, &x, &[1], &cfg, 0).unwrap();
    assert_eq!(p.delta.data(), &[-0.1, 0.1]);
    assert_eq!(p.grad_evals, 1);
}

#[test]
fn zero_steps_is_identity() {
    let (m, x) = linear_case(&[1.0, 2.0], 0.0, &[0.4, 0.6]);
    let p = perturb(&m, &x, &[0], &AttackConfig::pgd(0), 3).unwrap();
    assert!(p.delta.data().iter().all(|&v| v == 0.0));
    assert_eq!(p.grad_evals, 0);
}

#[test]
fn projection_clamps_then_shifts() {
    let x = Tensor::new(vec![1, 3], vec![0.0, 0.99, 0.5]).unwrap();
    let d = Tensor::new(vec![1, 3], vec![-0.2, 0.05, 0.3]).unwrap();
    let p = project_linf(&d, 0.1, &x, (0.0, 1.0)).unwrap();
    let want = [0.0f64, 1.0 - 0.99, 0.1];
    for (a, b) in p.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

fn conv_batch(rng: &mut seed::StreamRng, n: usize) -> (Tensor<f32>, Vec<usize>) {
    let x = Tensor::from_fn(&[n, 1, 16, 16], |_| rng.random::<f32>());
    let y = (0..n).map(|_| rng.random_range(0..4)).collect();
    (x, y)
}

fn mean_adv_loss(models: &[(Model, ticketlab::model::ParamSet, Tensor<f32>, Vec<usize>)], cfg: &AttackConfig) -> f64 {
    let total: f64 = models
        .iter()
        .enumerate()
        .map(|(i, (m, p, x, y))| {
            let net = m.subnetwork(p, None);
            let adv = perturb(&net, x, y, cfg, i as u64).unwrap().apply(x);
            net.loss_and_input_grad(&adv, y).unwrap().0 as f64
        })
        .sum();
    total / models.len() as f64
}

#[test]
fn more_steps_find_larger_losses_on_average() {
    let mut rng = seed::rng(77);
    let models: Vec<_> = (0..100)
        .map(|i| {
            let m = common::small_model(4);
            let p = m.init(1000 + i);
            let (x, y) = conv_batch(&mut rng, 4);
            (m, p, x, y)
        })
        .collect();
    let eps = AttackConfig::EPS;
    let fgsm = AttackConfig { epsilon: eps, alpha: eps, steps: 1, random_init: false };
    let pgd = |steps| AttackConfig { random_init: false, ..AttackConfig::pgd(steps) };
    let clean = mean_adv_loss(&models, &AttackConfig::identity());
    let f = mean_adv_loss(&models, &fgsm);
    let curve: Vec<f64> = [1, 2, 5, 10, 20].iter().map(|&s| mean_adv_loss(&models, &pgd(s))).collect();
    assert!(f > clean);
    assert!(curve[3] >= f, "PGD-10 {} < FGSM {f}", curve[3]);
    for w in curve.windows(2) {
        assert!(w[1] >= w[0], "mean loss not monotone in steps: {curve:?}");
    }
}
