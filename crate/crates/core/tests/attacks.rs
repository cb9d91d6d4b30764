mod common;

use common::{constant_model, dataset, linear_model, threshold_model};
use prbench_core::attacks::{auto_proxy, pgd_attack, AttackLoss, AttackSpec, PROXY_RESTARTS, PROXY_STEPS};
use prbench_core::metrics::adversarial_accuracy;
use prbench_core::perturbation::Bounds;
use prbench_core::{Model, ModelSpec, RngStream, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn random_mlp(d: usize, k: usize, seed: u64) -> Model {
    Model::init(ModelSpec::mlp(d, &[8], k), &RngStream::new(seed, "model")).unwrap()
}

fn flips(model: &Model, x: &Tensor, delta: &Tensor, y: &[usize]) -> Vec<bool> {
    let adv = x.zip_map(delta, |a, b| a + b).unwrap();
    model
        .predict(&adv)
        .unwrap()
        .iter()
        .zip(y)
        .map(|(p, t)| p != t)
        .collect()
}

#[test]
fn pgd_stays_in_ball_and_domain() {
    let model = random_mlp(6, 3, 1);
    let x = random_points(300, 6, 2);
    let y = model.predict(&x).unwrap();
    for loss in [AttackLoss::Ce, AttackLoss::Kl, AttackLoss::CwMargin] {
        let atk = AttackSpec::pgd(0.1, 0.03, 10).with_loss(loss).with_restarts(2);
        let d = pgd_attack(&model, &x, &y, &atk, &RngStream::new(0, "ball")).unwrap();
        assert!(d.max_abs() <= 0.1, "{loss:?}");
        let adv = x.zip_map(&d, |a, b| a + b).unwrap();
        assert!(Bounds::UNIT.contains(&adv), "{loss:?}");
    }
}

#[test]
fn pgd_is_deterministic_per_stream() {
    let model = random_mlp(5, 4, 3);
    let x = random_points(200, 5, 4);
    let y = vec![0; 200];
    let atk = AttackSpec::pgd(0.2, 0.05, 7).with_restarts(3);
    let s = RngStream::new(9, "det");
    let a = pgd_attack(&model, &x, &y, &atk, &s).unwrap();
    let b = pgd_attack(&model, &x, &y, &atk, &s).unwrap();
    assert_eq!(a.data(), b.data());
    // row results do not depend on which other rows share the batch
    let head = x.select_rows(&[0, 1, 2]);
    let c = pgd_attack(&model, &head, &y[..3], &atk, &s).unwrap();
    assert_eq!(c.data(), &a.data()[..15]);
}

#[test]
fn success_grows_with_budget_on_linear_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let model = linear_model(4, 2, &w, &[0.1, -0.1]);
    let x = random_points(400, 4, 6);
    let y = model.predict(&x).unwrap();
    let data = dataset(x.data(), 4, y, 2, Bounds::UNIT);
    let gamma = 0.1;
    let acc: Vec<f64> = [0.0, gamma / 2.0, gamma]
        .iter()
        .map(|&r| {
            let atk = AttackSpec::pgd(r, (r / 4.0).max(1e-9), 20);
            adversarial_accuracy(&model, &data, &atk, &RngStream::new(0, "budget")).unwrap()
        })
        .collect();
    assert_eq!(acc[0], 1.0);
    assert!(acc[1] <= acc[0] && acc[2] <= acc[1], "{acc:?}");
    assert!(acc[2] < 1.0);
}

#[test]
fn zero_start_attack_never_beats_clean_accuracy() {
    let model = random_mlp(3, 3, 8);
    let x = random_points(300, 3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let y: Vec<usize> = (0..300).map(|_| rng.gen_range(0..3)).collect();
    let clean = model.accuracy(&x, &y).unwrap();
    let data = dataset(x.data(), 3, y, 3, Bounds::UNIT);
    let atk = AttackSpec {
        random_start: false,
        ..AttackSpec::pgd(0.05, 0.01, 10)
    };
    let adv = adversarial_accuracy(&model, &data, &atk, &RngStream::new(0, "z")).unwrap();
    assert!(adv <= clean, "{adv} > {clean}");
}

#[test]
fn zero_radius_gives_clean_accuracy() {
    let model = random_mlp(3, 2, 11);
    let x = random_points(100, 3, 12);
    let y: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let clean = model.accuracy(&x, &y).unwrap();
    let data = dataset(x.data(), 3, y, 2, Bounds::UNIT);
    let atk = AttackSpec::pgd(0.0, 0.01, 5);
    assert_eq!(
        adversarial_accuracy(&model, &data, &atk, &RngStream::new(0, "0")).unwrap(),
        clean
    );
}

#[test]
fn always_wrong_model_has_zero_adversarial_accuracy() {
    let model = constant_model(2, &[0.0, 3.0]);
    let data = dataset(&[0.2, 0.3, 0.8, 0.1, 0.5, 0.5], 2, vec![0, 0, 0], 2, Bounds::UNIT);
    let atk = AttackSpec::pgd(0.1, 0.05, 5);
    assert_eq!(
        adversarial_accuracy(&model, &data, &atk, &RngStream::new(0, "w")).unwrap(),
        0.0
    );
}

#[test]
fn proxy_leaves_robust_points_unbroken() {
    // threshold at 0; points 0.5 away cannot be flipped with γ = 0.1
    let model = threshold_model();
    let x = Tensor::new(vec![2, 1], vec![0.5, -0.5]).unwrap();
    let out = auto_proxy(
        &model,
        &x,
        &[1, 0],
        0.1,
        Bounds::new(-1.0, 1.0).unwrap(),
        &RngStream::new(0, "p"),
    )
    .unwrap();
    assert_eq!(out.broken, vec![false, false]);
    assert!(out.delta.max_abs() <= 0.1);
}

#[test]
fn proxy_returns_the_margin_attack_when_only_it_succeeds() {
    let radius = 0.08;
    let base = AttackSpec {
        restarts: PROXY_RESTARTS,
        ..AttackSpec::pgd(radius, radius / 4.0, PROXY_STEPS)
    };
    let mut seen = 0;
    for seed in 0..40 {
        let model = random_mlp(2, 4, 100 + seed);
        let x = random_points(100, 2, 200 + seed);
        let y = model.predict(&x).unwrap();
        let rng = RngStream::new(seed, "cw-only");
        let out = auto_proxy(&model, &x, &y, radius, Bounds::UNIT, &rng).unwrap();
        let ce = pgd_attack(&model, &x, &y, &base, &rng.child("proxy0")).unwrap();
        let cw = pgd_attack(
            &model,
            &x,
            &y,
            &base.with_loss(AttackLoss::CwMargin),
            &rng.child("proxy1"),
        )
        .unwrap();
        let (ce_flip, cw_flip) = (flips(&model, &x, &ce, &y), flips(&model, &x, &cw, &y));
        for i in 0..y.len() {
            assert_eq!(out.broken[i], ce_flip[i] || cw_flip[i]);
            if cw_flip[i] && !ce_flip[i] {
                seen += 1;
                assert_eq!(out.chosen[i], 1);
                assert_eq!(out.delta.row(i), cw.row(i));
            }
        }
    }
    assert!(seen > 0, "no point was broken by the margin attack alone");
}

#[test]
fn proxy_breaks_at_least_as_many_points_as_pgd_ce() {
    let radius = 0.05;
    let model = random_mlp(4, 3, 21);
    let x = random_points(200, 4, 22);
    let y = model.predict(&x).unwrap();
    let rng = RngStream::new(3, "superset");
    let out = auto_proxy(&model, &x, &y, radius, Bounds::UNIT, &rng).unwrap();
    let ce = AttackSpec {
        restarts: PROXY_RESTARTS,
        ..AttackSpec::pgd(radius, radius / 4.0, PROXY_STEPS)
    };
    let d = pgd_attack(&model, &x, &y, &ce, &rng.child("proxy0")).unwrap();
    let pgd_broken = flips(&model, &x, &d, &y).iter().filter(|b| **b).count();
    let proxy_broken = out.broken.iter().filter(|b| **b).count();
    assert!(proxy_broken >= pgd_broken, "{proxy_broken} < {pgd_broken}");
    assert!(out.delta.max_abs() <= radius);
}

#[test]
fn invalid_attack_specs_are_rejected() {
    let model = threshold_model();
    let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let s = RngStream::new(0, "bad");
    assert!(pgd_attack(&model, &x, &[1], &AttackSpec::pgd(0.1, 0.0, 5), &s).is_err());
    assert!(pgd_attack(&model, &x, &[1], &AttackSpec::pgd(0.1, 0.1, 0), &s).is_err());
    assert!(pgd_attack(&model, &x, &[1, 0], &AttackSpec::pgd(0.1, 0.1, 1), &s).is_err());
}
