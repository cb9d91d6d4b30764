mod common;

use common::constant_model;
use prbench_core::data::{synth_dataset, Split, SynthKind};
use prbench_core::trainers::{
    atpr_select_ae, batch_step, cvar_hinge_grads, generate_inputs, objective_grads, train, Method, TrainConfig,
};
use prbench_core::{Error, Model, ModelSpec, RngStream, Tensor};
use rand::Rng;

fn small_model(seed: u64) -> Model {
    Model::init(ModelSpec::mlp(4, &[6], 3), &RngStream::new(seed, "m")).unwrap()
}

fn batch(n: usize) -> (Tensor, Vec<usize>) {
    let mut g = RngStream::new(1, "x").rng();
    let x = Tensor::new(vec![n, 4], (0..n * 4).map(|_| g.gen_range(0.0..1.0)).collect()).unwrap();
    (x, (0..n).map(|i| i % 3).collect())
}

fn assert_same(a: &[Tensor], b: &[Tensor], tol: f64) {
    for (u, v) in a.iter().zip(b) {
        for (p, q) in u.data().iter().zip(v.data()) {
            assert!((p - q).abs() <= tol, "{p} vs {q}");
        }
    }
}

#[test]
fn pairing_penalty_vanishes_for_input_ignoring_models() {
    let m = constant_model(4, &[0.3, -0.2, 1.0]);
    let (x, y) = batch(6);
    let xa = x.map(|v| 1.0 - v);
    // ALP's cross-entropy is on the perturbed input, CLP's on the clean one
    for (method, base) in [(Method::Alp, Method::Pgd), (Method::Clp, Method::Erm)] {
        let (want, gw) = objective_grads(&m, base, 0.0, &x, Some(&xa), &y).unwrap();
        let (l, g) = objective_grads(&m, method, 1.0, &x, Some(&xa), &y).unwrap();
        assert!((l - want).abs() < 1e-12, "{method}");
        assert_same(&g, &gw, 1e-12);
    }
}

#[test]
fn cvar_with_full_tail_and_zero_thresholds_is_the_mean_loss() {
    // ρ = 1, α = 0 and γ = 0: every sampled copy is the clean point, so the
    // hinge objective is the clean mean cross-entropy.
    let m = small_model(3);
    let (x, y) = batch(7);
    let mut cfg = TrainConfig::new(Method::Cvar, 0.0, 0.01, 1, 1);
    cfg.risk.rho = 1.0;
    cfg.risk.samples = 4;
    let (v, g) = cvar_hinge_grads(&m, &x, &y, &[0.0; 7], &cfg, &RngStream::new(0, "c")).unwrap();
    let (erm, ge) = objective_grads(&m, Method::Erm, 0.0, &x, None, &y).unwrap();
    assert!((v - erm).abs() < 1e-12, "{v} vs {erm}");
    assert_same(&g, &ge, 1e-12);
}

#[test]
fn atpr_keeps_the_farthest_candidate() {
    let m = small_model(5);
    let (x, y) = batch(40);
    let mut cfg = TrainConfig::new(Method::AtPr, 0.3, 0.05, 3, 1);
    cfg.atpr.candidates = 2;
    cfg.atpr.walk_cap = 200;
    let s = atpr_select_ae(&m, &x, &y, &cfg, &RngStream::new(2, "two")).unwrap();
    assert_eq!(s.candidates.len(), 2);
    for i in 0..y.len() {
        let (d0, d1) = (s.distances[0][i], s.distances[1][i]);
        let want = usize::from(d1 > d0);
        assert_eq!(s.chosen[i], want, "row {i}: {d0} vs {d1}");
        assert_eq!(s.x_adv.row(i), s.candidates[want].row(i));
    }
    for (alpha, steps) in &s.hyper {
        assert!((cfg.atpr.alpha_range.0..=cfg.atpr.alpha_range.1).contains(alpha));
        assert!((cfg.atpr.steps_range.0..=cfg.atpr.steps_range.1).contains(steps));
    }
}

#[test]
fn atpr_with_one_candidate_and_no_walk_is_pgd_training() {
    let m = small_model(6);
    let (x, y) = batch(9);
    let mut pgd = TrainConfig::new(Method::Pgd, 0.2, 0.05, 4, 1);
    pgd.attack.restarts = 1;
    let mut atpr = pgd.clone();
    atpr.method = Method::AtPr;
    atpr.atpr.candidates = 1;
    atpr.atpr.walk_cap = 0;
    atpr.atpr.alpha_range = (0.05, 0.05);
    atpr.atpr.steps_range = (4, 4);
    let rng = RngStream::new(4, "batch");
    let a = batch_step(&m, &x, &y, &pgd, &rng).unwrap();
    let b = batch_step(&m, &x, &y, &atpr, &rng).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    for (u, v) in a.grads.iter().zip(&b.grads) {
        assert_eq!(u.data(), v.data());
    }
}

#[test]
fn generated_inputs_respect_the_ball() {
    let m = small_model(7);
    let (x, y) = batch(20);
    for method in [
        Method::Corruption,
        Method::Pgd,
        Method::KlPgd,
        Method::Trades,
        Method::Mart,
        Method::AtPr,
    ] {
        let cfg = TrainConfig::new(method, 0.1, 0.03, 3, 1);
        let xa = generate_inputs(&m, &x, &y, &cfg, &RngStream::new(0, "g"))
            .unwrap()
            .unwrap();
        let gap = xa.zip_map(&x, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(gap <= 0.1 + 1e-15, "{method}: {gap}");
        assert!(xa.data().iter().all(|v| (0.0..=1.0).contains(v)), "{method}");
    }
    let cfg = TrainConfig::new(Method::Erm, 0.1, 0.03, 3, 1);
    assert!(generate_inputs(&m, &x, &y, &cfg, &RngStream::new(0, "g"))
        .unwrap()
        .is_none());
}

#[test]
fn every_method_takes_a_finite_step() {
    let m = small_model(8);
    let (x, y) = batch(8);
    for method in Method::ALL {
        let mut cfg = TrainConfig::new(method, 0.1, 0.03, 2, 1);
        cfg.risk.samples = 3;
        cfg.risk.alpha_steps = 2;
        cfg.atpr.candidates = 2;
        let out = batch_step(&m, &x, &y, &cfg, &RngStream::new(1, "s")).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0, "{method}: {}", out.loss);
        assert_eq!(out.grads.len(), m.params.len());
    }
}

#[test]
fn erm_fits_separable_data_and_replays_exactly() {
    let (ds, _) = synth_dataset(SynthKind::Linear, 300, 0.0, 2, Split::Train).unwrap();
    let mut cfg = TrainConfig::new(Method::Erm, 0.05, 0.02, 3, 25);
    cfg.batch_size = 25;
    cfg.sgd.lr = 0.5;
    cfg.seed = 3;
    let spec = ModelSpec::mlp(2, &[16], 2);
    let mut seen = Vec::new();
    let a = train(&cfg, spec.clone(), &ds, |r| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (0..25).collect::<Vec<_>>());
    assert_eq!(a.log.last().unwrap().clean_acc, 1.0);
    let b = train(&cfg, spec, &ds, |_| Ok(())).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(
        a.log.iter().map(|r| r.loss).collect::<Vec<_>>(),
        b.log.iter().map(|r| r.loss).collect::<Vec<_>>()
    );
}

#[test]
fn diverging_training_reports_non_finite() {
    let (ds, _) = synth_dataset(SynthKind::Linear, 100, 0.0, 2, Split::Train).unwrap();
    let mut cfg = TrainConfig::new(Method::Erm, 0.05, 0.02, 3, 5);
    cfg.sgd.lr = 1e300;
    cfg.sgd.momentum = 0.0;
    let err = train(&cfg, ModelSpec::mlp(2, &[8], 2), &ds, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn invalid_training_configs_are_rejected() {
    let (ds, _) = synth_dataset(SynthKind::Linear, 20, 0.0, 2, Split::Train).unwrap();
    let spec = ModelSpec::mlp(2, &[], 2);
    let mut cfg = TrainConfig::new(Method::Cvar, 0.05, 0.02, 3, 1);
    cfg.risk.rho = 0.0;
    assert!(train(&cfg, spec.clone(), &ds, |_| Ok(())).is_err());
    let mut cfg = TrainConfig::new(Method::Trades, 0.05, 0.02, 3, 1);
    cfg.lambda = -1.0;
    assert!(train(&cfg, spec.clone(), &ds, |_| Ok(())).is_err());
    let mut cfg = TrainConfig::new(Method::AtPr, 0.05, 0.02, 3, 1);
    cfg.atpr.candidates = 0;
    assert!(train(&cfg, spec, &ds, |_| Ok(())).is_err());
}
