use prbench_core::perturbation::{apply_and_clip, fit_delta, Bounds, NoiseFamily, PerturbationSpec};
use prbench_core::{RngStream, Tensor};

const FAMILIES: [NoiseFamily; 3] = [NoiseFamily::Uniform, NoiseFamily::Gaussian, NoiseFamily::Laplace];

#[test]
fn draws_never_leave_the_ball() {
    for family in FAMILIES {
        for radius in [0.0, 1e-3, 0.1, 0.3, 8.0 / 255.0] {
            let spec = PerturbationSpec::uniform(radius).with_family(family);
            let mut rng = RngStream::new(3, family.as_str()).rng();
            for _ in 0..200 {
                let d = spec.sample_delta(&[4, 5], &mut rng);
                assert!(d.max_abs() <= radius, "{family:?} γ={radius}: {}", d.max_abs());
            }
        }
    }
}

#[test]
fn perturbed_inputs_stay_in_the_domain() {
    let spec = PerturbationSpec::uniform(0.3);
    let x = Tensor::new(vec![1, 4], vec![0.0, 0.05, 0.95, 1.0]).unwrap();
    let mut rng = RngStream::new(0, "domain").rng();
    for _ in 0..500 {
        assert!(Bounds::UNIT.contains(&spec.perturb(&x, &mut rng)));
    }
}

#[test]
fn same_stream_replays_identical_noise() {
    let spec = PerturbationSpec::uniform(0.2).with_family(NoiseFamily::Laplace);
    let s = RngStream::new(11, "replay").child("batch").at(4);
    let a = spec.sample_delta(&[3, 3], &mut s.rng());
    let b = spec.sample_delta(&[3, 3], &mut s.rng());
    assert_eq!(a.data(), b.data());
    let c = spec.sample_delta(&[3, 3], &mut s.child("other").rng());
    assert_ne!(a.data(), c.data());
}

#[test]
fn uniform_draws_pass_kolmogorov_smirnov() {
    let radius = 0.25;
    let n = 10_000;
    let spec = PerturbationSpec::uniform(radius);
    let mut v = spec.sample_delta(&[n], &mut RngStream::new(5, "ks").rng()).into_data();
    v.sort_by(f64::total_cmp);
    let cdf = |x: f64| (x + radius) / (2.0 * radius);
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n as f64)
                .abs()
                .max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample statistic
    let crit = 1.628 / (n as f64).sqrt();
    assert!(d < crit, "D = {d}, critical {crit}");
}

#[test]
fn clipped_families_put_mass_on_the_boundary() {
    // scale 2γ makes clipping common for both heavy-ish families
    for family in [NoiseFamily::Gaussian, NoiseFamily::Laplace] {
        let spec = PerturbationSpec {
            scale: Some(0.2),
            ..PerturbationSpec::uniform(0.1).with_family(family)
        };
        let d = spec.sample_delta(&[2000], &mut RngStream::new(1, "clip").rng());
        let at_edge = d.data().iter().filter(|v| v.abs() == 0.1).count();
        assert!(at_edge > 200, "{family:?}: {at_edge}");
    }
}

#[test]
fn fit_delta_satisfies_both_constraints_exactly() {
    let bounds = Bounds::UNIT;
    let x = [0.0, 0.1, 0.7, 0.99, 1.0, 0.3];
    let mut d = [-0.5, 0.4, 0.3, 0.02, 0.2, -0.3];
    fit_delta(&x, &mut d, 0.3, bounds);
    for (xi, di) in x.iter().zip(&d) {
        assert!(di.abs() <= 0.3);
        assert!((0.0..=1.0).contains(&(xi + di)));
    }
    assert_eq!(d[0], 0.0);
    assert_eq!(d[2], 0.3);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(PerturbationSpec::uniform(-0.1).validate().is_err());
    assert!(PerturbationSpec::uniform(f64::NAN).validate().is_err());
    let bad_scale = PerturbationSpec {
        scale: Some(0.0),
        ..PerturbationSpec::uniform(0.1)
    };
    assert!(bad_scale.validate().is_err());
    assert!(Bounds::new(1.0, 0.0).is_err());
    let x = Tensor::zeros(&[2, 2]);
    assert!(apply_and_clip(&x, &Tensor::zeros(&[4]), Bounds::UNIT).is_err());
}
