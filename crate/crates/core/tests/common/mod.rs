//! Hand-built models, datasets and report fixtures shared by the integration tests.
#![allow(dead_code)]

use prbench_core::data::{Dataset, Split};
use prbench_core::perturbation::{Bounds, NoiseFamily};
use prbench_core::report::{
    AttackResult, EvalAttack, EvalReport, GeResult, PerturbationNotes, PrResult, ProbAccResult, SCHEMA_VERSION,
};
use prbench_core::{Model, ModelParams, ModelSpec, Tensor};

pub fn set(params: &mut ModelParams, name: &str, data: &[f64]) {
    params
        .get_mut(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data_mut()
        .copy_from_slice(data);
}

/// Single-layer model on `d` inputs: logits `x·W + b` with `W` given row-major `(d, k)`.
pub fn linear_model(d: usize, k: usize, w: &[f64], b: &[f64]) -> Model {
    let spec = ModelSpec::mlp(d, &[], k);
    let mut p = ModelParams::zeros(&spec);
    set(&mut p, "fc0.weight", w);
    set(&mut p, "fc0.bias", b);
    Model::new(spec, p).unwrap()
}

/// 1-D threshold classifier: logits `[0, x]`, so class 1 iff `x > 0`.
pub fn threshold_model() -> Model {
    linear_model(1, 2, &[0.0, 1.0], &[0.0, 0.0])
}

/// 1-D classifier predicting class 1 exactly on `(0, 0.5)`:
/// logit₁ = relu(x) − 2·relu(x − 0.25) + relu(x − 0.5), logit₀ = 0.
pub fn hat_model() -> Model {
    let spec = ModelSpec::mlp(1, &[3], 2);
    let mut p = ModelParams::zeros(&spec);
    set(&mut p, "fc0.weight", &[1.0, 1.0, 1.0]);
    set(&mut p, "fc0.bias", &[0.0, -0.25, -0.5]);
    set(&mut p, "fc1.weight", &[0.0, 1.0, 0.0, -2.0, 0.0, 1.0]);
    set(&mut p, "fc1.bias", &[0.0, 0.0]);
    Model::new(spec, p).unwrap()
}

/// Model whose logits ignore the input.
pub fn constant_model(d: usize, logits: &[f64]) -> Model {
    linear_model(d, logits.len(), &vec![0.0; d * logits.len()], logits)
}

pub fn dataset(xs: &[f64], d: usize, y: Vec<usize>, classes: usize, bounds: Bounds) -> Dataset {
    let n = xs.len() / d;
    Dataset::new(
        "fixture",
        Tensor::new(vec![n, d], xs.to_vec()).unwrap(),
        y,
        classes,
        Split::Test,
        bounds,
    )
    .unwrap()
}

/// Table-3 (CIFAR-10, ResNet-18) rows in column order: Acc, PGD10, PGD20,
/// CW20, AA, PR×4, ProbAcc×3, GE_AR, GE_PR×4, Time.
pub const TABLE3: [(&str, [f64; 18]); 10] = [
    (
        "erm",
        [
            94.85, 0.01, 0.0, 0.0, 0.0, 97.64, 76.19, 61.65, 47.07, 95.04, 93.48, 89.82, 0.0, 6.24, 3.98, 2.94, 2.54,
            3.0,
        ],
    ),
    (
        "corruption",
        [
            94.17, 0.28, 0.05, 0.02, 0.0, 99.12, 90.92, 82.32, 70.48, 97.78, 97.02, 94.9, 0.04, 4.83, 6.24, 4.79, 2.31,
            3.0,
        ],
    ),
    (
        "cvar",
        [
            89.91, 41.79, 33.45, 0.0, 0.0, 98.67, 87.75, 78.62, 68.27, 96.63, 95.49, 92.56, 1.13, 3.9, 4.56, 3.9, 2.72,
            61.0,
        ],
    ),
    (
        "at-pr",
        [
            86.35, 48.22, 46.53, 47.39, 44.01, 99.68, 98.13, 97.01, 95.46, 99.13, 98.82, 98.24, 27.43, 11.69, 11.81,
            11.86, 12.57, 160.0,
        ],
    ),
    (
        "pgd",
        [
            83.83, 50.86, 49.46, 49.18, 46.34, 99.63, 97.89, 96.59, 94.85, 99.05, 98.73, 98.01, 25.02, 11.4, 11.01,
            11.2, 12.03, 30.0,
        ],
    ),
    (
        "trades",
        [
            83.34, 54.09, 53.15, 50.84, 48.99, 99.55, 97.74, 96.33, 94.55, 98.88, 98.68, 98.22, 16.12, 10.29, 10.22,
            10.08, 10.27, 25.0,
        ],
    ),
    (
        "mart",
        [
            82.26, 54.83, 53.84, 49.63, 46.94, 99.56, 97.4, 95.92, 93.93, 98.88, 98.58, 98.04, 17.4, 6.84, 7.23, 7.73,
            8.07, 22.0,
        ],
    ),
    (
        "alp",
        [
            73.98, 54.41, 54.08, 50.72, 48.41, 99.27, 96.73, 95.16, 93.24, 98.55, 98.29, 97.85, 8.44, 5.26, 5.93, 5.52,
            4.44, 36.0,
        ],
    ),
    (
        "clp",
        [
            81.47, 54.12, 53.34, 51.05, 49.05, 99.53, 97.61, 96.29, 94.54, 98.73, 98.52, 97.88, 15.32, 8.05, 7.94,
            8.29, 8.7, 36.0,
        ],
    ),
    (
        "kl-pgd",
        [
            87.55, 49.4, 48.43, 47.06, 44.77, 99.63, 97.86, 96.54, 94.72, 99.07, 98.73, 98.14, 14.57, 7.28, 7.06, 7.46,
            8.15, 27.0,
        ],
    ),
];

/// Composite scores of [`TABLE3`] with every column weighted 1, computed
/// independently with a standalone min–max script and frozen.
pub const TABLE3_SCORES: [(&str, f64); 10] = [
    ("alp", 14.884112506552814),
    ("kl-pgd", 14.585259841806991),
    ("mart", 14.390871930513024),
    ("clp", 13.969146354506496),
    ("trades", 13.2819042790928),
    ("pgd", 12.280485245788524),
    ("at-pr", 11.158085687458813),
    ("corruption", 10.758160792535431),
    ("cvar", 10.55206895709668),
    ("erm", 6.67719773688965),
];

pub const TABLE3_PR_RADII: [f64; 4] = [8.0 / 255.0, 0.08, 0.1, 0.12];
pub const TABLE3_RHOS: [f64; 3] = [0.1, 0.05, 0.01];

/// An [`EvalReport`] carrying one Table-3 row.
pub fn table3_report(method: &str, v: &[f64; 18]) -> EvalReport {
    let r0 = TABLE3_PR_RADII[0];
    let attack = |name: &str, acc: f64| {
        let spec = match name {
            "auto-proxy" => EvalAttack::AutoProxy { radius: r0 },
            _ => EvalAttack::parse(name, r0, 2.0 / 255.0, 1, true, Bounds::UNIT).unwrap(),
        };
        AttackResult {
            name: name.into(),
            radius: r0,
            accuracy: acc,
            spec,
        }
    };
    let mut ge = vec![GeResult {
        metric: "ar:pgd20".into(),
        train: None,
        test: None,
        value: Some(v[12]),
    }];
    for (i, r) in TABLE3_PR_RADII.iter().enumerate() {
        ge.push(GeResult {
            metric: format!("pr:uniform@{r}"),
            train: None,
            test: None,
            value: Some(v[13 + i]),
        });
    }
    EvalReport {
        schema_version: SCHEMA_VERSION,
        method: method.into(),
        model: "resnet18".into(),
        dataset: "cifar10".into(),
        seed: 0,
        config_hash: format!("fixture-{method}"),
        clean_accuracy: v[0],
        adversarial: vec![
            attack("pgd10", v[1]),
            attack("pgd20", v[2]),
            attack("pgd-cw20", v[3]),
            attack("auto-proxy", v[4]),
        ],
        pr: TABLE3_PR_RADII
            .iter()
            .enumerate()
            .map(|(i, &radius)| PrResult {
                family: NoiseFamily::Uniform,
                radius,
                rate: Some(v[5 + i]),
                correct_points: 100,
                samples: 100,
            })
            .collect(),
        prob_acc: TABLE3_RHOS
            .iter()
            .enumerate()
            .map(|(i, &rho)| ProbAccResult {
                family: NoiseFamily::Uniform,
                radius: r0,
                rho,
                rate: Some(v[9 + i]),
            })
            .collect(),
        ge,
        nu: None,
        perturbation: PerturbationNotes {
            constraint: "clamp".into(),
            noise_scale: "radius / 2".into(),
            domain_clip: "[0, 1]".into(),
        },
        seconds_per_epoch: Some(v[17]),
    }
}

pub fn table3_reports() -> Vec<EvalReport> {
    TABLE3.iter().map(|(m, v)| table3_report(m, v)).collect()
}

pub fn is_at_method(m: &str) -> bool {
    matches!(m, "pgd" | "trades" | "mart" | "alp" | "clp" | "kl-pgd")
}
