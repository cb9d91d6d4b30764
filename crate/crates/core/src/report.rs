//! Evaluation of a trained model into a serializable report.

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackLoss, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{adversarial_accuracy, generalization_error, nu_summary, pr_sweep, proxy_accuracy, NuSummary};
use crate::model::Model;
use crate::perturbation::{Bounds, NoiseFamily, PerturbationSpec};
use crate::rng::RngStream;

pub const SCHEMA_VERSION: u32 = 1;

/// An evaluation attack: a PGD variant or the two-attack proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvalAttack {
    Pgd(AttackSpec),
    AutoProxy { radius: f64 },
}

impl EvalAttack {
    pub fn name(&self) -> String {
        match self {
            EvalAttack::Pgd(a) => a.name(),
            EvalAttack::AutoProxy { .. } => "auto-proxy".into(),
        }
    }

    /// Parses `pgd20`, `pgd-cw20`, `pgd-kl20` or `auto-proxy`.
    pub fn parse(
        name: &str,
        radius: f64,
        step_size: f64,
        restarts: usize,
        random_start: bool,
        bounds: Bounds,
    ) -> Option<Self> {
        if name == "auto-proxy" {
            return Some(EvalAttack::AutoProxy { radius });
        }
        let (loss, digits) = if let Some(d) = name.strip_prefix("pgd-cw") {
            (AttackLoss::CwMargin, d)
        } else if let Some(d) = name.strip_prefix("pgd-kl") {
            (AttackLoss::Kl, d)
        } else {
            (AttackLoss::Ce, name.strip_prefix("pgd")?)
        };
        let steps: usize = digits.parse().ok().filter(|&s| s > 0)?;
        Some(EvalAttack::Pgd(AttackSpec {
            loss,
            steps,
            step_size,
            radius,
            restarts,
            random_start,
            bounds,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub attacks: Vec<EvalAttack>,
    pub pr_radii: Vec<f64>,
    pub pr_families: Vec<NoiseFamily>,
    /// Gaussian/Laplace scale; `None` means radius / 2.
    pub noise_scale: Option<f64>,
    pub prob_acc_rhos: Vec<f64>,
    /// Perturbation draws per point.
    pub samples: usize,
    /// Rows of the training set used for GE; 0 skips GE.
    pub train_subset: usize,
    pub nu_points: usize,
    pub nu_samples: usize,
    pub bounds: Bounds,
}

impl EvalConfig {
    /// MNIST-style defaults at radius γ and step α.
    pub fn standard(radius: f64, step_size: f64, pr_radii: Vec<f64>) -> Self {
        let pgd = |steps| EvalAttack::Pgd(AttackSpec::pgd(radius, step_size, steps));
        Self {
            attacks: vec![
                pgd(10),
                pgd(20),
                EvalAttack::Pgd(AttackSpec::pgd(radius, step_size, 20).with_loss(AttackLoss::CwMargin)),
                EvalAttack::AutoProxy { radius },
            ],
            pr_radii,
            pr_families: vec![NoiseFamily::Uniform],
            noise_scale: None,
            prob_acc_rhos: vec![0.1, 0.05, 0.01],
            samples: 100,
            train_subset: 2000,
            nu_points: 100,
            nu_samples: 1000,
            bounds: Bounds::UNIT,
        }
    }

    fn pert(&self, family: NoiseFamily, radius: f64) -> PerturbationSpec {
        PerturbationSpec {
            family,
            radius,
            scale: self.noise_scale,
            bounds: self.bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    pub radius: f64,
    pub accuracy: f64,
    pub spec: EvalAttack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrResult {
    pub family: NoiseFamily,
    pub radius: f64,
    /// `None` when no test point is classified correctly.
    pub rate: Option<f64>,
    pub correct_points: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbAccResult {
    pub family: NoiseFamily,
    pub radius: f64,
    pub rho: f64,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeResult {
    pub metric: String,
    pub train: Option<f64>,
    pub test: Option<f64>,
    pub value: Option<f64>,
}

/// How non-uniform perturbations are kept inside the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationNotes {
    pub constraint: String,
    pub noise_scale: String,
    pub domain_clip: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    pub clean_accuracy: f64,
    pub adversarial: Vec<AttackResult>,
    pub pr: Vec<PrResult>,
    pub prob_acc: Vec<ProbAccResult>,
    pub ge: Vec<GeResult>,
    pub nu: Option<NuSummary>,
    pub perturbation: PerturbationNotes,
    /// Wall-clock training cost; kept out of `report.json` so re-runs are
    /// byte-identical, and merged back from `timing.json` by the leaderboard.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds_per_epoch: Option<f64>,
}

impl EvalReport {
    pub fn ge_ar(&self) -> Option<f64> {
        self.ge
            .iter()
            .find(|g| g.metric.starts_with("ar:"))
            .and_then(|g| g.value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Identity of the run a report describes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Evaluates `model` on `test` (and a prefix of `train` for GE).
pub fn evaluate(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    info: &RunInfo,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let root = RngStream::new(info.seed, "eval");
    let train_sub = train.take(cfg.train_subset);
    let ge_enabled = !train_sub.is_empty();

    let clean_accuracy = model.accuracy(&test.x, &test.y)?;
    let mut ge = Vec::new();
    if ge_enabled {
        let tr = model.accuracy(&train_sub.x, &train_sub.y)?;
        ge.push(GeResult {
            metric: "clean".into(),
            train: Some(tr),
            test: Some(clean_accuracy),
            value: Some(generalization_error(tr, clean_accuracy)),
        });
    }

    let run_attack = |a: &EvalAttack, data: &Dataset, split: &str| -> Result<f64> {
        let rng = root.child(split).child(&a.name());
        match a {
            EvalAttack::Pgd(spec) => adversarial_accuracy(model, data, spec, &rng),
            EvalAttack::AutoProxy { radius } => proxy_accuracy(model, data, *radius, &rng),
        }
    };
    let mut adversarial = Vec::new();
    for (i, a) in cfg.attacks.iter().enumerate() {
        let acc = run_attack(a, test, "test")?;
        let radius = match a {
            EvalAttack::Pgd(s) => s.radius,
            EvalAttack::AutoProxy { radius } => *radius,
        };
        log::info!("{}: {} accuracy {:.4}", info.method, a.name(), acc);
        // GE_AR uses the first attack only; attacking the train subset is costly
        if i == 0 && ge_enabled {
            let tr = run_attack(a, &train_sub, "train")?;
            ge.push(GeResult {
                metric: format!("ar:{}", a.name()),
                train: Some(tr),
                test: Some(acc),
                value: Some(generalization_error(tr, acc)),
            });
        }
        adversarial.push(AttackResult {
            name: a.name(),
            radius,
            accuracy: acc,
            spec: a.clone(),
        });
    }

    let mut pr = Vec::new();
    let mut prob_acc = Vec::new();
    for &family in &cfg.pr_families {
        for &radius in &cfg.pr_radii {
            let pert = cfg.pert(family, radius);
            let label = format!("{}@{radius}", family.as_str());
            let sweep = pr_sweep(model, test, &pert, cfg.samples, &root.child("pr-test").child(&label))?;
            log::info!("{}: PR {label} = {:?}", info.method, sweep.rate());
            for &rho in &cfg.prob_acc_rhos {
                prob_acc.push(ProbAccResult {
                    family,
                    radius,
                    rho,
                    rate: sweep.prob_acc(rho),
                });
            }
            if ge_enabled && family == NoiseFamily::Uniform {
                let tr = pr_sweep(
                    model,
                    &train_sub,
                    &pert,
                    cfg.samples,
                    &root.child("pr-train").child(&label),
                )?;
                ge.push(GeResult {
                    metric: format!("pr:{label}"),
                    train: tr.rate(),
                    test: sweep.rate(),
                    value: tr.rate().zip(sweep.rate()).map(|(a, b)| generalization_error(a, b)),
                });
            }
            pr.push(PrResult {
                family,
                radius,
                rate: sweep.rate(),
                correct_points: sweep.points.len(),
                samples: cfg.samples,
            });
        }
    }

    let nu = match (cfg.nu_points, cfg.pr_radii.first()) {
        (0, _) | (_, None) => None,
        (points, Some(&radius)) => Some(nu_summary(
            model,
            test,
            &cfg.pert(NoiseFamily::Uniform, radius),
            points,
            cfg.nu_samples.max(1),
            &root.child("nu"),
        )?),
    };

    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        method: info.method.clone(),
        model: model.spec.arch.as_str().to_owned(),
        dataset: info.dataset.clone(),
        seed: info.seed,
        config_hash: info.config_hash.clone(),
        clean_accuracy,
        adversarial,
        pr,
        prob_acc,
        ge,
        nu,
        perturbation: PerturbationNotes {
            constraint: "gaussian/laplace draws clamped per coordinate into [-radius, radius]".into(),
            noise_scale: match cfg.noise_scale {
                Some(s) => format!("{s}"),
                None => "radius / 2".into(),
            },
            domain_clip: format!("x + delta clamped to [{}, {}]", cfg.bounds.lo, cfg.bounds.hi),
        },
        seconds_per_epoch: None,
    })
}
