//! Experiment configuration: flat `section.key = value` TOML.
//!
//! Every key is optional except `data.kind` and `train.method`; defaults
//! depend on the dataset (MNIST vs. 2-D synthetic) and on `scale`.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use toml::Value;

use crate::attacks::AttackSpec;
use crate::data::{load_mnist_dir, synth_dataset, Dataset, Split, SynthKind};
use crate::error::{Error, FieldError, Result};
use crate::model::{Architecture, ModelSpec};
use crate::optim::{scaled_milestones, SgdConfig};
use crate::perturbation::{Bounds, NoiseFamily, PerturbationSpec};
use crate::report::{EvalAttack, EvalConfig};
use crate::trainers::{AtprConfig, Method, RiskConfig, TrainConfig};

/// Environment variable pointing at the MNIST IDX directory.
pub const DATA_ENV: &str = "PRBENCH_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Mnist,
    Synth(SynthKind),
}

impl DataKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataKind::Mnist => "mnist",
            DataKind::Synth(k) => k.as_str(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        if s == "mnist" {
            Some(DataKind::Mnist)
        } else {
            SynthKind::parse(s).map(DataKind::Synth)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    /// MNIST directory; falls back to `$PRBENCH_DATA`.
    pub path: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub arch: Architecture,
    /// Hidden widths (MLP) or `[conv1, conv2, fc]` channels (CNN).
    pub layers: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Sorted `key = value` lines the hash is computed over.
    pub canonical: String,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(vec![FieldError {
                path: "<file>".into(),
                message: format!("cannot read {}: {e}", path.display()),
            }])
        })?;
        Self::parse(&text, seed_override)
    }

    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(vec![FieldError {
                path: "<syntax>".into(),
                message: e.message().trim().to_owned(),
            }])
        })?;
        let mut flat = BTreeMap::new();
        flatten("", Value::Table(root), &mut flat);
        if let Some(seed) = seed_override {
            flat.insert("seed".into(), Value::Integer(seed as i64));
        }
        let canonical = flat.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>();
        let mut f = Fields {
            map: flat,
            used: BTreeSet::new(),
            errors: Vec::new(),
        };
        let cfg = build(&mut f, canonical);
        for key in f.map.keys() {
            if !f.used.contains(key) {
                f.errors.push(FieldError {
                    path: key.clone(),
                    message: "unknown key".into(),
                });
            }
        }
        match cfg {
            Some(cfg) if f.errors.is_empty() => Ok(cfg),
            _ => Err(Error::Config(f.errors)),
        }
    }

    /// 64-bit FNV-1a of the canonical config, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h = FnvHasher::default();
        h.write(self.canonical.as_bytes());
        format!("{:016x}", h.finish())
    }

    pub fn method(&self) -> Method {
        self.train.method
    }

    /// Loads (train, test) per `data`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.kind {
            DataKind::Mnist => {
                let dir = match &d.path {
                    Some(p) => p.clone(),
                    None => std::env::var_os(DATA_ENV)
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::Data(format!("MNIST needs data.path or ${DATA_ENV}")))?,
                };
                let load = |split| {
                    load_mnist_dir(&dir, split).map_err(|e| match e {
                        Error::Io { .. } => Error::Data(e.to_string()),
                        other => other,
                    })
                };
                let train = load(Split::Train)?.take(d.train_size);
                let test = load(Split::Test)?.take(d.test_size);
                Ok((train, test))
            }
            DataKind::Synth(kind) => {
                let (train, _) = synth_dataset(kind, d.train_size, d.noise, self.seed, Split::Train)?;
                let (test, _) = synth_dataset(kind, d.test_size, d.noise, self.seed, Split::Test)?;
                Ok((train, test))
            }
        }
    }

    /// Model shape for data with per-sample shape `sample` and `classes` labels.
    pub fn model_spec(&self, sample: &[usize], classes: usize) -> Result<ModelSpec> {
        let spec = match self.arch {
            Architecture::Mlp => {
                let hidden = self.layers.clone().unwrap_or_else(|| vec![64, 64]);
                ModelSpec::mlp(sample.iter().product(), &hidden, classes)
            }
            Architecture::SimpleCnn => {
                let [c, h, w] = sample else {
                    return Err(Error::Config(vec![FieldError {
                        path: "model.arch".into(),
                        message: format!("simplecnn needs image data, got sample shape {sample:?}"),
                    }]));
                };
                let mut s = ModelSpec::simple_cnn(*c, *h, *w, classes);
                if let Some(l) = &self.layers {
                    s.layers = l.clone();
                }
                s
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn flatten(prefix: &str, v: Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_owned(), leaf);
        }
    }
}

struct Fields {
    map: BTreeMap<String, Value>,
    used: BTreeSet<String>,
    errors: Vec<FieldError>,
}

impl Fields {
    fn err(&mut self, path: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            path: path.to_owned(),
            message: message.into(),
        });
    }

    fn get(&mut self, key: &str) -> Option<Value> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_owned());
        }
        v
    }

    fn typed<T>(&mut self, key: &str, what: &str, conv: impl Fn(&Value) -> Option<T>) -> Option<T> {
        let v = self.get(key)?;
        let out = conv(&v);
        if out.is_none() {
            self.err(key, format!("expected {what}, got {v}"));
        }
        out
    }

    fn f64(&mut self, key: &str) -> Option<f64> {
        self.typed(key, "a number", as_f64)
    }

    fn usize(&mut self, key: &str) -> Option<usize> {
        self.typed(key, "a non-negative integer", as_usize)
    }

    fn bool(&mut self, key: &str) -> Option<bool> {
        self.typed(key, "a boolean", Value::as_bool)
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.typed(key, "a string", |v| v.as_str().map(str::to_owned))
    }

    fn list<T>(&mut self, key: &str, what: &str, conv: impl Fn(&Value) -> Option<T>) -> Option<Vec<T>> {
        self.typed(key, &format!("an array of {what}"), |v| {
            v.as_array()?.iter().map(&conv).collect()
        })
    }

    /// Parses a string key through `parse`, listing `choices` on failure.
    fn choice<T>(&mut self, key: &str, choices: &[&str], parse: impl Fn(&str) -> Option<T>) -> Option<T> {
        let s = self.string(key)?;
        let out = parse(&s);
        if out.is_none() {
            self.err(
                key,
                format!("unknown value {s:?} (expected one of {})", choices.join(", ")),
            );
        }
        out
    }

    fn check(&mut self, key: &str, ok: bool, message: &str) {
        if !ok {
            self.err(key, message);
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_usize(v: &Value) -> Option<usize> {
    v.as_integer().and_then(|i| usize::try_from(i).ok())
}

fn positive_all(v: &[f64]) -> bool {
    !v.is_empty() && v.iter().all(|&x| x > 0.0 && x.is_finite())
}

fn build(f: &mut Fields, canonical: String) -> Option<ExperimentConfig> {
    let seed = f.typed("seed", "a non-negative integer", |v| {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    });
    let full = match f.string("scale").as_deref() {
        None | Some("desk") => false,
        Some("full") => true,
        Some(other) => {
            f.err("scale", format!("unknown value {other:?} (expected desk or full)"));
            false
        }
    };

    let kinds = ["mnist", "two-moons", "gaussian-blobs", "linear"];
    let kind = f.choice("data.kind", &kinds, DataKind::parse);
    if !f.map.contains_key("data.kind") {
        f.err("data.kind", "missing required key");
    }
    let methods: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
    let method = f.choice("train.method", &methods, Method::parse);
    if !f.map.contains_key("train.method") {
        f.err("train.method", "missing required key (training method)");
    }
    let mnist = kind == Some(DataKind::Mnist);

    let (def_train, def_test) = match (mnist, full) {
        (true, true) => (60_000, 10_000),
        (true, false) => (10_000, 2_000),
        (false, _) => (1_000, 500),
    };
    let data = DataConfig {
        kind: kind.unwrap_or(DataKind::Mnist),
        path: f.string("data.path").map(PathBuf::from),
        train_size: f.usize("data.train_size").unwrap_or(def_train),
        test_size: f.usize("data.test_size").unwrap_or(def_test),
        noise: f.f64("data.noise").unwrap_or(0.05),
    };
    f.check("data.train_size", data.train_size >= 2, "must be >= 2");
    f.check("data.test_size", data.test_size >= 1, "must be >= 1");
    f.check(
        "data.noise",
        data.noise >= 0.0 && data.noise.is_finite(),
        "must be >= 0",
    );

    let arch = f
        .choice("model.arch", &["mlp", "simplecnn"], |s| match s {
            "mlp" => Some(Architecture::Mlp),
            "simplecnn" => Some(Architecture::SimpleCnn),
            _ => None,
        })
        .unwrap_or(if mnist {
            Architecture::SimpleCnn
        } else {
            Architecture::Mlp
        });
    let layers = f.list("model.layers", "integers", as_usize);
    if let Some(l) = &layers {
        let ok = l.iter().all(|&w| w > 0) && (arch == Architecture::Mlp || l.len() == 3);
        f.check(
            "model.layers",
            ok,
            "widths must be positive (three entries for simplecnn)",
        );
    }

    // perturbation & training attack
    let radius = f.f64("perturbation.radius").unwrap_or(if mnist { 0.3 } else { 0.05 });
    f.check("perturbation.radius", radius > 0.0 && radius.is_finite(), "must be > 0");
    let families = ["uniform", "gaussian", "laplace"];
    let family = f
        .choice("perturbation.family", &families, NoiseFamily::parse)
        .unwrap_or(NoiseFamily::Uniform);
    let scale = f.f64("perturbation.scale");
    if let Some(s) = scale {
        f.check("perturbation.scale", s > 0.0 && s.is_finite(), "must be > 0");
    }
    let perturbation = PerturbationSpec {
        family,
        radius,
        scale,
        bounds: Bounds::UNIT,
    };

    let step_size = f.f64("attack.step_size").unwrap_or(radius / 3.0);
    f.check(
        "attack.step_size",
        step_size > 0.0 && step_size.is_finite(),
        "must be > 0",
    );
    let steps = f.usize("attack.steps").unwrap_or(10);
    f.check("attack.steps", steps >= 1, "must be >= 1");
    let mut attack = AttackSpec::pgd(radius, step_size, steps);
    attack.restarts = f.usize("attack.restarts").unwrap_or(1);
    f.check("attack.restarts", attack.restarts >= 1, "must be >= 1");
    attack.random_start = f.bool("attack.random_start").unwrap_or(true);
    if let Some(loss) = method.and_then(|m| m.attack_loss()) {
        attack = attack.with_loss(loss);
    }

    // optimization
    let epochs = f.usize("train.epochs").unwrap_or(if full { 100 } else { 20 });
    f.check("train.epochs", epochs >= 1, "must be >= 1");
    let mut sgd = SgdConfig::for_epochs(epochs);
    if full {
        sgd.milestones = vec![75, 90];
    }
    sgd.lr = f.f64("train.lr").unwrap_or(sgd.lr);
    f.check("train.lr", sgd.lr > 0.0 && sgd.lr.is_finite(), "must be > 0");
    sgd.momentum = f.f64("train.momentum").unwrap_or(sgd.momentum);
    f.check(
        "train.momentum",
        (0.0..1.0).contains(&sgd.momentum),
        "must be in [0, 1)",
    );
    sgd.weight_decay = f.f64("train.weight_decay").unwrap_or(sgd.weight_decay);
    f.check("train.weight_decay", sgd.weight_decay >= 0.0, "must be >= 0");
    sgd.decay = f.f64("train.lr_decay").unwrap_or(sgd.decay);
    f.check(
        "train.lr_decay",
        sgd.decay > 0.0 && sgd.decay <= 1.0,
        "must be in (0, 1]",
    );
    if let Some(m) = f.list("train.milestones", "integers", as_usize) {
        sgd.milestones = m;
    } else if !full {
        sgd.milestones = scaled_milestones(epochs);
    }
    let batch_size = f.usize("train.batch_size").unwrap_or(128);
    f.check("train.batch_size", batch_size >= 1, "must be >= 1");
    let lambda = f
        .f64("train.lambda")
        .or_else(|| method.map(|m| m.default_lambda(mnist)));
    if let Some(l) = lambda {
        f.check("train.lambda", l >= 0.0 && l.is_finite(), "must be >= 0");
    }

    let mut risk = RiskConfig::default();
    risk.rho = f.f64("risk.rho").unwrap_or(risk.rho);
    f.check("risk.rho", risk.rho > 0.0 && risk.rho <= 1.0, "must be in (0, 1]");
    risk.samples = f.usize("risk.samples").unwrap_or(risk.samples);
    f.check("risk.samples", risk.samples >= 1, "must be >= 1");
    risk.alpha_steps = f.usize("risk.alpha_steps").unwrap_or(risk.alpha_steps);
    risk.alpha_lr = f.f64("risk.alpha_lr").unwrap_or(risk.alpha_lr);
    f.check(
        "risk.alpha_lr",
        risk.alpha_lr > 0.0 && risk.alpha_lr.is_finite(),
        "must be > 0",
    );

    let mut atpr = AtprConfig::for_radius(radius);
    atpr.candidates = f.usize("atpr.candidates").unwrap_or(atpr.candidates);
    f.check("atpr.candidates", atpr.candidates >= 1, "must be >= 1");
    atpr.walk_cap = f.usize("atpr.walk_cap").unwrap_or(atpr.walk_cap);
    atpr.alpha_range.0 = f.f64("atpr.alpha_min").unwrap_or(atpr.alpha_range.0);
    atpr.alpha_range.1 = f.f64("atpr.alpha_max").unwrap_or(atpr.alpha_range.1);
    let (a0, a1) = atpr.alpha_range;
    f.check(
        "atpr.alpha_max",
        a0 > 0.0 && a0 <= a1,
        "need 0 < alpha_min <= alpha_max",
    );
    atpr.steps_range.0 = f.usize("atpr.steps_min").unwrap_or(atpr.steps_range.0);
    atpr.steps_range.1 = f.usize("atpr.steps_max").unwrap_or(atpr.steps_range.1);
    let (s0, s1) = atpr.steps_range;
    f.check(
        "atpr.steps_max",
        s0 >= 1 && s0 <= s1,
        "need 1 <= steps_min <= steps_max",
    );

    // evaluation
    let pr_default = if mnist {
        vec![0.3, 0.35, 0.4, 0.45]
    } else {
        vec![radius, 2.0 * radius]
    };
    let mut eval = EvalConfig::standard(radius, step_size, pr_default);
    let eval_step = f.f64("eval.step_size").unwrap_or(step_size);
    f.check(
        "eval.step_size",
        eval_step > 0.0 && eval_step.is_finite(),
        "must be > 0",
    );
    let eval_radius = f.f64("eval.radius").unwrap_or(radius);
    f.check(
        "eval.radius",
        eval_radius > 0.0 && eval_radius.is_finite(),
        "must be > 0",
    );
    let restarts = f.usize("eval.restarts").unwrap_or(1);
    f.check("eval.restarts", restarts >= 1, "must be >= 1");
    let random_start = f.bool("eval.random_start").unwrap_or(true);
    let names = f
        .list("eval.attacks", "strings", |v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| vec!["pgd10".into(), "pgd20".into(), "pgd-cw20".into(), "auto-proxy".into()]);
    eval.attacks.clear();
    for name in names {
        match EvalAttack::parse(&name, eval_radius, eval_step, restarts, random_start, Bounds::UNIT) {
            Some(a) => eval.attacks.push(a),
            None => f.err(
                "eval.attacks",
                format!("unknown attack {name:?} (expected pgd<k>, pgd-cw<k>, pgd-kl<k> or auto-proxy)"),
            ),
        }
    }
    if let Some(r) = f.list("eval.pr_radii", "numbers", as_f64) {
        f.check("eval.pr_radii", positive_all(&r), "need at least one radius, all > 0");
        eval.pr_radii = r;
    }
    if let Some(fams) = f.list("eval.pr_families", "strings", |v| {
        v.as_str().and_then(NoiseFamily::parse)
    }) {
        f.check(
            "eval.pr_families",
            !fams.is_empty(),
            "need at least one family (uniform, gaussian, laplace)",
        );
        eval.pr_families = fams;
    }
    eval.noise_scale = f.f64("eval.noise_scale");
    if let Some(s) = eval.noise_scale {
        f.check("eval.noise_scale", s > 0.0 && s.is_finite(), "must be > 0");
    }
    if let Some(r) = f.list("eval.prob_acc_rhos", "numbers", as_f64) {
        let ok = r.iter().all(|&x| x > 0.0 && x < 1.0);
        f.check("eval.prob_acc_rhos", ok, "each rho must be in (0, 1)");
        eval.prob_acc_rhos = r;
    }
    eval.samples = f.usize("eval.samples").unwrap_or(eval.samples);
    f.check("eval.samples", eval.samples >= 1, "must be >= 1");
    eval.train_subset = f.usize("eval.train_subset").unwrap_or(eval.train_subset);
    eval.nu_points = f.usize("eval.nu_points").unwrap_or(eval.nu_points);
    eval.nu_samples = f.usize("eval.nu_samples").unwrap_or(eval.nu_samples);

    let method = method?;
    let train = TrainConfig {
        method,
        perturbation,
        attack,
        lambda: lambda.unwrap_or(0.0),
        risk,
        atpr,
        epochs,
        batch_size,
        seed: seed.unwrap_or(0),
        sgd,
    };
    if f.errors.is_empty() {
        if let Err(e) = train.validate() {
            f.err("train", e.to_string());
        }
    }
    Some(ExperimentConfig {
        seed: seed.unwrap_or(0),
        data,
        arch,
        layers,
        train,
        eval,
        canonical,
    })
}
