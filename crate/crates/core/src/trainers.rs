//! Training methods: per-batch objectives, risk-based training, AT-PR
//! candidate selection, and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{loss_and_input_grad, pgd_attack, pgd_run, restart_stream, AttackLoss, AttackSpec};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::{OptimState, SgdConfig};
use crate::perturbation::{apply_and_clip, PerturbationSpec};
use crate::risk::evar_with_alpha;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "erm")]
    Erm,
    #[serde(rename = "pgd")]
    Pgd,
    #[serde(rename = "trades")]
    Trades,
    #[serde(rename = "mart")]
    Mart,
    #[serde(rename = "alp")]
    Alp,
    #[serde(rename = "clp")]
    Clp,
    #[serde(rename = "kl-pgd")]
    KlPgd,
    #[serde(rename = "corruption")]
    Corruption,
    #[serde(rename = "cvar")]
    Cvar,
    #[serde(rename = "evar")]
    Evar,
    #[serde(rename = "at-pr")]
    AtPr,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Erm,
        Method::Pgd,
        Method::Trades,
        Method::Mart,
        Method::Alp,
        Method::Clp,
        Method::KlPgd,
        Method::Corruption,
        Method::Cvar,
        Method::Evar,
        Method::AtPr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Pgd => "pgd",
            Method::Trades => "trades",
            Method::Mart => "mart",
            Method::Alp => "alp",
            Method::Clp => "clp",
            Method::KlPgd => "kl-pgd",
            Method::Corruption => "corruption",
            Method::Cvar => "cvar",
            Method::Evar => "evar",
            Method::AtPr => "at-pr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Inner loss used to generate adversarial examples, if any.
    pub fn attack_loss(&self) -> Option<AttackLoss> {
        match self {
            Method::Pgd | Method::Mart | Method::Alp | Method::Clp | Method::AtPr => Some(AttackLoss::Ce),
            Method::Trades | Method::KlPgd => Some(AttackLoss::Kl),
            _ => None,
        }
    }

    /// Penalty weight λ used when a config does not set one.
    pub fn default_lambda(&self, mnist: bool) -> f64 {
        match self {
            Method::Trades => 6.0,
            Method::Mart => 5.0,
            Method::Alp if mnist => 0.01,
            Method::Clp if mnist => 0.3,
            Method::Alp | Method::Clp => 1.0,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// CVaR/EVaR settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub rho: f64,
    /// Perturbation draws M per example.
    pub samples: usize,
    /// Threshold updates T_α per batch.
    pub alpha_steps: usize,
    /// Threshold step size η_α.
    pub alpha_lr: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            samples: 20,
            alpha_steps: 5,
            alpha_lr: 0.05,
        }
    }
}

/// AT-PR candidate search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtprConfig {
    pub candidates: usize,
    /// Cap C on boundary-walk iterations; 0 disables the walk.
    pub walk_cap: usize,
    pub alpha_range: (f64, f64),
    pub steps_range: (usize, usize),
}

impl AtprConfig {
    pub fn for_radius(radius: f64) -> Self {
        Self {
            candidates: 5,
            walk_cap: 50,
            alpha_range: (radius / 10.0, radius / 4.0),
            steps_range: (5, 15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub perturbation: PerturbationSpec,
    pub attack: AttackSpec,
    pub lambda: f64,
    pub risk: RiskConfig,
    pub atpr: AtprConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl TrainConfig {
    /// Defaults for `method` with radius γ and attack step α.
    pub fn new(method: Method, radius: f64, step_size: f64, steps: usize, epochs: usize) -> Self {
        Self {
            method,
            perturbation: PerturbationSpec::uniform(radius),
            attack: AttackSpec::pgd(radius, step_size, steps),
            lambda: method.default_lambda(false),
            risk: RiskConfig::default(),
            atpr: AtprConfig::for_radius(radius),
            epochs,
            batch_size: 128,
            seed: 0,
            sgd: SgdConfig::for_epochs(epochs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ = {} must be >= 0", self.lambda));
        }
        if !(self.risk.rho > 0.0 && self.risk.rho <= 1.0) {
            return bad(format!("ρ = {} outside (0, 1]", self.risk.rho));
        }
        if self.risk.samples == 0 {
            return bad("risk methods need M >= 1 samples".into());
        }
        if self.atpr.candidates == 0 {
            return bad("AT-PR needs N >= 1 candidates".into());
        }
        let (a0, a1) = self.atpr.alpha_range;
        let (s0, s1) = self.atpr.steps_range;
        if !(a0 > 0.0 && a0 <= a1) || !(s0 >= 1 && s0 <= s1) {
            return bad("AT-PR ranges must be nonempty with α > 0 and steps >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        self.perturbation.validate()?;
        self.attack.validate()
    }

    fn attack_with(&self, loss: AttackLoss) -> AttackSpec {
        AttackSpec {
            loss,
            bounds: self.perturbation.bounds,
            ..self.attack
        }
    }
}

/// Adversarial or noisy inputs for one batch, per the method's generation rule.
/// `None` for ERM.
pub fn generate_inputs(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<Option<Tensor>> {
    match cfg.method {
        Method::Erm => Ok(None),
        Method::Corruption => {
            let sample_shape = &x.shape()[1..];
            let mut delta = Vec::with_capacity(x.len());
            let noise = rng.child("noise");
            for i in 0..x.rows() {
                let mut g = noise.at(i as u64).rng();
                delta.extend(cfg.perturbation.sample_delta(sample_shape, &mut g).into_data());
            }
            let delta = Tensor::new(x.shape().to_vec(), delta)?;
            apply_and_clip(x, &delta, cfg.perturbation.bounds).map(Some)
        }
        Method::AtPr => atpr_select_ae(model, x, y, cfg, rng).map(|s| Some(s.x_adv)),
        Method::Cvar | Method::Evar => Err(Error::InvalidArgument(format!(
            "{} has no single perturbed input per example",
            cfg.method
        ))),
        m => {
            let atk = cfg.attack_with(m.attack_loss().expect("adversarial method"));
            let delta = pgd_attack(model, x, y, &atk, &rng.child("attack"))?;
            Ok(Some(x.zip_map(&delta, |a, d| a + d)?))
        }
    }
}

/// `λ·(1/B)·Σ ‖softmax(z_adv) − softmax(z_clean)‖²₂`.
fn pairing_penalty(tape: &mut Tape, z_clean: Var, z_adv: Var, lambda: f64) -> Result<Var> {
    let b = tape.value(z_clean).rows() as f64;
    let pc = tape.softmax_rows(z_clean)?;
    let pa = tape.softmax_rows(z_adv)?;
    let diff = tape.sub(pa, pc)?;
    let sq = tape.sq_l2_norm(diff)?;
    tape.scale(sq, lambda / b)
}

/// Records the batch-mean training loss of `method` on `tape`.
///
/// `x_adv` is the method's perturbed input (ignored by ERM).
#[allow(clippy::too_many_arguments)]
pub fn objective(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &[Var],
    method: Method,
    lambda: f64,
    x: &Tensor,
    x_adv: Option<&Tensor>,
    y: &[usize],
) -> Result<Var> {
    let adv_logits = |tape: &mut Tape| -> Result<Var> {
        let xa = x_adv.ok_or_else(|| Error::InvalidArgument(format!("{method} needs perturbed inputs")))?;
        let v = tape.constant(xa.clone());
        spec.forward(tape, params, v)
    };
    let clean_logits = |tape: &mut Tape| -> Result<Var> {
        let v = tape.constant(x.clone());
        spec.forward(tape, params, v)
    };
    match method {
        Method::Erm => {
            let z = clean_logits(tape)?;
            tape.ce_loss(z, y)
        }
        Method::Pgd | Method::KlPgd | Method::Corruption | Method::AtPr => {
            let z = adv_logits(tape)?;
            tape.ce_loss(z, y)
        }
        Method::Trades => {
            let zc = clean_logits(tape)?;
            let za = adv_logits(tape)?;
            let ce = tape.ce_loss(zc, y)?;
            let kl = tape.kl_loss(zc, za)?;
            let kl = tape.scale(kl, lambda)?;
            tape.add(ce, kl)
        }
        Method::Mart => {
            let zc = clean_logits(tape)?;
            let za = adv_logits(tape)?;
            let ce = tape.ce_loss(za, y)?;
            let kl = tape.kl_div(zc, za)?;
            // misclassification weight 1 − p(y|x) from the clean softmax
            let p = tape.softmax_rows(zc)?;
            let py = tape.gather(p, y)?;
            let neg = tape.scale(py, -1.0)?;
            let w = tape.add_scalar(neg, 1.0)?;
            let weighted = tape.mul(w, kl)?;
            let reg = tape.mean(weighted)?;
            let reg = tape.scale(reg, lambda)?;
            tape.add(ce, reg)
        }
        Method::Alp | Method::Clp => {
            let zc = clean_logits(tape)?;
            let za = adv_logits(tape)?;
            let ce = if method == Method::Alp {
                tape.ce_loss(za, y)?
            } else {
                tape.ce_loss(zc, y)?
            };
            let pen = pairing_penalty(tape, zc, za, lambda)?;
            tape.add(ce, pen)
        }
        Method::Cvar | Method::Evar => Err(Error::InvalidArgument(format!(
            "{method} is trained through its dedicated risk step"
        ))),
    }
}

/// Loss value and parameter gradients of [`objective`].
pub fn objective_grads(
    model: &Model,
    method: Method,
    lambda: f64,
    x: &Tensor,
    x_adv: Option<&Tensor>,
    y: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, true);
    let loss = objective(&mut tape, &model.spec, &params, method, lambda, x, x_adv, y)?;
    let grads = tape.backward(loss, &params)?;
    Ok((tape.value(loss).item(), grads))
}

/// Value of the batch objective, generating perturbed inputs with `rng`.
pub fn training_objective(model: &Model, x: &Tensor, y: &[usize], cfg: &TrainConfig, rng: &RngStream) -> Result<f64> {
    batch_step(model, x, y, cfg, rng).map(|o| o.loss)
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Secondary loss: mean sampled loss of the last threshold step (CVaR),
    /// mean sampled loss (EVaR).
    pub aux: Option<f64>,
}

/// Loss and parameter gradients for one batch under `cfg.method`.
pub fn batch_step(model: &Model, x: &Tensor, y: &[usize], cfg: &TrainConfig, rng: &RngStream) -> Result<BatchOutcome> {
    match cfg.method {
        Method::Cvar => cvar_batch_step(model, x, y, cfg, rng),
        Method::Evar => evar_batch_step(model, x, y, cfg, rng),
        m => {
            let xa = generate_inputs(model, x, y, cfg, rng)?;
            let (loss, grads) = objective_grads(model, m, cfg.lambda, x, xa.as_ref(), y)?;
            Ok(BatchOutcome { loss, grads, aux: None })
        }
    }
}

/// Rows pushed through one risk-sampling tape.
const RISK_CHUNK_ROWS: usize = 512;

/// `M` clipped noisy copies of each row in `rows`, row-major by example.
fn noisy_copies(x: &Tensor, rows: &[usize], m: usize, pert: &PerturbationSpec, stream: &RngStream) -> Result<Tensor> {
    let sample_shape = &x.shape()[1..];
    let w = x.row_len();
    let mut data = Vec::with_capacity(rows.len() * m * w);
    for &r in rows {
        let mut g = stream.at(r as u64).rng();
        let xr = x.row(r);
        for _ in 0..m {
            let d = pert.sample_delta(sample_shape, &mut g);
            data.extend(
                xr.iter()
                    .zip(d.data())
                    .map(|(a, b)| (a + b).clamp(pert.bounds.lo, pert.bounds.hi)),
            );
        }
    }
    let mut shape = vec![rows.len() * m];
    shape.extend_from_slice(sample_shape);
    Tensor::new(shape, data)
}

fn example_chunks(b: usize, m: usize) -> Vec<Vec<usize>> {
    let per = (RISK_CHUNK_ROWS / m.max(1)).max(1);
    (0..b).collect::<Vec<_>>().chunks(per).map(<[usize]>::to_vec).collect()
}

/// Per-example CE losses of `M` noisy copies, shape `B × M` row-major.
fn sampled_losses(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    m: usize,
    pert: &PerturbationSpec,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(y.len() * m);
    for rows in example_chunks(y.len(), m) {
        let xs = noisy_copies(x, &rows, m, pert, stream)?;
        let ys: Vec<usize> = rows.iter().flat_map(|&r| std::iter::repeat_n(y[r], m)).collect();
        let (l, _) = loss_and_input_grad(model, &xs, &ys, AttackLoss::Ce, None, false)?;
        out.extend(l);
    }
    Ok(out)
}

/// Per-example thresholds α_j after the inner loop; starts from the clean loss.
pub fn cvar_thresholds(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(Vec<f64>, f64)> {
    let RiskConfig {
        rho,
        samples: m,
        alpha_steps,
        alpha_lr,
    } = cfg.risk;
    let (mut alpha, _) = loss_and_input_grad(model, x, y, AttackLoss::Ce, None, false)?;
    let mut last_mean = alpha.iter().sum::<f64>() / alpha.len().max(1) as f64;
    for t in 0..alpha_steps {
        let l = sampled_losses(model, x, y, m, &cfg.perturbation, &rng.child("cvar-alpha").at(t as u64))?;
        for (j, a) in alpha.iter_mut().enumerate() {
            *a = crate::risk::cvar_alpha_step(*a, &l[j * m..(j + 1) * m], rho, alpha_lr);
        }
        last_mean = l.iter().sum::<f64>() / l.len() as f64;
    }
    Ok((alpha, last_mean))
}

/// Parameter gradient of `(1/(ρMB))·Σ_{j,k} [ℓ(x_j + δ_jk) − α_j]₊` for fixed
/// thresholds, with δ drawn from `stream`.
pub fn cvar_hinge_grads(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    alpha: &[f64],
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<(f64, Vec<Tensor>)> {
    let m = cfg.risk.samples;
    let b = y.len();
    let scale = 1.0 / (cfg.risk.rho * m as f64 * b as f64);
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for rows in example_chunks(b, m) {
        let xs = noisy_copies(x, &rows, m, &cfg.perturbation, stream)?;
        let ys: Vec<usize> = rows.iter().flat_map(|&r| std::iter::repeat_n(y[r], m)).collect();
        let th: Vec<f64> = rows.iter().flat_map(|&r| std::iter::repeat_n(alpha[r], m)).collect();
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, true);
        let xv = tape.constant(xs);
        let z = model.spec.forward(&mut tape, &params, xv)?;
        let l = tape.cross_entropy(z, &ys)?;
        let a = tape.constant(Tensor::vector(th));
        let excess = tape.sub(l, a)?;
        let hinge = tape.relu(excess)?;
        let s = tape.sum(hinge)?;
        let s = tape.scale(s, scale)?;
        total += tape.value(s).item();
        let g = tape.backward(s, &params)?;
        grads = Some(match grads {
            None => g,
            Some(acc) => acc
                .into_iter()
                .zip(g)
                .map(|(a, b)| a.zip_map(&b, |u, v| u + v))
                .collect::<Result<_>>()?,
        });
    }
    Ok((total, grads.unwrap_or_default()))
}

/// One CVaR batch: threshold updates on fresh draws, then the hinge
/// gradient on another fresh draw. Reports the CVaR-form objective
/// `mean(α) + hinge` as the loss and the last threshold-step mean loss as aux.
pub fn cvar_batch_step(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<BatchOutcome> {
    let (alpha, mean_loss) = cvar_thresholds(model, x, y, cfg, rng)?;
    let (hinge, grads) = cvar_hinge_grads(model, x, y, &alpha, cfg, &rng.child("cvar-theta"))?;
    let loss = alpha.iter().sum::<f64>() / alpha.len() as f64 + hinge;
    Ok(BatchOutcome {
        loss,
        grads,
        aux: Some(mean_loss),
    })
}

/// One EVaR batch: per example, M sampled losses, the minimizing α*, and the
/// envelope gradient `(1/α*)·∇ log Σ_k exp(α*·ℓ_k)` averaged over the batch.
pub fn evar_batch_step(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<BatchOutcome> {
    let m = cfg.risk.samples;
    let b = y.len();
    let stream = rng.child("evar");
    let mut total = 0.0;
    let mut mean_loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for rows in example_chunks(b, m) {
        let xs = noisy_copies(x, &rows, m, &cfg.perturbation, &stream)?;
        let ys: Vec<usize> = rows.iter().flat_map(|&r| std::iter::repeat_n(y[r], m)).collect();
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, true);
        let xv = tape.constant(xs);
        let z = model.spec.forward(&mut tape, &params, xv)?;
        let l = tape.cross_entropy(z, &ys)?;
        let lv = tape.value(l).data().to_vec();
        mean_loss += lv.iter().sum::<f64>();
        let mut alpha_rep = Vec::with_capacity(lv.len());
        let mut inv_alpha = Vec::with_capacity(rows.len());
        for k in 0..rows.len() {
            let (v, a) = evar_with_alpha(&lv[k * m..(k + 1) * m], cfg.risk.rho)?;
            total += v;
            alpha_rep.extend(std::iter::repeat_n(a, m));
            inv_alpha.push(1.0 / (a * b as f64));
        }
        let l2 = tape.reshape(l, &[rows.len(), m])?;
        let a = tape.constant(Tensor::new(vec![rows.len(), m], alpha_rep)?);
        let scaled = tape.mul(l2, a)?;
        let lse = tape.log_sum_exp_rows(scaled)?;
        let w = tape.constant(Tensor::vector(inv_alpha));
        let weighted = tape.mul(lse, w)?;
        let s = tape.sum(weighted)?;
        let g = tape.backward(s, &params)?;
        grads = Some(match grads {
            None => g,
            Some(acc) => acc
                .into_iter()
                .zip(g)
                .map(|(a, b)| a.zip_map(&b, |u, v| u + v))
                .collect::<Result<_>>()?,
        });
    }
    Ok(BatchOutcome {
        loss: total / b as f64,
        grads: grads.unwrap_or_default(),
        aux: Some(mean_loss / (b * m) as f64),
    })
}

/// Selected AT-PR examples for one batch.
#[derive(Debug, Clone)]
pub struct AtprSelection {
    pub x_adv: Tensor,
    /// Winning candidate per row.
    pub chosen: Vec<usize>,
    /// `distances[c][i]`: walked distance of candidate `c` for row `i`.
    pub distances: Vec<Vec<f64>>,
    /// `(α, steps)` drawn for each candidate.
    pub hyper: Vec<(f64, usize)>,
    /// Candidate `c`'s adversarial batch.
    pub candidates: Vec<Tensor>,
}

/// Draws candidate `c`'s step size and step count.
fn candidate_hyper(cfg: &AtprConfig, rng: &RngStream, c: usize) -> (f64, usize) {
    let mut g = rng.child("atpr-hyper").at(c as u64).rng();
    let (a0, a1) = cfg.alpha_range;
    let (s0, s1) = cfg.steps_range;
    let alpha = if a0 == a1 { a0 } else { g.gen_range(a0..a1) };
    let steps = if s0 == s1 { s0 } else { g.gen_range(s0..=s1) };
    (alpha, steps)
}

/// Walks each row of `x_start` by `x̃ ← x̃ − α·∇ℓ_CE` until it is classified
/// as its label or `cap` steps pass; returns `‖x̃ − x_start‖₂` per row.
pub fn boundary_walk(model: &Model, x_start: &Tensor, y: &[usize], alpha: f64, cap: usize) -> Result<Vec<f64>> {
    let mut xt = x_start.clone();
    let w = xt.row_len();
    for _ in 0..cap {
        let pred = model.predict(&xt)?;
        let active: Vec<bool> = pred.iter().zip(y).map(|(p, t)| p != t).collect();
        if !active.contains(&true) {
            break;
        }
        let (_, g) = loss_and_input_grad(model, &xt, y, AttackLoss::Ce, None, true)?;
        let g = g.expect("gradient requested");
        for (i, _) in active.iter().enumerate().filter(|(_, a)| **a) {
            let row = &mut xt.data_mut()[i * w..(i + 1) * w];
            for (v, gi) in row.iter_mut().zip(&g.data()[i * w..(i + 1) * w]) {
                *v -= alpha * gi;
            }
        }
    }
    Ok((0..y.len())
        .map(|i| {
            xt.row(i)
                .iter()
                .zip(x_start.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Generates `N` PGD candidates with randomized step size and count, measures
/// how far each must walk back to the true class, and keeps the farthest.
/// Ties go to the lowest candidate index.
pub fn atpr_select_ae(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<AtprSelection> {
    let attack_rng = rng.child("attack");
    let n = y.len();
    let w = x.row_len();
    let mut x_adv = x.clone();
    let mut chosen = vec![0; n];
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut distances = Vec::with_capacity(cfg.atpr.candidates);
    let mut hyper = Vec::with_capacity(cfg.atpr.candidates);
    let mut candidates = Vec::with_capacity(cfg.atpr.candidates);
    for c in 0..cfg.atpr.candidates {
        let (alpha, steps) = candidate_hyper(&cfg.atpr, rng, c);
        let atk = AttackSpec {
            steps,
            step_size: alpha,
            restarts: 1,
            ..cfg.attack_with(AttackLoss::Ce)
        };
        let (delta, _) = pgd_run(model, x, y, &atk, &restart_stream(&attack_rng, c))?;
        let cand = x.zip_map(&delta, |a, d| a + d)?;
        let d = if cfg.atpr.walk_cap == 0 {
            vec![0.0; n]
        } else {
            boundary_walk(model, &cand, y, alpha, cfg.atpr.walk_cap)?
        };
        for i in 0..n {
            if d[i] > best[i] {
                best[i] = d[i];
                chosen[i] = c;
                x_adv.data_mut()[i * w..(i + 1) * w].copy_from_slice(cand.row(i));
            }
        }
        distances.push(d);
        hyper.push((alpha, steps));
        candidates.push(cand);
    }
    Ok(AtprSelection {
        x_adv,
        chosen,
        distances,
        hyper,
        candidates,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
    pub clean_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Mean training seconds per epoch.
    pub fn seconds_per_epoch(&self) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.log.iter().map(|r| r.seconds).sum::<f64>() / self.log.len() as f64
    }
}

fn all_finite(loss: f64, grads: &[Tensor]) -> bool {
    loss.is_finite() && grads.iter().all(Tensor::all_finite)
}

/// Trains a fresh model on `data`; `on_epoch` sees each log record as it is made.
pub fn train(
    cfg: &TrainConfig,
    spec: ModelSpec,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut model = Model::init(spec, &RngStream::new(cfg.seed, "init"))?;
    train_from(cfg, &mut model, data, &mut on_epoch).map(|log| TrainOutcome { model, log })
}

/// Trains `model` in place for `cfg.epochs` epochs.
pub fn train_from(
    cfg: &TrainConfig,
    model: &mut Model,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut opt = OptimState::new(cfg.sgd.clone(), &model.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let shuffle = RngStream::new(cfg.seed, "shuffle");
    let batches = RngStream::new(cfg.seed, "batch");
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle.at(epoch as u64).rng());
        let (mut loss_sum, mut aux_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.x.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let rng = batches.at(epoch as u64).at(b as u64);
            let out = batch_step(model, &x, &y, cfg, &rng)?;
            if !all_finite(out.loss, &out.grads) {
                return Err(Error::NonFinite(format!(
                    "{} loss or gradient at epoch {epoch}, batch {b}",
                    cfg.method
                )));
            }
            opt.sgd_step(&mut model.params, &out.grads)?;
            loss_sum += out.loss * idx.len() as f64;
            aux_sum += out.aux.unwrap_or(0.0) * idx.len() as f64;
            seen += idx.len();
        }
        let seconds = start.elapsed().as_secs_f64();
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            aux_loss: matches!(cfg.method, Method::Cvar | Method::Evar).then(|| aux_sum / seen as f64),
            clean_acc: model.accuracy(&data.x, &data.y)?,
            lr: opt.lr(),
            seconds,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} acc {:.4} ({:.1}s)",
            cfg.method,
            rec.loss,
            rec.clean_acc,
            seconds
        );
        on_epoch(&rec)?;
        log.push(rec);
    }
    Ok(log)
}
