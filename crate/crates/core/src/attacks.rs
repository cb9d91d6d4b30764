//! Worst-case perturbation search: L∞ PGD with CE, KL or CW-margin inner
//! losses, multi-restart composition, and a two-attack AutoAttack stand-in.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::perturbation::{fit_delta, Bounds, PerturbationSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Rows pushed through one attack tape; results do not depend on it.
pub const ATTACK_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackLoss {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "cw-margin")]
    CwMargin,
}

impl AttackLoss {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackLoss::Ce => "ce",
            AttackLoss::Kl => "kl",
            AttackLoss::CwMargin => "cw-margin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ce" => Some(AttackLoss::Ce),
            "kl" => Some(AttackLoss::Kl),
            "cw-margin" | "cw" => Some(AttackLoss::CwMargin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub loss: AttackLoss,
    pub steps: usize,
    pub step_size: f64,
    pub radius: f64,
    pub restarts: usize,
    pub random_start: bool,
    pub bounds: Bounds,
}

impl AttackSpec {
    pub fn pgd(radius: f64, step_size: f64, steps: usize) -> Self {
        Self {
            loss: AttackLoss::Ce,
            steps,
            step_size,
            radius,
            restarts: 1,
            random_start: true,
            bounds: Bounds::UNIT,
        }
    }

    /// Single step of size γ from the clean point.
    pub fn fgsm(radius: f64) -> Self {
        Self {
            random_start: false,
            ..Self::pgd(radius, radius, 1)
        }
    }

    pub fn with_loss(mut self, loss: AttackLoss) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.step_size.is_nan() || self.step_size <= 0.0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(format!(
                "attack needs steps >= 1, step size > 0, restarts >= 1 (got {}, {}, {})",
                self.steps, self.step_size, self.restarts
            )));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("attack radius {}", self.radius)));
        }
        Ok(())
    }

    /// Output name; the margin attack is a PGD proxy for C&W, not the original.
    pub fn name(&self) -> String {
        let base = match self.loss {
            AttackLoss::Ce => "pgd",
            AttackLoss::Kl => "pgd-kl",
            AttackLoss::CwMargin => "pgd-cw",
        };
        format!("{base}{}", self.steps)
    }
}

/// Per-row `max_{j≠y} z_j − z_y` on the tape, `(batch, κ) -> (batch)`.
pub fn cw_margin(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let z = tape.value(logits);
    let k = z.row_len();
    if k < 2 {
        return Err(Error::InvalidArgument("cw margin needs at least 2 classes".into()));
    }
    let runner_up: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = z.row(r);
            (0..k)
                .filter(|&j| j != y)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                })
                .expect("k >= 2")
        })
        .collect();
    let other = tape.gather(logits, &runner_up)?;
    let own = tape.gather(logits, labels)?;
    tape.sub(other, own)
}

/// Batch-mean CW margin of plain logits.
pub fn cw_margin_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let m = cw_margin(&mut tape, z, labels)?;
    let m = tape.mean(m)?;
    Ok(tape.value(m).item())
}

/// Per-row attack loss of `x_adv`, and optionally its input gradient.
///
/// `clean_logits` is required for [`AttackLoss::Kl`].
pub fn loss_and_input_grad(
    model: &Model,
    x_adv: &Tensor,
    y: &[usize],
    loss: AttackLoss,
    clean_logits: Option<&Tensor>,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, false);
    let xv = tape.leaf(x_adv.clone(), want_grad);
    let z = model.spec.forward(&mut tape, &params, xv)?;
    let per = match loss {
        AttackLoss::Ce => tape.cross_entropy(z, y)?,
        AttackLoss::CwMargin => cw_margin(&mut tape, z, y)?,
        AttackLoss::Kl => {
            let clean = clean_logits.ok_or_else(|| Error::InvalidArgument("kl attack needs clean logits".into()))?;
            let p = tape.constant(clean.clone());
            tape.kl_div(p, z)?
        }
    };
    let values = tape.value(per).data().to_vec();
    let grad = if want_grad {
        let total = tape.sum(per)?;
        Some(tape.backward(total, &[xv])?.remove(0))
    } else {
        None
    };
    Ok((values, grad))
}

/// Sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs `steps` signed-gradient ascent steps from `delta`, keeping
/// `‖δ‖∞ ≤ radius` and `x + δ` inside `bounds` after every step.
/// Returns the final δ and per-row final loss.
#[allow(clippy::too_many_arguments)]
pub fn pgd_from(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    mut delta: Tensor,
    loss: AttackLoss,
    steps: usize,
    step_size: f64,
    radius: f64,
    bounds: Bounds,
) -> Result<(Tensor, Vec<f64>)> {
    if delta.shape() != x.shape() {
        return Err(Error::shape("pgd", format!("{:?} vs {:?}", delta.shape(), x.shape())));
    }
    let clean = match loss {
        AttackLoss::Kl => Some(model.logits(x)?),
        _ => None,
    };
    fit_delta(x.data(), delta.data_mut(), radius, bounds);
    let adv = |d: &Tensor| x.zip_map(d, |a, b| a + b);
    for _ in 0..steps {
        let (_, g) = loss_and_input_grad(model, &adv(&delta)?, y, loss, clean.as_ref(), true)?;
        let g = g.expect("gradient requested");
        for (d, gi) in delta.data_mut().iter_mut().zip(g.data()) {
            *d += step_size * sign(*gi);
        }
        fit_delta(x.data(), delta.data_mut(), radius, bounds);
    }
    let (final_loss, _) = loss_and_input_grad(model, &adv(&delta)?, y, loss, clean.as_ref(), false)?;
    Ok((delta, final_loss))
}

/// Uniform start `δ₀ ~ U(−γ, γ)` with one stream per row of the full batch.
pub fn random_start(x: &Tensor, rows: &[usize], radius: f64, stream: &RngStream) -> Tensor {
    let spec = PerturbationSpec::uniform(radius);
    let sample_shape = &x.shape()[1..];
    let mut data = Vec::with_capacity(x.len());
    for &r in rows {
        let mut g = stream.at(r as u64).rng();
        data.extend(spec.sample_delta(sample_shape, &mut g).into_data());
    }
    Tensor::new(x.shape().to_vec(), data).expect("row-wise draws fill the batch")
}

/// One PGD run over the whole batch, chunked by [`ATTACK_CHUNK`] rows.
///
/// With a random start, row `i` draws `δ₀` from `start#i`; `atk.restarts`
/// is ignored here.
pub fn pgd_run(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    atk: &AttackSpec,
    start: &RngStream,
) -> Result<(Tensor, Vec<f64>)> {
    atk.validate()?;
    let n = x.rows();
    if y.len() != n {
        return Err(Error::shape("pgd", format!("{n} rows, {} labels", y.len())));
    }
    let rows: Vec<usize> = (0..n).collect();
    let parts = rows
        .par_chunks(ATTACK_CHUNK)
        .map(|chunk| {
            let xc = x.select_rows(chunk);
            let yc: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let d0 = if atk.random_start {
                random_start(&xc, chunk, atk.radius, start)
            } else {
                Tensor::zeros(xc.shape())
            };
            pgd_from(
                model,
                &xc,
                &yc,
                d0,
                atk.loss,
                atk.steps,
                atk.step_size,
                atk.radius,
                atk.bounds,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut delta = Vec::with_capacity(x.len());
    let mut losses = Vec::with_capacity(n);
    for (d, l) in parts {
        delta.extend(d.into_data());
        losses.extend(l);
    }
    Ok((Tensor::new(x.shape().to_vec(), delta)?, losses))
}

/// Stream for restart `r` of an attack seeded by `rng`.
pub fn restart_stream(rng: &RngStream, r: usize) -> RngStream {
    rng.child(&format!("restart{r}"))
}

/// PGD with restarts; returns δ and the per-row loss of the chosen restart.
///
/// Restart `r` of row `i` draws its start from `rng/restart{r}#i`, so results
/// are independent of batch chunking. Ties keep the lowest restart index.
pub fn pgd_attack_with_loss(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    atk: &AttackSpec,
    rng: &RngStream,
) -> Result<(Tensor, Vec<f64>)> {
    // without a random start every restart would retrace the same path
    let restarts = if atk.random_start { atk.restarts } else { 1 };
    let (mut best_d, mut best_l) = pgd_run(model, x, y, atk, &restart_stream(rng, 0))?;
    let w = x.row_len();
    for r in 1..restarts {
        let (d, l) = pgd_run(model, x, y, atk, &restart_stream(rng, r))?;
        for i in 0..y.len() {
            if l[i] > best_l[i] {
                best_l[i] = l[i];
                best_d.data_mut()[i * w..(i + 1) * w].copy_from_slice(d.row(i));
            }
        }
    }
    Ok((best_d, best_l))
}

/// `δ` from [`pgd_attack_with_loss`].
pub fn pgd_attack(model: &Model, x: &Tensor, y: &[usize], atk: &AttackSpec, rng: &RngStream) -> Result<Tensor> {
    pgd_attack_with_loss(model, x, y, atk, rng).map(|(d, _)| d)
}

/// Result of [`auto_proxy`] for a batch.
#[derive(Debug, Clone)]
pub struct ProxyOutcome {
    pub delta: Tensor,
    /// Whether some candidate flipped the prediction of each row.
    pub broken: Vec<bool>,
    /// Index of the chosen candidate per row: 0 = PGD-CE, 1 = PGD-CW.
    pub chosen: Vec<usize>,
}

/// Candidate choice: any label-flipping δ wins over a non-flipping one;
/// otherwise the higher CE loss wins, ties to the earlier candidate.
pub fn choose_candidate(flipped: &[bool], ce_loss: &[f64]) -> usize {
    (1..flipped.len()).fold(0, |best, c| {
        let better = match (flipped[c], flipped[best]) {
            (true, false) => true,
            (false, true) => false,
            _ => ce_loss[c] > ce_loss[best],
        };
        if better {
            c
        } else {
            best
        }
    })
}

pub const PROXY_STEPS: usize = 20;
pub const PROXY_RESTARTS: usize = 2;

/// AutoAttack stand-in: PGD-CE and PGD-CW (20 steps, 2 restarts,
/// step γ/4 each). Reported as a lower bound on attack strength.
pub fn auto_proxy(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    radius: f64,
    bounds: Bounds,
    rng: &RngStream,
) -> Result<ProxyOutcome> {
    let base = AttackSpec {
        bounds,
        restarts: PROXY_RESTARTS,
        ..AttackSpec::pgd(radius, (radius / 4.0).max(f64::MIN_POSITIVE), PROXY_STEPS)
    };
    let mut candidates = Vec::new();
    for (i, loss) in [AttackLoss::Ce, AttackLoss::CwMargin].into_iter().enumerate() {
        let atk = base.with_loss(loss);
        let d = pgd_attack(model, x, y, &atk, &rng.child(&format!("proxy{i}")))?;
        let adv = x.zip_map(&d, |a, b| a + b)?;
        let (ce, _) = loss_and_input_grad(model, &adv, y, AttackLoss::Ce, None, false)?;
        let pred = model.predict(&adv)?;
        let flipped: Vec<bool> = pred.iter().zip(y).map(|(p, t)| p != t).collect();
        candidates.push((d, ce, flipped));
    }
    let w = x.row_len();
    let mut delta = Vec::with_capacity(x.len());
    let (mut broken, mut chosen) = (Vec::new(), Vec::new());
    for i in 0..y.len() {
        let flips: Vec<bool> = candidates.iter().map(|c| c.2[i]).collect();
        let ces: Vec<f64> = candidates.iter().map(|c| c.1[i]).collect();
        let c = choose_candidate(&flips, &ces);
        delta.extend_from_slice(&candidates[c].0.data()[i * w..(i + 1) * w]);
        broken.push(flips[c]);
        chosen.push(c);
    }
    Ok(ProxyOutcome {
        delta: Tensor::new(x.shape().to_vec(), delta)?,
        broken,
        chosen,
    })
}
