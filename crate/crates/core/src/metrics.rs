//! Robustness metrics: adversarial accuracy, Monte-Carlo probabilistic
//! robustness with Clopper–Pearson intervals, ProbAcc, generalization gaps,
//! the composite score, and the ν smoothness probe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::attacks::{auto_proxy, pgd_attack, AttackSpec};
use crate::autodiff::softmax_rows;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::perturbation::PerturbationSpec;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Monte-Carlo estimate of a per-point robustness probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrEstimate {
    pub p: f64,
    pub samples: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Quantile of Beta(a, b) by bisection on the regularized incomplete beta
/// function (statrs' own inverse stops at ~1e-4 precision).
fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided Clopper–Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: usize, n: usize, confidence: f64) -> (f64, f64) {
    assert!(k <= n && n > 0);
    let a = (1.0 - confidence) / 2.0;
    let (kf, nf) = (k as f64, n as f64);
    let lower = if k == 0 {
        0.0
    } else {
        beta_quantile(kf, nf - kf + 1.0, a)
    };
    let upper = if k == n {
        1.0
    } else {
        beta_quantile(kf + 1.0, nf - kf, 1.0 - a)
    };
    (lower, upper)
}

/// Copies per forward pass when sampling around one point.
const PR_CHUNK: usize = 500;

/// Estimates `Pr_δ[f(x + δ) = y]` from `n` draws of `pert` taken in order
/// from `stream`. `x` is one sample (no batch axis).
pub fn estimate_pr(
    model: &Model,
    x: &[f64],
    y: usize,
    pert: &PerturbationSpec,
    n: usize,
    stream: &RngStream,
) -> Result<PrEstimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("PR estimate needs N >= 1".into()));
    }
    if x.len() != model.spec.input_len() {
        return Err(Error::shape("estimate_pr", format!("sample of {} values", x.len())));
    }
    let shape = &model.spec.input_shape;
    let mut g = stream.rng();
    let mut hits = 0;
    let mut left = n;
    while left > 0 {
        let m = left.min(PR_CHUNK);
        let base = Tensor::tile_row(x, shape, m);
        let noisy = pert.perturb(&base, &mut g);
        hits += model.predict(&noisy)?.iter().filter(|&&p| p == y).count();
        left -= m;
    }
    let (lower, upper) = clopper_pearson(hits, n, 0.95);
    Ok(PrEstimate {
        p: hits as f64 / n as f64,
        samples: n,
        lower,
        upper,
    })
}

/// Per-point PR over the correctly classified rows of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrSweep {
    /// `(dataset index, estimate)` for every clean-correct point.
    pub points: Vec<(usize, PrEstimate)>,
    pub total: usize,
}

impl PrSweep {
    /// Mean PR over clean-correct points; `None` if there are none.
    pub fn rate(&self) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().map(|(_, e)| e.p).sum::<f64>() / self.points.len() as f64)
    }

    /// Fraction of clean-correct points with `p̂ ≥ 1 − ρ`.
    pub fn prob_acc(&self, rho: f64) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let hits = self.points.iter().filter(|(_, e)| e.p >= 1.0 - rho).count();
        Some(hits as f64 / self.points.len() as f64)
    }
}

/// Per-point PR estimates for every clean-correct row; point `i` uses stream `rng#i`.
pub fn pr_sweep(model: &Model, data: &Dataset, pert: &PerturbationSpec, n: usize, rng: &RngStream) -> Result<PrSweep> {
    let pred = model.predict(&data.x)?;
    let correct: Vec<usize> = (0..data.len()).filter(|&i| pred[i] == data.y[i]).collect();
    let points = correct
        .par_iter()
        .map(|&i| estimate_pr(model, data.x.row(i), data.y[i], pert, n, &rng.at(i as u64)).map(|e| (i, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrSweep {
        points,
        total: data.len(),
    })
}

/// Mean PR over clean-correct points; `None` when no point is correct.
pub fn pr_dataset(
    model: &Model,
    data: &Dataset,
    pert: &PerturbationSpec,
    n: usize,
    rng: &RngStream,
) -> Result<Option<f64>> {
    pr_sweep(model, data, pert, n, rng).map(|s| s.rate())
}

/// Fraction of clean-correct points whose PR reaches `1 − ρ`.
pub fn prob_acc(
    model: &Model,
    data: &Dataset,
    rho: f64,
    pert: &PerturbationSpec,
    n: usize,
    rng: &RngStream,
) -> Result<Option<f64>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("tolerance ρ = {rho} outside (0, 1)")));
    }
    pr_sweep(model, data, pert, n, rng).map(|s| s.prob_acc(rho))
}

/// Accuracy on attacked inputs over all rows (misclassified clean rows count as failures).
pub fn adversarial_accuracy(model: &Model, data: &Dataset, atk: &AttackSpec, rng: &RngStream) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let delta = pgd_attack(model, &data.x, &data.y, atk, rng)?;
    let adv = data.x.zip_map(&delta, |a, d| a + d)?;
    let pred = model.predict(&adv)?;
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy under the two-attack proxy.
pub fn proxy_accuracy(model: &Model, data: &Dataset, radius: f64, rng: &RngStream) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let out = auto_proxy(model, &data.x, &data.y, radius, data.bounds, rng)?;
    let survived = out.broken.iter().filter(|b| !**b).count();
    Ok(survived as f64 / data.len() as f64)
}

/// `train − test`.
pub fn generalization_error(train_metric: f64, test_metric: f64) -> f64 {
    train_metric - test_metric
}

/// One row of a composite-score table; `None` marks a missing metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInput {
    pub tag: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub tag: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    /// Per-column contribution before weighting, after reversal.
    pub normalized: Vec<f64>,
}

/// Min–max normalizes each column, reverses lower-is-better columns, and
/// ranks rows by the weighted sum. Constant columns map to 0.5; missing
/// values score as the worst in their column. Ties rank by tag.
pub fn composite_score(rows: &[ScoreInput], weights: &[f64], lower_is_better: &[bool]) -> Result<Vec<ScoredRow>> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "composite score needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let cols = weights.len();
    if lower_is_better.len() != cols || rows.iter().any(|r| r.values.len() != cols) {
        return Err(Error::InvalidArgument(
            "weights, flags and rows disagree on column count".into(),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidArgument(
            "weights must be nonnegative and not all zero".into(),
        ));
    }
    let mut normalized = vec![vec![0.0; cols]; rows.len()];
    for c in 0..cols {
        let present: Vec<f64> = rows.iter().filter_map(|r| r.values[c]).collect();
        let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (r, row) in rows.iter().enumerate() {
            normalized[r][c] = match row.values[c] {
                None => 0.0,
                Some(_) if hi.is_nan() || hi <= lo => 0.5,
                Some(v) => {
                    let t = (v - lo) / (hi - lo);
                    if lower_is_better[c] {
                        1.0 - t
                    } else {
                        t
                    }
                }
            };
        }
        if present.is_empty() {
            for n in normalized.iter_mut() {
                n[c] = 0.5;
            }
        }
    }
    let mut out: Vec<ScoredRow> = rows
        .iter()
        .zip(normalized)
        .map(|(r, n)| ScoredRow {
            tag: r.tag.clone(),
            score: n.iter().zip(weights).map(|(v, w)| v * w).sum(),
            rank: 0,
            normalized: n,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tag.cmp(&b.tag)));
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(out)
}

/// Sampled `max ‖softmax(x + δ) − softmax(x)‖₂` over `samples` draws of
/// `pert`, taken in order from `stream`.
pub fn estimate_nu(
    model: &Model,
    x: &[f64],
    pert: &PerturbationSpec,
    samples: usize,
    stream: &RngStream,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArgument("ν probe needs at least 1 sample".into()));
    }
    let shape = &model.spec.input_shape;
    let p0 = softmax_rows(&model.logits(&Tensor::tile_row(x, shape, 1))?);
    let mut g = stream.rng();
    let mut best: f64 = 0.0;
    let mut left = samples;
    while left > 0 {
        let m = left.min(PR_CHUNK);
        let noisy = pert.perturb(&Tensor::tile_row(x, shape, m), &mut g);
        let p = softmax_rows(&model.logits(&noisy)?);
        for r in 0..m {
            let d = p
                .row(r)
                .iter()
                .zip(p0.row(0))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
        left -= m;
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuSummary {
    pub radius: f64,
    pub samples: usize,
    pub points: usize,
    pub mean: f64,
    pub max: f64,
}

/// ν over the first `points` rows of `data`; point `i` uses stream `rng#i`.
pub fn nu_summary(
    model: &Model,
    data: &Dataset,
    pert: &PerturbationSpec,
    points: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<NuSummary> {
    let k = points.min(data.len());
    let vals = (0..k)
        .into_par_iter()
        .map(|i| estimate_nu(model, data.x.row(i), pert, samples, &rng.at(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(NuSummary {
        radius: pert.radius,
        samples,
        points: k,
        mean: if k == 0 {
            0.0
        } else {
            vals.iter().sum::<f64>() / k as f64
        },
        max: vals.iter().copied().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clopper_pearson_edges() {
        assert_eq!(clopper_pearson(10, 10, 0.95).1, 1.0);
        assert_eq!(clopper_pearson(0, 10, 0.95).0, 0.0);
        // exact lower bound for 10/10 is 0.025^(1/10)
        let (lo, _) = clopper_pearson(10, 10, 0.95);
        assert!((lo - 0.025f64.powf(0.1)).abs() < 1e-10);
        let (lo, hi) = clopper_pearson(50, 100, 0.95);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-9);
    }

    #[test]
    fn ge_is_signed_difference() {
        assert_eq!(generalization_error(0.9, 0.9), 0.0);
        assert!((generalization_error(0.95, 0.90) - 0.05).abs() < 1e-15);
        assert_eq!(generalization_error(0.3, 0.7), -generalization_error(0.7, 0.3));
    }

    fn row(tag: &str, v: &[f64]) -> ScoreInput {
        ScoreInput {
            tag: tag.into(),
            values: v.iter().map(|&x| Some(x)).collect(),
        }
    }

    #[test]
    fn composite_endpoints_and_reversal() {
        let s = composite_score(&[row("a", &[1.0]), row("b", &[3.0])], &[1.0], &[false]).unwrap();
        assert_eq!((s[0].tag.as_str(), s[0].score, s[1].score), ("b", 1.0, 0.0));
        let s = composite_score(&[row("a", &[10.0]), row("b", &[30.0])], &[1.0], &[true]).unwrap();
        assert_eq!((s[0].tag.as_str(), s[0].score, s[1].score), ("a", 1.0, 0.0));
    }

    #[test]
    fn composite_constant_columns_and_errors() {
        let s = composite_score(
            &[row("z", &[2.0, 5.0]), row("y", &[2.0, 5.0])],
            &[1.0, 3.0],
            &[false, true],
        )
        .unwrap();
        assert!(s.iter().all(|r| r.score == 2.0));
        assert_eq!(s[0].tag, "y");
        assert!(composite_score(&[row("a", &[1.0])], &[1.0], &[false]).is_err());
        assert!(composite_score(&[row("a", &[1.0]), row("b", &[2.0])], &[0.0], &[false]).is_err());
    }

    #[test]
    fn missing_value_is_worst() {
        let rows = [
            row("a", &[1.0]),
            row("b", &[2.0]),
            ScoreInput {
                tag: "c".into(),
                values: vec![None],
            },
        ];
        let s = composite_score(&rows, &[1.0], &[false]).unwrap();
        assert_eq!(s.last().unwrap().score, 0.0);
    }
}
