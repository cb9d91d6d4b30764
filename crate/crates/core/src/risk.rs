//! Tail-risk functionals of a loss sample: CVaR and EVaR.

use crate::error::{Error, Result};

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("risk level ρ = {rho} outside (0, 1]")));
    }
    Ok(())
}

/// `α + (1/ρn) Σ [ℓ − α]₊`, the Rockafellar–Uryasev objective.
pub fn cvar_at(alpha: f64, losses: &[f64], rho: f64) -> f64 {
    let n = losses.len() as f64;
    alpha + losses.iter().map(|l| (l - alpha).max(0.0)).sum::<f64>() / (rho * n)
}

/// Empirical CVaR: the mean of the worst ρ-fraction of `losses`, with the
/// boundary sample weighted fractionally when ρn is not an integer.
///
/// Computed as the minimum of [`cvar_at`] over the sample points (the
/// objective is piecewise linear and convex with kinks only there).
pub fn empirical_cvar(losses: &[f64], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty loss sample".into()));
    }
    Ok(losses
        .iter()
        .map(|&a| cvar_at(a, losses, rho))
        .fold(f64::INFINITY, f64::min))
}

/// One threshold step: `α ← α − η·(1 − (1/(ρM))·Σ 𝕀[ℓ ≥ α])`.
pub fn cvar_alpha_step(alpha: f64, losses: &[f64], rho: f64, eta: f64) -> f64 {
    let hits = losses.iter().filter(|&&l| l >= alpha).count() as f64;
    alpha - eta * (1.0 - hits / (rho * losses.len() as f64))
}

/// `g(α) = (1/α)·log(mean(exp(αL))/ρ)`, evaluated stably.
pub fn evar_at(alpha: f64, losses: &[f64], rho: f64) -> f64 {
    let m = losses.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = losses.iter().map(|l| (alpha * (l - m)).exp()).sum();
    let lme = alpha * m + (s / losses.len() as f64).ln();
    (lme - rho.ln()) / alpha
}

/// Search range for `log α` on losses rescaled to span `[0, 1]`.
pub const LOG_ALPHA_RANGE: (f64, f64) = (-8.0, 16.0);

/// EVaR and its minimizing α.
///
/// EVaR is translation-equivariant and positively homogeneous, so the
/// search runs on losses rescaled to `[0, 1]` (golden section on `log α`,
/// endpoints included). Two cases where the infimum is only a limit are
/// returned exactly: ρ = 1 gives the mean (α → 0), and a maximum shared by
/// at least a ρ-fraction of the sample gives that maximum (α → ∞); α is
/// then reported at the matching end of the range.
pub fn evar_with_alpha(losses: &[f64], rho: f64) -> Result<(f64, f64)> {
    check_rho(rho)?;
    if losses.is_empty() || losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidArgument("EVaR needs a finite, nonempty sample".into()));
    }
    let n = losses.len() as f64;
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { hi - lo } else { 1.0 };
    let (u0, u1) = LOG_ALPHA_RANGE;
    if rho == 1.0 {
        return Ok((losses.iter().sum::<f64>() / n, u0.exp() / scale));
    }
    let at_max = losses.iter().filter(|&&l| l == hi).count() as f64;
    if at_max >= rho * n {
        return Ok((hi, u1.exp() / scale));
    }
    let z: Vec<f64> = losses.iter().map(|l| (l - lo) / scale).collect();
    let f = |u: f64| evar_at(u.exp(), &z, rho);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (u0, u1);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-11 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let (v, u) = [0.5 * (a + b), u0, u1]
        .into_iter()
        .map(|u| (f(u), u))
        .fold((f64::INFINITY, 0.0), |acc, v| if v.0 < acc.0 { v } else { acc });
    Ok((lo + scale * v, u.exp() / scale))
}

/// `inf_{α>0} (1/α)·log(E[e^{αL}]/ρ)` over the sample.
pub fn evar_objective(losses: &[f64], rho: f64) -> Result<f64> {
    evar_with_alpha(losses, rho).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cvar_top_half() {
        assert!((empirical_cvar(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap() - 3.5).abs() < 1e-15);
        assert!((empirical_cvar(&[4.0, 1.0, 3.0, 2.0], 1.0).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn alpha_steps_converge_to_cvar() {
        let l = [1.0, 2.0, 3.0, 4.0];
        let mut a = 0.0;
        for _ in 0..2000 {
            a = cvar_alpha_step(a, &l, 0.5, 0.01);
        }
        assert!((cvar_at(a, &l, 0.5) - 3.5).abs() < 1e-9, "α = {a}");
    }

    #[test]
    fn evar_degenerate_and_bounds() {
        assert!((evar_objective(&[2.0; 5], 1.0).unwrap() - 2.0).abs() < 1e-12);
        let v = evar_objective(&[0.0, 1.0], 1.0).unwrap();
        assert!((0.5..=1.0).contains(&v), "{v}");
        assert!(evar_objective(&[1.0], 0.0).is_err());
    }
}
