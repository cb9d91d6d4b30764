//! Random perturbations inside an L∞ ball, plus projection and domain clipping.
//!
//! Gaussian and Laplace draws are clamped coordinate-wise into `[-γ, γ]`,
//! with default scale `γ/2`. Reports carry both choices.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Uniform,
    Gaussian,
    Laplace,
}

impl NoiseFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseFamily::Uniform => "uniform",
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Laplace => "laplace",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(NoiseFamily::Uniform),
            "gaussian" => Some(NoiseFamily::Gaussian),
            "laplace" => Some(NoiseFamily::Laplace),
            _ => None,
        }
    }
}

/// Valid input range `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::InvalidArgument(format!("bounds [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        t.data().iter().all(|&v| v >= self.lo && v <= self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub family: NoiseFamily,
    pub radius: f64,
    /// Gaussian standard deviation or Laplace scale; `None` means `radius / 2`.
    pub scale: Option<f64>,
    pub bounds: Bounds,
}

impl PerturbationSpec {
    pub fn uniform(radius: f64) -> Self {
        Self {
            family: NoiseFamily::Uniform,
            radius,
            scale: None,
            bounds: Bounds::UNIT,
        }
    }

    pub fn with_family(mut self, family: NoiseFamily) -> Self {
        self.family = family;
        self
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("radius {}", self.radius)));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("noise scale {s}")));
            }
        }
        Bounds::new(self.bounds.lo, self.bounds.hi).map(|_| ())
    }

    pub fn effective_scale(&self) -> f64 {
        self.scale.unwrap_or(self.radius / 2.0)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = self.radius;
        match self.family {
            NoiseFamily::Uniform => rng.gen_range(-1.0..1.0) * g,
            NoiseFamily::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                (z * self.effective_scale()).clamp(-g, g)
            }
            NoiseFamily::Laplace => {
                // inverse CDF on u ∈ (-1/2, 1/2)
                let u: f64 = rng.gen_range(-0.5..0.5);
                let v = -self.effective_scale() * u.signum() * (1.0 - 2.0 * u.abs()).ln();
                v.clamp(-g, g)
            }
        }
    }

    /// Draws `δ` of the given shape with i.i.d. coordinates; `‖δ‖∞ ≤ γ` always.
    pub fn sample_delta<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        if self.radius == 0.0 {
            return Tensor::zeros(shape);
        }
        let data = (0..n).map(|_| self.draw(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
    }

    /// `x + δ` for a freshly drawn `δ`, clipped into the domain.
    pub fn perturb<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Tensor {
        let delta = self.sample_delta(x.shape(), rng);
        apply_and_clip(x, &delta, self.bounds).expect("same shape")
    }
}

/// `clamp(x + δ, lo, hi)`.
pub fn apply_and_clip(x: &Tensor, delta: &Tensor, bounds: Bounds) -> Result<Tensor> {
    if x.shape() != delta.shape() {
        return Err(Error::shape(
            "apply_and_clip",
            format!("{:?} vs {:?}", x.shape(), delta.shape()),
        ));
    }
    x.zip_map(delta, |a, d| (a + d).clamp(bounds.lo, bounds.hi))
}

/// Coordinate-wise clamp into `[-γ, γ]`.
pub fn project_linf(delta: &Tensor, radius: f64) -> Tensor {
    delta.map(|v| v.clamp(-radius, radius))
}

/// Adjusts `δ` in place so that `‖δ‖∞ ≤ γ` and `x + δ ∈ [lo, hi]` both hold
/// exactly in floating point. `x` must already lie inside the bounds.
pub fn fit_delta(x: &[f64], delta: &mut [f64], radius: f64, bounds: Bounds) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let mut v = d.clamp(-radius, radius);
        if !(bounds.lo..=bounds.hi).contains(&(xi + v)) {
            v = ((xi + v).clamp(bounds.lo, bounds.hi) - xi).clamp(-radius, radius);
        }
        while xi + v > bounds.hi {
            v = v.next_down();
        }
        while xi + v < bounds.lo {
            v = v.next_up();
        }
        *d = v;
    }
}
