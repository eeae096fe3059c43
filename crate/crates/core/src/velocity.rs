//! Velocity fields `v(a, x̄)` that move individuals through state space.
//!
//! Models built from JSON use [`DescribedVelocity`]; library users may plug in
//! any [`VelocityField`] through [`ValidatedModel::with_velocity`].
//!
//! [`ValidatedModel::with_velocity`]: crate::model::ValidatedModel::with_velocity

use std::fmt;

use serde::{Deserialize, Serialize};

/// A velocity field on `(age, state)` with state coordinates `[size, aux…]`.
pub trait VelocityField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval(&self, age: f64, x: &[f64], out: &mut [f64]);

    /// Analytic `∂v_i/∂x_i`, when known.
    fn own_partial(&self, _i: usize, _age: f64, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Closed-form characteristics, when the field admits them.
    fn closed_form(&self) -> Option<ClosedFlow> {
        None
    }

    /// True when every `v_i` depends on `x_i` (and age) only.
    fn is_separable(&self) -> bool {
        false
    }
}

/// Size law with closed-form characteristics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizeLaw {
    /// `v₁ = α x₁`, `X₁(θ) = x₁ e^{αθ}`.
    Exponential(f64),
    /// `v₁ = r`, `X₁(θ) = x₁ + rθ`.
    Linear(f64),
}

/// Characteristics available in closed form: exponential or linear size growth
/// with constant-rate auxiliary clocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFlow {
    pub size: SizeLaw,
    pub aux_rates: Vec<f64>,
}

impl ClosedFlow {
    pub fn advance(&self, theta: f64, x: &[f64], out: &mut [f64]) {
        out[0] = match self.size {
            SizeLaw::Exponential(alpha) => x[0] * (alpha * theta).exp(),
            SizeLaw::Linear(r) => x[0] + r * theta,
        };
        for (i, rate) in self.aux_rates.iter().enumerate() {
            out[i + 1] = x[i + 1] + rate * theta;
        }
    }

    /// Constant divergence of the field.
    pub fn divergence(&self) -> f64 {
        match self.size {
            SizeLaw::Exponential(alpha) => alpha,
            SizeLaw::Linear(_) => 0.0,
        }
    }

    /// Time for size to move from `from` to `to` (negative when shrinking).
    pub fn time_between_sizes(&self, from: f64, to: f64) -> f64 {
        match self.size {
            SizeLaw::Exponential(alpha) => (to / from).ln() / alpha,
            SizeLaw::Linear(r) => (to - from) / r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeVelocity {
    /// `v₁ = α x₁`.
    #[default]
    Exponential,
    /// `v₁ = rate`.
    Linear { rate: f64 },
    /// `v₁ = α x₁ / (1 + γ x_j)` with `j` an auxiliary index (0-based).
    AuxModulated { gamma: f64, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxVelocity {
    /// Ages advance with time.
    #[default]
    Unit,
    Constant { rate: f64 },
    /// `v = base + slope·x_i`.
    Affine { base: f64, slope: f64 },
    /// `v = rate·(1 + x_i/(k + x_i))`.
    Saturating { rate: f64, k: f64 },
    /// `v = base + gain·x₁`, driven by size.
    SizeCoupled { base: f64, gain: f64 },
}

impl AuxVelocity {
    fn value(&self, own: f64, size: f64) -> f64 {
        match *self {
            AuxVelocity::Unit => 1.0,
            AuxVelocity::Constant { rate } => rate,
            AuxVelocity::Affine { base, slope } => base + slope * own,
            AuxVelocity::Saturating { rate, k } => rate * (1.0 + own / (k + own)),
            AuxVelocity::SizeCoupled { base, gain } => base + gain * size,
        }
    }

    fn own_partial(&self, own: f64) -> f64 {
        match *self {
            AuxVelocity::Unit | AuxVelocity::Constant { .. } | AuxVelocity::SizeCoupled { .. } => 0.0,
            AuxVelocity::Affine { slope, .. } => slope,
            AuxVelocity::Saturating { rate, k } => rate * k / (k + own).powi(2),
        }
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        let ok = match *self {
            AuxVelocity::Unit => true,
            AuxVelocity::Constant { rate } => rate > 0.0,
            AuxVelocity::Affine { base, slope } => base > 0.0 && slope >= 0.0,
            AuxVelocity::Saturating { rate, k } => rate > 0.0 && k > 0.0,
            AuxVelocity::SizeCoupled { base, gain } => base >= 0.0 && gain >= 0.0 && base + gain > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("auxiliary velocity {self:?} is not strictly positive on the interior"))
        }
    }
}

/// Velocity field assembled from declarative descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescribedVelocity {
    pub alpha: f64,
    pub size: SizeVelocity,
    pub aux: Vec<AuxVelocity>,
}

impl VelocityField for DescribedVelocity {
    fn dim(&self) -> usize {
        1 + self.aux.len()
    }

    fn eval(&self, _age: f64, x: &[f64], out: &mut [f64]) {
        out[0] = match self.size {
            SizeVelocity::Exponential => self.alpha * x[0],
            SizeVelocity::Linear { rate } => rate,
            SizeVelocity::AuxModulated { gamma, index } => {
                self.alpha * x[0] / (1.0 + gamma * x[1 + index])
            }
        };
        for (i, v) in self.aux.iter().enumerate() {
            out[i + 1] = v.value(x[i + 1], x[0]);
        }
    }

    fn own_partial(&self, i: usize, _age: f64, x: &[f64]) -> Option<f64> {
        Some(if i == 0 {
            match self.size {
                SizeVelocity::Exponential => self.alpha,
                SizeVelocity::Linear { .. } => 0.0,
                SizeVelocity::AuxModulated { gamma, index } => {
                    self.alpha / (1.0 + gamma * x[1 + index])
                }
            }
        } else {
            self.aux[i - 1].own_partial(x[i])
        })
    }

    fn closed_form(&self) -> Option<ClosedFlow> {
        let size = match self.size {
            SizeVelocity::Exponential => SizeLaw::Exponential(self.alpha),
            SizeVelocity::Linear { rate } => SizeLaw::Linear(rate),
            SizeVelocity::AuxModulated { .. } => return None,
        };
        let aux_rates = self
            .aux
            .iter()
            .map(|v| match *v {
                AuxVelocity::Unit => Some(1.0),
                AuxVelocity::Constant { rate } => Some(rate),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(ClosedFlow { size, aux_rates })
    }

    fn is_separable(&self) -> bool {
        !matches!(self.size, SizeVelocity::AuxModulated { .. })
            && !self
                .aux
                .iter()
                .any(|v| matches!(v, AuxVelocity::SizeCoupled { .. }))
    }
}

/// `Σ ∂v_i/∂x_i`, analytic where the field provides it and central
/// differences (step `1e-6·scale`) otherwise.
pub fn divergence(field: &dyn VelocityField, age: f64, x: &[f64]) -> f64 {
    let n = field.dim();
    let mut total = 0.0;
    let mut probe = x.to_vec();
    let mut hi = vec![0.0; n];
    let mut lo = vec![0.0; n];
    for i in 0..n {
        match field.own_partial(i, age, x) {
            Some(d) => total += d,
            None => {
                let h = 1e-6 * x[i].abs().max(1.0);
                probe[i] = x[i] + h;
                field.eval(age, &probe, &mut hi);
                probe[i] = x[i] - h;
                field.eval(age, &probe, &mut lo);
                probe[i] = x[i];
                total += (hi[i] - lo[i]) / (2.0 * h);
            }
        }
    }
    total
}
