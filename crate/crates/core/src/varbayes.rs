//! Mean-scaled Gaussian variational family over layer weights, its KL
//! divergence to a zero-mean Gaussian prior, and the ELBO objective.
//!
//! Each weight-bearing layer carries means `mu_w`, `mu_b` and one scalar
//! spread parameter per tensor, `delta_w` and `delta_b`. A sample is
//! `mu ⊙ (1 + tau·eps)` with `tau = softplus(delta)` and `eps ~ N(0, I)`,
//! so each coordinate is `N(mu_j, (tau·mu_j)²)`.

use alloc::vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Standard-deviation floor for `tau·|mu_j|` in the KL term; guards `mu_j = 0`.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Initial relative weight noise: `delta = softplus⁻¹(0.05)`.
pub const INITIAL_TAU: f64 = 0.05;

/// `softplus(delta)`, returning `delta` itself above 30.
pub fn tau(delta: f64) -> f64 {
    if delta > 30.0 {
        delta
    } else {
        delta.exp().ln_1p()
    }
}

/// Inverse of [`tau`] on `(0, ∞)`.
pub fn inverse_tau(tau: f64) -> f64 {
    if tau > 30.0 {
        tau
    } else {
        tau.exp_m1().ln()
    }
}

/// Zero-mean isotropic Gaussian prior over weights and biases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    pub sigma_w: f64,
    pub sigma_b: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            sigma_w: 4.0,
            sigma_b: 8.0,
        }
    }
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_w > 0.0 && self.sigma_b > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("prior sigmas must be positive: {self:?}")))
        }
    }
}

/// `Σ_j [ln(σ_p/σ_j) + (σ_j² + μ_j²)/(2σ_p²) − ½]` with
/// `σ_j = max(tau·|μ_j|, floor)`, accumulated in f64.
pub fn kl_mean_scaled<T: Real>(mu: &[T], tau: f64, sigma_p: f64, floor: f64) -> f64 {
    let var_p = sigma_p * sigma_p;
    let ln_sp = sigma_p.ln();
    mu.iter()
        .map(|&m| {
            let m = m.as_f64();
            let sq = (tau * m.abs()).max(floor);
            ln_sp - sq.ln() + (sq * sq + m * m) / (2.0 * var_p) - 0.5
        })
        .sum()
}

/// Variational parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalLayer<T> {
    pub mu_w: Tensor<T>,
    pub delta_w: T,
    pub mu_b: Tensor<T>,
    pub delta_b: T,
}

impl<T: Real> VariationalLayer<T> {
    pub fn tau_w(&self) -> f64 {
        tau(self.delta_w.as_f64())
    }

    pub fn tau_b(&self) -> f64 {
        tau(self.delta_b.as_f64())
    }

    /// Number of weight coordinates.
    pub fn weight_dim(&self) -> usize {
        self.mu_w.numel()
    }

    pub fn bias_dim(&self) -> usize {
        self.mu_b.numel()
    }

    /// Draws `(W, B)`; weight noise is drawn before bias noise.
    pub fn sample(&self, rng: &mut RngStream) -> (Tensor<T>, Tensor<T>) {
        let draw = |mu: &Tensor<T>, t: f64, rng: &mut RngStream| {
            let t = T::lit(t);
            let m = mu.data();
            Tensor::from_fn(mu.shape(), |i| m[i] * (T::one() + t * T::lit(rng.normal())))
        };
        let w = draw(&self.mu_w, self.tau_w(), rng);
        let b = draw(&self.mu_b, self.tau_b(), rng);
        (w, b)
    }

    /// KL of this layer's weights and biases to the prior.
    pub fn kl(&self, prior: &Prior) -> f64 {
        kl_mean_scaled(self.mu_w.data(), self.tau_w(), prior.sigma_w, SIGMA_FLOOR)
            + kl_mean_scaled(self.mu_b.data(), self.tau_b(), prior.sigma_b, SIGMA_FLOOR)
    }
}

/// Records a reparameterized sample of `mu` on the tape. `delta` is a
/// one-element variable; gradients flow to both.
pub fn sample_on_tape<T: Real>(tape: &mut Tape<T>, mu: Var, delta: Var, rng: &mut RngStream) -> Result<Var> {
    let mut eps = vec![T::zero(); tape.value(mu).numel()];
    rng.fill_normal(&mut eps);
    let t = tape.softplus(delta);
    tape.reparam(mu, t, eps)
}

/// KL of `(mu, delta)` to `N(0, sigma_p²)` as a differentiable scalar.
pub fn kl_on_tape<T: Real>(tape: &mut Tape<T>, mu: Var, delta: Var, sigma_p: f64) -> Result<Var> {
    let t = tape.softplus(delta);
    tape.gaussian_kl(mu, t, T::lit(sigma_p), T::lit(SIGMA_FLOOR))
}

/// Mean per-point negative log-softmax likelihood plus `kl_weight · kl`.
///
/// `logits` has classes on its trailing axis and one label per row.
pub fn elbo_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    kl: Option<Var>,
    kl_weight: f64,
) -> Result<Var> {
    if !(kl_weight >= 0.0) {
        return Err(Error::Config(alloc::format!("kl_weight must be >= 0, got {kl_weight}")));
    }
    let logp = tape.log_softmax(logits)?;
    let nll = tape.nll(logp, labels)?;
    match kl {
        Some(kl) if kl_weight > 0.0 => {
            let scaled = tape.scale(kl, T::lit(kl_weight));
            tape.add(nll, scaled)
        }
        _ => Ok(nll),
    }
}
