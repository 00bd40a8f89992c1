//! Noise schedules, closed-form forward noising, ancestral reverse steps and
//! the step-weight diagnostic.
//!
//! Steps are 1-based throughout: `k = 1` is the least noisy step and `k = K`
//! the most noisy one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Terminal `ᾱ_K` above which a schedule does not destroy the signal well.
pub const TERMINAL_ALPHA_BAR_WARN: f64 = 0.01;

/// Per-step coefficient tables for a `K`-step diffusion.
///
/// All tables are stored in 64-bit regardless of the model precision and are
/// never serialized; they are rebuilt from `(beta_start, beta_end, steps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    a_weight: Vec<f64>,
}

/// `A_k = β² / (2 β̃² α (1 − ᾱ))` for one step.
pub fn step_weight(beta: f64, beta_tilde: f64, alpha: f64, alpha_bar: f64) -> f64 {
    beta * beta / (2.0 * beta_tilde * beta_tilde * alpha * (1.0 - alpha_bar))
}

impl NoiseSchedule {
    /// Quadratic schedule: linear interpolation in `sqrt(β)` between the
    /// endpoints, squared.
    pub fn quadratic(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        let ok = beta_start.is_finite()
            && beta_end.is_finite()
            && 0.0 < beta_start
            && beta_start < beta_end
            && beta_end < 1.0;
        if !ok || steps == 0 {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_start < beta_end < 1 and steps >= 1, \
                 got ({beta_start}, {beta_end}, {steps})"
            )));
        }
        if steps == 1 {
            return Self::from_betas(vec![beta_start]);
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let last = (steps - 1) as f64;
        let mut betas: Vec<f64> = (0..steps)
            .map(|i| {
                let r = s0 + (i as f64 / last) * (s1 - s0);
                r * r
            })
            .collect();
        // Pin the endpoints against rounding in the square/sqrt round trip.
        betas[0] = beta_start;
        betas[steps - 1] = beta_end;
        Self::from_betas(betas)
    }

    /// Builds every derived table from an explicit `β` sequence.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule has no steps".into()));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("beta at step {} is {b}, outside (0, 1)", i + 1)));
            }
            if i > 0 && b < beta[i - 1] {
                return Err(Error::Config(format!("beta decreases at step {}", i + 1)));
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut beta_tilde = Vec::with_capacity(beta.len());
        let mut a_weight = Vec::with_capacity(beta.len());
        for k in 0..beta.len() {
            let prev = if k == 0 { 1.0 } else { alpha_bar[k - 1] };
            let bt = (1.0 - prev) / (1.0 - alpha_bar[k]) * beta[k];
            beta_tilde.push(bt);
            // The first step's posterior variance is zero; its weight uses β₁
            // in place of β̃₁.
            let guarded = if k == 0 { beta[0] } else { bt };
            a_weight.push(step_weight(beta[k], guarded, alpha[k], alpha_bar[k]));
        }
        let s = Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            a_weight,
        };
        if s.alpha_bar_at(s.steps()) > TERMINAL_ALPHA_BAR_WARN {
            log::warn!(
                "terminal alpha_bar {:.4} exceeds {TERMINAL_ALPHA_BAR_WARN}; samples will not start from pure noise",
                s.alpha_bar_at(s.steps())
            );
        }
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::Contract(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }

    pub fn beta_at(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha_at(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn alpha_bar_at(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }

    pub fn beta_tilde_at(&self, k: usize) -> f64 {
        self.beta_tilde[k - 1]
    }

    pub fn weight_at(&self, k: usize) -> f64 {
        self.a_weight[k - 1]
    }
}

/// The step weights `A_1..A_K` used by the bound proxy.
pub fn ak_diagnostic(schedule: &NoiseSchedule) -> Vec<f64> {
    schedule.a_weight.clone()
}

/// Standard-normal tensor. Draws are taken in 64-bit and rounded, so both
/// precisions consume the generator identically.
pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// A noised target together with the Gaussian draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTarget<T> {
    pub y_k: Tensor<T>,
    pub k: usize,
    pub eps: Tensor<T>,
}

/// `√ᾱ_k · y0 + √(1 − ᾱ_k) · eps` with a caller-supplied draw.
pub fn forward_noise_with<T: Real>(
    y0: &Tensor<T>,
    k: usize,
    schedule: &NoiseSchedule,
    eps: Tensor<T>,
) -> Result<NoisyTarget<T>> {
    schedule.check_step(k)?;
    let ab = schedule.alpha_bar_at(k);
    let (c0, c1) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let y_k = y0.zip_map(&eps, |y, e| c0 * y + c1 * e)?;
    Ok(NoisyTarget { y_k, k, eps })
}

/// Samples `y_k` in closed form from `y0`.
pub fn forward_noise<T: Real, R: Rng + ?Sized>(
    y0: &Tensor<T>,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoisyTarget<T>> {
    schedule.check_step(k)?;
    let eps = standard_normal(y0.shape(), rng);
    forward_noise_with(y0, k, schedule, eps)
}

/// Posterior mean `(y_k − β_k/√(1 − ᾱ_k) · eps_pred) / √α_k`.
pub fn reverse_mean<T: Real>(y_k: &Tensor<T>, eps_pred: &Tensor<T>, k: usize, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check_step(k)?;
    if y_k.shape() != eps_pred.shape() {
        return Err(Error::Dimension(format!(
            "reverse step: state {:?} vs noise prediction {:?}",
            y_k.shape(),
            eps_pred.shape()
        )));
    }
    let coef = T::lit(schedule.beta_at(k) / (1.0 - schedule.alpha_bar_at(k)).sqrt());
    let inv = T::lit(1.0 / schedule.alpha_at(k).sqrt());
    y_k.zip_map(eps_pred, |y, e| (y - coef * e) * inv)
}

/// One ancestral step `y_k → y_{k−1}`: the posterior mean plus
/// `√β̃_k · z` for `k > 1`; the final step adds no noise and draws nothing.
pub fn reverse_step<T: Real, R: Rng + ?Sized>(
    y_k: &Tensor<T>,
    eps_pred: &Tensor<T>,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut mean = reverse_mean(y_k, eps_pred, k, schedule)?;
    if k > 1 {
        let sd = schedule.beta_tilde_at(k).sqrt();
        for v in mean.data_mut() {
            *v += T::lit(sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(mean)
}

/// Anything that predicts the injected noise for a batch of noised targets.
pub trait NoisePredictor<T: Real> {
    fn horizon(&self) -> usize;

    /// `y_k` is `[B, H, D]`, `x` is `[B, L, D]`, `steps` holds one step per
    /// batch element. Returns `[B, H, D]`.
    fn predict(&self, y_k: &Tensor<T>, x: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>>;
}

/// Runs `rngs.len()` independent reverse chains in one batch, one per
/// generator, all conditioned on the same lookback `x` (`[L, D]`). The
/// predictor is called exactly `K` times. On failure returns the offending
/// trajectory index with the error.
fn run_chains<T: Real, P: NoisePredictor<T> + ?Sized, R: Rng>(
    x: &Tensor<T>,
    model: &P,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> std::result::Result<Vec<Tensor<T>>, (usize, Error)> {
    let at0 = |e: Error| (0, e);
    if x.ndim() != 2 {
        return Err(at0(Error::Dimension(format!("lookback must be [L, D], got {:?}", x.shape()))));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let h = model.horizon();
    let b = rngs.len();
    let xb = Tensor::stack(&vec![x.clone(); b]).map_err(at0)?;
    let mut states: Vec<Tensor<T>> = rngs.iter_mut().map(|r| standard_normal(&[h, d], r)).collect();
    debug_assert_eq!(xb.shape(), &[b, l, d]);
    for k in (1..=schedule.steps()).rev() {
        let yb = Tensor::stack(&states).map_err(at0)?;
        let eps = model.predict(&yb, &xb, &vec![k; b]).map_err(at0)?;
        for (i, (e, state)) in eps.unstack().into_iter().zip(states.iter_mut()).enumerate() {
            if !e.is_finite() {
                return Err((i, Error::Sampling { step: k, detail: "non-finite noise prediction".into() }));
            }
            let next = reverse_step(state, &e, k, schedule, &mut rngs[i]).map_err(|e| (i, e))?;
            if !next.is_finite() {
                return Err((i, Error::Sampling { step: k, detail: "non-finite state".into() }));
            }
            *state = next;
        }
    }
    Ok(states)
}

/// Draws one forecast `[H, D]` for lookback `x` (`[L, D]`) by ancestral
/// sampling from `y_K ~ N(0, I)` down to `k = 1`.
pub fn sample_trajectory<T: Real, P: NoisePredictor<T> + ?Sized>(
    x: &Tensor<T>,
    model: &P,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let mut rngs = [rng.clone()];
    let out = run_chains(x, model, schedule, &mut rngs).map_err(|(_, e)| e)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().unwrap())
}

/// Generator for the trajectory seeded by `seed`.
pub fn trajectory_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Samples one trajectory per seed in a single batch. Trajectory `i` equals
/// `sample_trajectory` with `trajectory_rng(seeds[i])`.
pub fn sample_with_seeds<T: Real, P: NoisePredictor<T> + ?Sized>(
    x: &Tensor<T>,
    model: &P,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<Tensor<T>>> {
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| trajectory_rng(s)).collect();
    run_chains(x, model, schedule, &mut rngs).map_err(|(i, e)| Error::Ensemble {
        seed: seeds.get(i).copied().unwrap_or_default(),
        source: Box::new(e),
    })
}
