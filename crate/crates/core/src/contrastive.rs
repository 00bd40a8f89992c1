//! Negative augmentation, denoising density ratios and the contrastive
//! objective that is added to the plain noise-regression loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{logsumexp, Tape, Var};
use crate::denoiser::TapeModel;
use crate::diffusion::{standard_normal, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Weight of the contrastive term; 0 trains the plain diffusion model.
    pub lambda: f64,
    /// Negatives built by each augmentation, so `2 *` this per positive.
    pub negatives_per_type: usize,
    /// Temperature dividing the squared denoising error.
    pub tau: f64,
    pub patch_count: usize,
    /// Use one patch permutation for all channels instead of one each.
    pub shuffle_shared_across_channels: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            negatives_per_type: 64,
            tau: 0.1,
            patch_count: 4,
            shuffle_shared_across_channels: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("contrastive.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("contrastive.tau must be > 0, got {}", self.tau)));
        }
        if self.negatives_per_type > 0 {
            if self.patch_count < 2 {
                return Err(Error::Config(format!(
                    "contrastive.patch_count must be at least 2, got {}",
                    self.patch_count
                )));
            }
            if horizon < self.patch_count {
                return Err(Error::Config(format!(
                    "horizon {horizon} is shorter than contrastive.patch_count {}",
                    self.patch_count
                )));
            }
        }
        Ok(())
    }

    pub fn n_negatives(&self) -> usize {
        2 * self.negatives_per_type
    }

    /// Whether a training step needs negatives and a second forward pass.
    pub fn active(&self) -> bool {
        self.lambda > 0.0 && self.negatives_per_type > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Shuffle,
    Scale,
}

/// Negatives derived from one positive `[H, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet<T> {
    pub negatives: Vec<Tensor<T>>,
    pub kinds: Vec<NegativeKind>,
}

impl<T> NegativeSet<T> {
    pub fn empty() -> Self {
        Self {
            negatives: Vec::new(),
            kinds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negatives.is_empty()
    }
}

/// Row ranges of `patch_count` contiguous patches over `h` rows; the last
/// patch absorbs the remainder.
pub fn patch_bounds(h: usize, patch_count: usize) -> Result<Vec<(usize, usize)>> {
    if patch_count < 2 || h < patch_count {
        return Err(Error::Config(format!(
            "cannot split {h} rows into {patch_count} patches (need 2 <= patches <= rows)"
        )));
    }
    let size = h / patch_count;
    Ok((0..patch_count)
        .map(|i| {
            let end = if i + 1 == patch_count { h } else { (i + 1) * size };
            (i * size, end)
        })
        .collect())
}

/// Uniform non-identity permutation of `n >= 2` patches.
pub fn draw_patch_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn check_series<T: Real>(y0: &Tensor<T>) -> Result<(usize, usize)> {
    if y0.ndim() != 2 {
        return Err(Error::Dimension(format!("series must be [H, D], got {:?}", y0.shape())));
    }
    Ok((y0.shape()[0], y0.shape()[1]))
}

/// Reorders patches of every channel: output patch `i` is input patch
/// `perms[d][i]` for channel `d`.
pub fn shuffle_patches_per_channel<T: Real>(y0: &Tensor<T>, patch_count: usize, perms: &[Vec<usize>]) -> Result<Tensor<T>> {
    let (h, d) = check_series(y0)?;
    let bounds = patch_bounds(h, patch_count)?;
    if perms.len() != d || perms.iter().any(|p| p.len() != patch_count) {
        return Err(Error::Contract(format!(
            "need {d} permutations of {patch_count} patches"
        )));
    }
    let mut out = Tensor::zeros(&[h, d]);
    for (c, perm) in perms.iter().enumerate() {
        let mut row = 0;
        for &src in perm {
            let (s, e) = bounds[src];
            for t in s..e {
                out.set(&[row, c], y0.at(&[t, c]));
                row += 1;
            }
        }
    }
    Ok(out)
}

/// Reorders patches with one permutation shared by all channels.
pub fn shuffle_patches<T: Real>(y0: &Tensor<T>, patch_count: usize, perm: &[usize]) -> Result<Tensor<T>> {
    let (_, d) = check_series(y0)?;
    shuffle_patches_per_channel(y0, patch_count, &vec![perm.to_vec(); d])
}

/// Splits the time axis into patches and applies a random non-identity
/// permutation, shared across channels or drawn per channel.
pub fn augment_patch_shuffle<T: Real, R: Rng + ?Sized>(
    y0: &Tensor<T>,
    patch_count: usize,
    shared: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (h, d) = check_series(y0)?;
    patch_bounds(h, patch_count)?;
    if shared {
        let perm = draw_patch_permutation(patch_count, rng);
        shuffle_patches(y0, patch_count, &perm)
    } else {
        let perms: Vec<Vec<usize>> = (0..d).map(|_| draw_patch_permutation(patch_count, rng)).collect();
        shuffle_patches_per_channel(y0, patch_count, &perms)
    }
}

/// Uniform draw from `[0, 0.5] ∪ [1.5, 2.0]`; each band has probability ½.
pub fn draw_scale_factor<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        rng.random_range(0.0..=0.5)
    } else {
        rng.random_range(1.5..=2.0)
    }
}

/// Multiplies column `d` by `factors[d]`.
pub fn scale_channels<T: Real>(y0: &Tensor<T>, factors: &[f64]) -> Result<Tensor<T>> {
    let (_, d) = check_series(y0)?;
    if factors.len() != d {
        return Err(Error::Dimension(format!("{} scale factors for {d} channels", factors.len())));
    }
    Ok(Tensor::from_fn(y0.shape(), |i| y0.data()[i] * T::lit(factors[i % d])))
}

/// Scales each channel by an independently drawn factor.
pub fn augment_magnitude_scale<T: Real, R: Rng + ?Sized>(y0: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let (_, d) = check_series(y0)?;
    let factors: Vec<f64> = (0..d).map(|_| draw_scale_factor(rng)).collect();
    scale_channels(y0, &factors)
}

/// `negatives_per_type` shuffled negatives followed by as many scaled ones.
pub fn build_negatives<T: Real, R: Rng + ?Sized>(y0: &Tensor<T>, cfg: &ContrastiveConfig, rng: &mut R) -> Result<NegativeSet<T>> {
    let n = cfg.negatives_per_type;
    let mut set = NegativeSet {
        negatives: Vec::with_capacity(2 * n),
        kinds: Vec::with_capacity(2 * n),
    };
    for _ in 0..n {
        set.negatives.push(augment_patch_shuffle(y0, cfg.patch_count, cfg.shuffle_shared_across_channels, rng)?);
        set.kinds.push(NegativeKind::Shuffle);
    }
    for _ in 0..n {
        set.negatives.push(augment_magnitude_scale(y0, rng)?);
        set.kinds.push(NegativeKind::Scale);
    }
    Ok(set)
}

/// `log f = −‖ε′ − ε̂‖² / τ`.
pub fn log_density_ratio<T: Real>(eps_prime: &Tensor<T>, eps_pred: &Tensor<T>, tau: f64) -> Result<f64> {
    let sse = eps_prime.zip_map(eps_pred, |a, b| (a - b) * (a - b))?.data().iter().map(|v| v.as_f64()).sum::<f64>();
    Ok(-sse / tau)
}

/// `−log softmax` of the positive among the positive and the negatives.
/// Zero when there are no negatives.
pub fn contrastive_loss_from_log_ratios(log_pos: f64, log_negs: &[f64]) -> f64 {
    if log_negs.is_empty() {
        return 0.0;
    }
    let mut all = Vec::with_capacity(log_negs.len() + 1);
    all.push(log_pos);
    all.extend_from_slice(log_negs);
    (logsumexp(&all) - log_pos).max(0.0)
}

fn noise_with<T: Real>(y: &Tensor<T>, ab: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    let (c0, c1) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    y.zip_map(eps, |y, e| c0 * y + c1 * e)
}

/// Log density ratios of `candidates` (each `[H, D]`) under a shared noise
/// draw `eps_prime`, step `k` and lookback `x`, in one batched call.
fn log_ratios<T: Real, P: NoisePredictor<T> + ?Sized>(
    candidates: &[&Tensor<T>],
    x: &Tensor<T>,
    k: usize,
    eps_prime: &Tensor<T>,
    model: &P,
    schedule: &NoiseSchedule,
    tau: f64,
) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    let ab = schedule.alpha_bar_at(k);
    let noised = candidates
        .iter()
        .map(|c| noise_with(c, ab, eps_prime))
        .collect::<Result<Vec<_>>>()?;
    let n = noised.len();
    let yb = Tensor::stack(&noised)?;
    let xb = Tensor::stack(&vec![x.clone(); n])?;
    let pred = model.predict(&yb, &xb, &vec![k; n])?;
    pred.unstack().iter().map(|p| log_density_ratio(eps_prime, p, tau)).collect()
}

/// `f = exp(−‖ε′ − ε_θ(√ᾱ_k y + √(1−ᾱ_k) ε′, x, k)‖² / τ)`.
pub fn density_ratio<T: Real, P: NoisePredictor<T> + ?Sized>(
    y: &Tensor<T>,
    x: &Tensor<T>,
    k: usize,
    eps_prime: &Tensor<T>,
    model: &P,
    schedule: &NoiseSchedule,
    tau: f64,
) -> Result<f64> {
    Ok(log_ratios(&[y], x, k, eps_prime, model, schedule, tau)?[0].exp())
}

/// Contrastive loss of one positive against its negatives, all scored with
/// the same `(k, ε′, x)`.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss<T: Real, P: NoisePredictor<T> + ?Sized>(
    y0: &Tensor<T>,
    negatives: &NegativeSet<T>,
    x: &Tensor<T>,
    k: usize,
    eps_prime: &Tensor<T>,
    model: &P,
    schedule: &NoiseSchedule,
    tau: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Ok(0.0);
    }
    let mut cands = vec![y0];
    cands.extend(negatives.negatives.iter());
    let logs = log_ratios(&cands, x, k, eps_prime, model, schedule, tau)?;
    Ok(contrastive_loss_from_log_ratios(logs[0], &logs[1..]))
}

/// Random inputs of the contrastive term for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastDraws<T> {
    /// Shared noise per positive, `[B, H, D]`.
    pub eps_prime: Tensor<T>,
    pub negatives: Vec<NegativeSet<T>>,
}

/// Every random input of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws<T> {
    pub steps: Vec<usize>,
    /// Noise of the regression term, `[B, H, D]`.
    pub eps: Tensor<T>,
    /// Absent when the contrastive term is inactive.
    pub contrast: Option<ContrastDraws<T>>,
}

/// Draws the shared `ε′` of each positive, then its negatives.
pub fn draw_contrast<T: Real, R: Rng + ?Sized>(y0: &Tensor<T>, cfg: &ContrastiveConfig, rng: &mut R) -> Result<ContrastDraws<T>> {
    if y0.ndim() != 3 {
        return Err(Error::Dimension(format!("targets must be [B, H, D], got {:?}", y0.shape())));
    }
    let s = y0.shape();
    let eps_prime = standard_normal(s, rng);
    let negatives = y0
        .unstack()
        .iter()
        .map(|y| build_negatives(y, cfg, rng))
        .collect::<Result<_>>()?;
    Ok(ContrastDraws { eps_prime, negatives })
}

/// Noises each batch element at its own step.
pub fn noise_batch<T: Real>(y0: &Tensor<T>, steps: &[usize], eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if y0.shape() != eps.shape() || y0.ndim() != 3 || y0.shape()[0] != steps.len() {
        return Err(Error::Dimension(format!(
            "noising {:?} targets with {:?} noise and {} steps",
            y0.shape(),
            eps.shape(),
            steps.len()
        )));
    }
    let per = y0.len() / steps.len();
    let mut out = Vec::with_capacity(y0.len());
    for (b, &k) in steps.iter().enumerate() {
        schedule.check_step(k)?;
        let ab = schedule.alpha_bar_at(k);
        let (c0, c1) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let r = b * per..(b + 1) * per;
        out.extend(y0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&y, &e)| c0 * y + c1 * e));
    }
    Tensor::new(y0.shape().to_vec(), out)
}

/// Mean squared noise-regression error over every coordinate of the batch.
#[allow(clippy::too_many_arguments)]
pub fn denoise_loss<T: Real, M: TapeModel<T> + ?Sized>(
    tape: &mut Tape<T>,
    model: &M,
    p: &Bound,
    y0: &Tensor<T>,
    x: &Tensor<T>,
    steps: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let y_k = noise_batch(y0, steps, eps, schedule)?;
    let yv = tape.constant(y_k);
    let xv = tape.constant(x.clone());
    let pred = model.forward_tape(tape, p, yv, xv, steps)?;
    let target = tape.constant(eps.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Batch-mean contrastive loss on the tape.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_tape<T: Real, M: TapeModel<T> + ?Sized>(
    tape: &mut Tape<T>,
    model: &M,
    p: &Bound,
    y0: &Tensor<T>,
    x: &Tensor<T>,
    steps: &[usize],
    draws: &ContrastDraws<T>,
    schedule: &NoiseSchedule,
    tau: f64,
) -> Result<Var> {
    let s = y0.shape();
    let (b, h, d) = (s[0], s[1], s[2]);
    let l = x.shape()[1];
    let n = draws.negatives.first().map_or(0, NegativeSet::len);
    if draws.negatives.len() != b || draws.negatives.iter().any(|ns| ns.len() != n) {
        return Err(Error::Contract("every positive needs the same number of negatives".into()));
    }
    let m = n + 1;
    let positives = y0.unstack();
    let lookbacks = x.unstack();
    let shared = draws.eps_prime.unstack();
    let mut ys = Vec::with_capacity(b * m);
    let mut xs = Vec::with_capacity(b * m);
    let mut targets = Vec::with_capacity(b * m);
    let mut ks = Vec::with_capacity(b * m);
    for i in 0..b {
        schedule.check_step(steps[i])?;
        let ab = schedule.alpha_bar_at(steps[i]);
        for c in std::iter::once(&positives[i]).chain(&draws.negatives[i].negatives) {
            ys.push(noise_with(c, ab, &shared[i])?);
            xs.push(lookbacks[i].clone());
            targets.push(shared[i].clone());
            ks.push(steps[i]);
        }
    }
    let yv = tape.constant(Tensor::stack(&ys)?);
    let xv = tape.constant(Tensor::stack(&xs)?);
    debug_assert_eq!(tape.shape(xv), &[b * m, l, d]);
    let pred = model.forward_tape(tape, p, yv, xv, &ks)?;
    let target = tape.constant(Tensor::stack(&targets)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.reshape(sq, &[b, m, h * d])?;
    let sse = tape.sum_last(sq)?;
    let logits = tape.scale(sse, T::lit(-1.0 / tau));
    let lse = tape.logsumexp_last(logits)?;
    let pos = tape.slice(logits, 1, 0, 1)?;
    let pos = tape.reshape(pos, &[b])?;
    let per = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per))
}

/// Loss handles of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    pub denoise: Var,
    /// `None` on the fast path, where the contrastive part is exactly 0.
    pub contrast: Option<Var>,
}

/// `denoise + λ · contrast` for a batch. When the contrastive term is
/// inactive (λ = 0 or no negatives) the total is the denoising node itself,
/// and no negatives or second forward pass are evaluated.
#[allow(clippy::too_many_arguments)]
pub fn ccdm_step_loss<T: Real, M: TapeModel<T> + ?Sized>(
    tape: &mut Tape<T>,
    model: &M,
    p: &Bound,
    y0: &Tensor<T>,
    x: &Tensor<T>,
    schedule: &NoiseSchedule,
    cfg: &ContrastiveConfig,
    draws: &StepDraws<T>,
) -> Result<StepLoss> {
    let denoise = denoise_loss(tape, model, p, y0, x, &draws.steps, &draws.eps, schedule)?;
    let contrast_draws = match (&draws.contrast, cfg.active()) {
        (Some(c), true) => c,
        _ => {
            return Ok(StepLoss {
                total: denoise,
                denoise,
                contrast: None,
            })
        }
    };
    let contrast = contrastive_loss_tape(tape, model, p, y0, x, &draws.steps, contrast_draws, schedule, cfg.tau)?;
    let weighted = tape.scale(contrast, T::lit(cfg.lambda));
    let total = tape.add(denoise, weighted)?;
    Ok(StepLoss {
        total,
        denoise,
        contrast: Some(contrast),
    })
}
