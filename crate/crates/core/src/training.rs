//! The training loop: per-sample step draws, the combined loss, Adam
//! updates, validation with a fixed noise set, checkpoints and a JSONL log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{param_hash, Checkpoint};
use crate::contrastive::{ccdm_step_loss, draw_contrast, ContrastiveConfig, StepDraws};
use crate::data::{batch, TimeWindow};
use crate::denoiser::Denoiser;
use crate::diffusion::{standard_normal, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One stage with the configured contrastive weight.
    EndToEnd,
    /// Plain diffusion pretraining, then contrastive fine-tuning.
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Epochs of an end-to-end run.
    pub epochs: usize,
    /// Epochs of the λ = 0 stage of a two-stage run.
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Save `epoch_XXXX.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
    pub cosine_decay: bool,
    /// Stop a stage after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub validate_every: usize,
    /// Validation windows used for the weighted bound proxy (all `K` steps
    /// are evaluated for each).
    pub proxy_windows: usize,
    /// A loss above this (or non-finite) aborts the run.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::EndToEnd,
            epochs: 200,
            pretrain_epochs: 200,
            finetune_epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            checkpoint_every: 10,
            clip_norm: Some(1.0),
            cosine_decay: false,
            max_steps: None,
            validate_every: 1,
            proxy_windows: 16,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("train.validate_every must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Purpose of each random stream derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Steps = 3,
    Noise = 4,
    Contrast = 5,
    Validation = 6,
}

/// Generator for `purpose` in training stage `stage`.
pub fn stream(seed: u64, stage: u64, purpose: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stage * 16 + purpose as u64);
    r
}

/// Independent generators of one training stage. Validation draws never
/// touch the training streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub shuffle: ChaCha8Rng,
    pub steps: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub contrast: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64, stage: u64) -> Self {
        Self {
            shuffle: stream(seed, stage, Stream::Shuffle),
            steps: stream(seed, stage, Stream::Steps),
            noise: stream(seed, stage, Stream::Noise),
            contrast: stream(seed, stage, Stream::Contrast),
        }
    }
}

/// Fixed noise used for validation so checkpoints are comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationNoise<T> {
    /// One step and one draw per validation window.
    pub steps: Vec<usize>,
    pub eps: Vec<Tensor<T>>,
    /// For the first `proxy_windows` windows, one draw per step `1..=K`.
    pub proxy_eps: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> ValidationNoise<T> {
    pub fn draw<R: Rng + ?Sized>(windows: &[TimeWindow<T>], k: usize, proxy_windows: usize, rng: &mut R) -> Self {
        let mut steps = Vec::with_capacity(windows.len());
        let mut eps = Vec::with_capacity(windows.len());
        for w in windows {
            steps.push(rng.random_range(1..=k));
            eps.push(standard_normal(w.y.shape(), rng));
        }
        let proxy_eps = windows
            .iter()
            .take(proxy_windows)
            .map(|w| (0..k).map(|_| standard_normal(w.y.shape(), rng)).collect())
            .collect();
        Self { steps, eps, proxy_eps }
    }

    /// All-zero noise over the first `proxy_windows` windows.
    pub fn zeros(windows: &[TimeWindow<T>], k: usize, proxy_windows: usize) -> Self {
        Self {
            steps: vec![1; windows.len()],
            eps: windows.iter().map(|w| Tensor::zeros(w.y.shape())).collect(),
            proxy_eps: windows
                .iter()
                .take(proxy_windows)
                .map(|w| vec![Tensor::zeros(w.y.shape()); k])
                .collect(),
        }
    }
}

/// Weighted noise-regression error across diffusion steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundProxy {
    /// Mean squared coordinate error per step `1..=K`, averaged over windows.
    pub per_step: Vec<f64>,
    /// `Σ_k A_k · per_step[k]`.
    pub total: f64,
}

/// `Σ_k weights[k] · errors[k]`.
pub fn weighted_bound(errors: &[f64], weights: &[f64]) -> f64 {
    errors.iter().zip(weights).map(|(e, a)| e * a).sum()
}

fn noised<T: Real>(y0: &Tensor<T>, k: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = schedule.alpha_bar_at(k);
    let (c0, c1) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    y0.zip_map(eps, |y, e| c0 * y + c1 * e)
}

fn sq_err<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// A_k-weighted error of `model` on the proxy windows of `noise`.
pub fn bound_proxy<T: Real, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    windows: &[TimeWindow<T>],
    schedule: &NoiseSchedule,
    noise: &ValidationNoise<T>,
) -> Result<BoundProxy> {
    let m = noise.proxy_eps.len();
    if m == 0 {
        return Err(Error::Contract("bound proxy needs at least one window".into()));
    }
    let xs: Vec<Tensor<T>> = windows[..m].iter().map(|w| w.x.clone()).collect();
    let xb = Tensor::stack(&xs)?;
    let mut per_step = Vec::with_capacity(schedule.steps());
    for k in 1..=schedule.steps() {
        let eps: Vec<Tensor<T>> = noise.proxy_eps.iter().map(|e| e[k - 1].clone()).collect();
        let ys = windows[..m]
            .iter()
            .zip(&eps)
            .map(|(w, e)| noised(&w.y, k, e, schedule))
            .collect::<Result<Vec<_>>>()?;
        let pred = model.predict(&Tensor::stack(&ys)?, &xb, &vec![k; m])?;
        let err = pred.unstack().iter().zip(&eps).map(|(p, e)| sq_err(p, e)).sum::<f64>() / m as f64;
        per_step.push(err);
    }
    let weights: Vec<f64> = (1..=schedule.steps()).map(|k| schedule.weight_at(k)).collect();
    let total = weighted_bound(&per_step, &weights);
    Ok(BoundProxy { per_step, total })
}

/// Mean denoising loss over validation windows at their fixed `(k, ε)`.
pub fn validation_loss<T: Real, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    windows: &[TimeWindow<T>],
    schedule: &NoiseSchedule,
    noise: &ValidationNoise<T>,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..windows.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(windows.len());
        let idx: Vec<usize> = (start..end).collect();
        let (x, _) = batch(windows, &idx)?;
        let ys = idx
            .iter()
            .map(|&i| noised(&windows[i].y, noise.steps[i], &noise.eps[i], schedule))
            .collect::<Result<Vec<_>>>()?;
        let pred = model.predict(&Tensor::stack(&ys)?, &x, &noise.steps[start..end])?;
        for (p, &i) in pred.unstack().iter().zip(&idx) {
            total += sq_err(p, &noise.eps[i]);
        }
    }
    Ok(total / windows.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub denoise_loss: f64,
    pub contrast_loss: f64,
    pub total: f64,
    pub val_denoise: Option<f64>,
    pub bound_proxy: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Where a run writes checkpoints and its log.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub checkpoints: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    /// `checkpoints/` and `logs/train.jsonl` under `root`.
    pub fn under(root: &Path) -> Result<Self> {
        let checkpoints = root.join("checkpoints");
        let logs = root.join("logs");
        for d in [&checkpoints, &logs] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self {
            checkpoints,
            log: logs.join("train.jsonl"),
        })
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Denoiser<T>,
    pub optimizer: AdamState<T>,
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    /// Number of diffusion steps drawn, one per sample per optimizer step.
    pub k_draws: usize,
    pub best_val: Option<f64>,
    /// Parameter hashes at the pretrain/finetune handoff (two-stage only):
    /// the saved pretrain checkpoint and the model finetuning starts from.
    pub handoff: Option<(String, String)>,
}

struct Stage<'a> {
    name: &'a str,
    index: u64,
    epochs: usize,
    contrast: ContrastiveConfig,
}

struct Run<'a, T> {
    train: &'a [TimeWindow<T>],
    val: &'a [TimeWindow<T>],
    schedule: &'a NoiseSchedule,
    cfg: &'a TrainConfig,
    seed: u64,
    paths: Option<&'a RunPaths>,
    metadata: &'a BTreeMap<String, String>,
    records: Vec<EpochRecord>,
    k_draws: usize,
    steps: usize,
    best_val: Option<f64>,
}

impl<T: Real> Run<'_, T> {
    fn checkpoint(&self, model: &Denoiser<T>, opt: &AdamState<T>, stage: &str, epoch: usize) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(model.params().clone());
        ck.optimizer = Some(opt.clone());
        ck.metadata = self.metadata.clone();
        ck.metadata.insert("stage".into(), stage.into());
        ck.metadata.insert("epoch".into(), epoch.to_string());
        ck.metadata.insert("step".into(), self.steps.to_string());
        ck
    }

    fn save(&self, ck: &Checkpoint<T>, name: &str) -> Result<()> {
        if let Some(p) = self.paths {
            ck.save(&p.checkpoints.join(name))?;
        }
        Ok(())
    }

    fn log(&self, rec: &EpochRecord) -> Result<()> {
        if let Some(p) = self.paths {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p.log)
                .map_err(|e| Error::io(&p.log, e))?;
            let line = serde_json::to_string(rec).map_err(|e| Error::io(&p.log, std::io::Error::other(e)))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&p.log, e))?;
        }
        Ok(())
    }

    fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        if self.cfg.cosine_decay && total > 0 {
            let r = (step as f64 / total as f64).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * r).cos())
        } else {
            base
        }
    }

    fn run_stage(&mut self, model: &mut Denoiser<T>, opt: &mut AdamState<T>, stage: &Stage) -> Result<()> {
        let mut rngs = Streams::new(self.seed, stage.index);
        let mut vrng = stream(self.seed, stage.index, Stream::Validation);
        let k_max = self.schedule.steps();
        let noise = (!self.val.is_empty()).then(|| ValidationNoise::draw(self.val, k_max, self.cfg.proxy_windows, &mut vrng));
        let n = self.train.len();
        if n == 0 {
            return Err(Error::Config("no training windows".into()));
        }
        let bs = self.cfg.batch_size.min(n);
        let per_epoch = n.div_ceil(bs);
        let planned = {
            let full = stage.epochs * per_epoch;
            self.cfg.max_steps.map_or(full, |m| m.min(full))
        };
        let base_lr = self.cfg.learning_rate;
        let mut stage_steps = 0;
        let mut order: Vec<usize> = (0..n).collect();
        let t0 = Instant::now();
        for epoch in 1..=stage.epochs {
            if self.cfg.max_steps.is_some_and(|m| stage_steps >= m) {
                break;
            }
            order.shuffle(&mut rngs.shuffle);
            let (mut sum_d, mut sum_c, mut sum_t, mut count) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(bs) {
                if self.cfg.max_steps.is_some_and(|m| stage_steps >= m) {
                    break;
                }
                let (x, y) = batch(self.train, chunk)?;
                let steps: Vec<usize> = chunk.iter().map(|_| rngs.steps.random_range(1..=k_max)).collect();
                self.k_draws += steps.len();
                let eps = standard_normal(y.shape(), &mut rngs.noise);
                let contrast = if stage.contrast.active() {
                    Some(draw_contrast(&y, &stage.contrast, &mut rngs.contrast)?)
                } else {
                    None
                };
                let draws = StepDraws { steps, eps, contrast };
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape);
                let loss = ccdm_step_loss(&mut tape, model, &p, &y, &x, self.schedule, &stage.contrast, &draws)?;
                let total = tape.value(loss.total).data()[0].as_f64();
                let denoise = tape.value(loss.denoise).data()[0].as_f64();
                let contrast = loss.contrast.map_or(0.0, |c| tape.value(c).data()[0].as_f64());
                if !total.is_finite() || total > self.cfg.divergence_threshold {
                    self.save(&self.checkpoint(model, opt, stage.name, epoch), "last.ckpt")?;
                    return Err(Error::Training(format!(
                        "{} diverged at optimizer step {} (loss {total}, diffusion steps {:?}); \
                         last good parameters kept in last.ckpt",
                        stage.name,
                        self.steps + 1,
                        draws.steps
                    )));
                }
                let mut grads = tape.backward(loss.total)?;
                let mut g = model.params().collect_grads(&mut grads, &p);
                if let Some(c) = self.cfg.clip_norm {
                    clip_global_norm(&mut g, c);
                }
                opt.lr = self.lr(base_lr, stage_steps, planned);
                if let Err(e) = adam_step(model.params_mut(), &g, opt) {
                    self.save(&self.checkpoint(model, opt, stage.name, epoch), "last.ckpt")?;
                    return Err(e);
                }
                self.steps += 1;
                stage_steps += 1;
                sum_d += denoise;
                sum_c += contrast;
                sum_t += total;
                count += 1;
            }
            if count == 0 {
                break;
            }
            let last_epoch = epoch == stage.epochs || self.cfg.max_steps.is_some_and(|m| stage_steps >= m);
            let (val_denoise, proxy) = match &noise {
                Some(nz) if epoch % self.cfg.validate_every == 0 || last_epoch => {
                    let v = validation_loss(model, self.val, self.schedule, nz, bs)?;
                    let b = if nz.proxy_eps.is_empty() {
                        None
                    } else {
                        Some(bound_proxy(model, self.val, self.schedule, nz)?.total)
                    };
                    (Some(v), b)
                }
                _ => (None, None),
            };
            let c = count as f64;
            let rec = EpochRecord {
                stage: stage.name.into(),
                epoch,
                step: self.steps,
                denoise_loss: sum_d / c,
                contrast_loss: sum_c / c,
                total: sum_t / c,
                val_denoise,
                bound_proxy: proxy,
                lr: opt.lr,
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            log::info!(
                "{} epoch {epoch}: denoise {:.5} contrast {:.5} val {:?}",
                stage.name,
                rec.denoise_loss,
                rec.contrast_loss,
                rec.val_denoise
            );
            self.log(&rec)?;
            let ck = self.checkpoint(model, opt, stage.name, epoch);
            if self.cfg.checkpoint_every > 0 && epoch % self.cfg.checkpoint_every == 0 {
                self.save(&ck, &format!("{}_epoch_{epoch:04}.ckpt", stage.name))?;
            }
            // Select on validation loss when available, else on training loss.
            let score = val_denoise.unwrap_or(rec.denoise_loss);
            if self.best_val.is_none_or(|b| score < b) {
                self.best_val = Some(score);
                self.save(&ck, "best.ckpt")?;
            }
            self.save(&ck, "last.ckpt")?;
            self.records.push(rec);
        }
        Ok(())
    }
}

/// Trains `model` on `train`, validating on `val`. Deterministic given
/// `seed`. With `paths`, writes checkpoints and appends the log.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real>(
    mut model: Denoiser<T>,
    train: &[TimeWindow<T>],
    val: &[TimeWindow<T>],
    schedule: &NoiseSchedule,
    contrast: &ContrastiveConfig,
    cfg: &TrainConfig,
    seed: u64,
    paths: Option<&RunPaths>,
    metadata: &BTreeMap<String, String>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    contrast.validate(model.config().horizon)?;
    let mut run = Run {
        train,
        val,
        schedule,
        cfg,
        seed,
        paths,
        metadata,
        records: Vec::new(),
        k_draws: 0,
        steps: 0,
        best_val: None,
    };
    let mut opt = AdamState::new(model.params(), cfg.learning_rate);
    let mut handoff = None;
    match cfg.mode {
        TrainMode::EndToEnd => {
            let stage = Stage {
                name: "train",
                index: 0,
                epochs: cfg.epochs,
                contrast: contrast.clone(),
            };
            run.run_stage(&mut model, &mut opt, &stage)?;
        }
        TrainMode::TwoStage => {
            let pre = Stage {
                name: "pretrain",
                index: 0,
                epochs: cfg.pretrain_epochs,
                contrast: ContrastiveConfig {
                    lambda: 0.0,
                    ..contrast.clone()
                },
            };
            run.run_stage(&mut model, &mut opt, &pre)?;
            let ck = run.checkpoint(&model, &opt, "pretrain", cfg.pretrain_epochs);
            run.save(&ck, "pretrain.ckpt")?;
            let saved = ck.param_hash();
            let restored = Checkpoint::<T>::from_bytes(&ck.to_bytes())?;
            model = Denoiser::from_params(model.config().clone(), restored.params)?;
            let start = param_hash(model.params());
            if saved != start {
                return Err(Error::Training(format!(
                    "pretrain handoff changed parameters: {saved} vs {start}"
                )));
            }
            handoff = Some((saved, start));
            opt = AdamState::new(model.params(), cfg.learning_rate);
            run.best_val = None;
            let fine = Stage {
                name: "finetune",
                index: 1,
                epochs: cfg.finetune_epochs,
                contrast: contrast.clone(),
            };
            run.run_stage(&mut model, &mut opt, &fine)?;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        records: run.records,
        steps: run.steps,
        k_draws: run.k_draws,
        best_val: run.best_val,
        handoff,
    })
}
