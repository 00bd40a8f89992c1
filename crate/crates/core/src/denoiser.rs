//! Channel-aware conditional noise predictor.
//!
//! Each channel of the lookback and of the noised target is encoded on its
//! own by a shared residual MLP stack, giving one token per channel. The `2D`
//! tokens are mixed across channels by step-modulated transformer blocks,
//! the `D` target-side tokens are decoded back to length `H`, and the result
//! is returned as `[B, H, D]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{
    ada_layer_norm, chunk, gated_residual, modulate, sinusoidal_step_embedding, Attention, Bound, Init, Linear, Norm,
    ParamStore, LN_EPS,
};
use crate::tensor::{Real, Tensor};

/// Cross-channel mixing used inside the middle blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixer {
    /// Channel-wise multi-head self-attention followed by an MLP.
    #[default]
    Attention,
    /// The MLP branch alone: every channel token is processed independently.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub hidden: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub att_depth: usize,
    pub heads: usize,
    pub step_embed_dim: usize,
    pub mlp_ratio: usize,
    pub mixer: Mixer,
}

impl DenoiserConfig {
    /// Hidden width used for each standard horizon; 128 otherwise.
    pub fn default_hidden(horizon: usize) -> usize {
        match horizon {
            168 => 256,
            336 => 512,
            720 => 728,
            _ => 128,
        }
    }

    /// Two encoder, decoder and mixing blocks with eight heads.
    pub fn for_horizon(lookback: usize, horizon: usize, channels: usize) -> Self {
        let hidden = Self::default_hidden(horizon);
        Self {
            lookback,
            horizon,
            channels,
            hidden,
            enc_depth: 2,
            dec_depth: 2,
            att_depth: 2,
            heads: 8,
            step_embed_dim: hidden,
            mlp_ratio: 4,
            mixer: Mixer::Attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("encoder_depth", self.enc_depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden {} is not divisible by model.heads {}",
                self.hidden, self.heads
            )));
        }
        if self.step_embed_dim == 0 || self.step_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model.step_embed_dim must be even and positive, got {}",
                self.step_embed_dim
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters, matching what [`Denoiser::new`] builds.
    pub fn param_count(&self) -> usize {
        let e = self.hidden;
        let lin = Linear::param_count;
        let cidm = |din: usize, dout: usize| {
            Norm::param_count(din) + lin(din, e) + lin(e, dout) + if din == dout { 0 } else { lin(din, dout) }
        };
        let encoder = |t: usize| cidm(t, e) + (self.enc_depth - 1) * cidm(e, e);
        let mlp = lin(e, self.mlp_ratio * e) + lin(self.mlp_ratio * e, e);
        let block = match self.mixer {
            Mixer::Attention => lin(e, 6 * e) + Attention::param_count(e) + mlp,
            Mixer::Dense => lin(e, 3 * e) + mlp,
        };
        encoder(self.lookback)
            + encoder(self.horizon)
            + lin(self.step_embed_dim, e)
            + lin(e, e)
            + self.att_depth * block
            + self.dec_depth * cidm(e, e)
            + lin(e, 2 * e)
            + lin(e, self.horizon)
    }
}

/// Residual MLP block applied to the trailing axis:
/// `skip(x) + W2 · silu(W1 · norm(x))`.
#[derive(Debug, Clone)]
struct Cidm {
    norm: Norm,
    up: Linear,
    down: Linear,
    skip: Option<Linear>,
}

impl Cidm {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        inner: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), din)?,
            up: Linear::new(store, &format!("{name}.up"), din, inner, Init::FanIn, rng)?,
            down: Linear::new(store, &format!("{name}.down"), inner, dout, Init::FanIn, rng)?,
            skip: if din == dout {
                None
            } else {
                Some(Linear::new(store, &format!("{name}.skip"), din, dout, Init::FanIn, rng)?)
            },
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let h = self.up.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.down.forward(tape, p, h)?;
        let s = match &self.skip {
            Some(l) => l.forward(tape, p, x)?,
            None => x,
        };
        tape.add(s, h)
    }
}

/// Step-modulated mixing block. With attention the modulation yields
/// (shift, scale, gate) for both branches; without it only for the MLP.
#[derive(Debug, Clone)]
struct MixBlock {
    modulation: Linear,
    attn: Option<Attention>,
    fc1: Linear,
    fc2: Linear,
}

impl MixBlock {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let e = cfg.hidden;
        let (chunks, attn) = match cfg.mixer {
            Mixer::Attention => (6, Some(Attention::new(store, &format!("{name}.attn"), e, cfg.heads, rng)?)),
            Mixer::Dense => (3, None),
        };
        Ok(Self {
            modulation: Linear::new(store, &format!("{name}.modulation"), e, chunks * e, Init::Zeros, rng)?,
            attn,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), e, cfg.mlp_ratio * e, Init::FanIn, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_ratio * e, e, Init::FanIn, rng)?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, cond: Var) -> Result<Var> {
        let m = self.modulation.forward(tape, p, cond)?;
        let mut x = tokens;
        let mlp_mod = match &self.attn {
            Some(attn) => {
                let c = chunk(tape, m, 6)?;
                let n = tape.layer_norm(x, T::lit(LN_EPS))?;
                let h = modulate(tape, n, c[0], c[1])?;
                let h = attn.forward(tape, p, h)?;
                x = gated_residual(tape, x, h, c[2])?;
                [c[3], c[4], c[5]]
            }
            None => {
                let c = chunk(tape, m, 3)?;
                [c[0], c[1], c[2]]
            }
        };
        let n = tape.layer_norm(x, T::lit(LN_EPS))?;
        let h = modulate(tape, n, mlp_mod[0], mlp_mod[1])?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.fc2.forward(tape, p, h)?;
        gated_residual(tape, x, h, mlp_mod[2])
    }
}

#[derive(Debug, Clone)]
struct Layout {
    cond_enc: Vec<Cidm>,
    latent_enc: Vec<Cidm>,
    step_in: Linear,
    step_out: Linear,
    blocks: Vec<MixBlock>,
    dec: Vec<Cidm>,
    final_mod: Linear,
    head: Linear,
}

impl Layout {
    fn build<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let e = cfg.hidden;
        let encoder = |store: &mut ParamStore<T>, prefix: &str, t: usize, rng: &mut R| -> Result<Vec<Cidm>> {
            (0..cfg.enc_depth)
                .map(|i| {
                    let din = if i == 0 { t } else { e };
                    Cidm::new(store, &format!("{prefix}.{i}"), din, e, e, rng)
                })
                .collect()
        };
        let cond_enc = encoder(store, "cond_encoder", cfg.lookback, rng)?;
        let latent_enc = encoder(store, "latent_encoder", cfg.horizon, rng)?;
        let step_in = Linear::new(store, "step_mlp.0", cfg.step_embed_dim, e, Init::FanIn, rng)?;
        let step_out = Linear::new(store, "step_mlp.1", e, e, Init::FanIn, rng)?;
        let blocks = (0..cfg.att_depth)
            .map(|i| MixBlock::new(store, &format!("mixer.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let dec = (0..cfg.dec_depth)
            .map(|i| Cidm::new(store, &format!("decoder.{i}"), e, e, e, rng))
            .collect::<Result<_>>()?;
        let final_mod = Linear::new(store, "final_norm.modulation", e, 2 * e, Init::Zeros, rng)?;
        let head = Linear::new(store, "head", e, cfg.horizon, Init::FanIn, rng)?;
        Ok(Self {
            cond_enc,
            latent_enc,
            step_in,
            step_out,
            blocks,
            dec,
            final_mod,
            head,
        })
    }
}

/// Which encoder stack a series goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Condition,
    Latent,
}

/// The noise predictor with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    layout: Layout,
    checked: bool,
}

impl<T: Real> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&mut params, &config, rng)?;
        debug_assert_eq!(params.scalar_count(), config.param_count());
        Ok(Self {
            config,
            params,
            layout,
            checked: false,
        })
    }

    /// Reattaches stored parameters; names and shapes must match exactly
    /// what `config` builds.
    pub fn from_params(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        let mut fresh = Self::new(config, &mut rand::rng())?;
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "model expects {} parameter tensors, checkpoint has {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((want, w), (got, g)) in fresh.params.iter().zip(params.iter()) {
            if want != got || w.shape() != g.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model expects {want} {:?}, checkpoint has {got} {:?}",
                    w.shape(),
                    g.shape()
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Checked mode verifies every intermediate is finite and names the
    /// first layer that is not.
    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    fn guard(&self, tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
        if self.checked && !tape.value(v).is_finite() {
            return Err(Error::NonFinite(format!("denoiser output of layer {layer}")));
        }
        Ok(())
    }

    /// Step conditioning `[B, e]` after the embedding MLP and the SiLU that
    /// precedes every modulation head.
    pub fn step_condition(&self, tape: &mut Tape<T>, p: &Bound, steps: &[usize]) -> Result<Var> {
        let sd = self.config.step_embed_dim;
        let mut data = Vec::with_capacity(steps.len() * sd);
        for &k in steps {
            data.extend_from_slice(sinusoidal_step_embedding::<T>(k, sd)?.data());
        }
        let emb = tape.constant(Tensor::new(vec![steps.len(), sd], data)?);
        let h = self.layout.step_in.forward(tape, p, emb)?;
        let h = tape.silu(h);
        let c = self.layout.step_out.forward(tape, p, h)?;
        Ok(tape.silu(c))
    }

    /// Encodes `[B, T, D]` into one token per channel, `[B, D, e]`. No
    /// information crosses channels.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, series: Var, side: Side) -> Result<Var> {
        let (stack, want, what) = match side {
            Side::Condition => (&self.layout.cond_enc, self.config.lookback, "lookback"),
            Side::Latent => (&self.layout.latent_enc, self.config.horizon, "target"),
        };
        let s = tape.shape(series);
        if s.len() != 3 || s[1] != want || s[2] != self.config.channels {
            return Err(Error::Dimension(format!(
                "{what} must be [B, {want}, {}], got {s:?}",
                self.config.channels
            )));
        }
        let mut h = tape.permute(series, &[0, 2, 1])?;
        for (i, blk) in stack.iter().enumerate() {
            h = blk.forward(tape, p, h)?;
            self.guard(tape, h, &format!("{what} encoder block {i}"))?;
        }
        Ok(h)
    }

    /// Applies mixing block `index` to `[B, 2D, e]` tokens.
    pub fn mix_block(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, cond: Var, index: usize) -> Result<Var> {
        self.layout.blocks[index].forward(tape, p, tokens, cond)
    }

    /// Full forward pass: `y_k` `[B, H, D]`, `x` `[B, L, D]`, one step per
    /// batch element; returns the noise prediction `[B, H, D]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, y_k: Var, x: Var, steps: &[usize]) -> Result<Var> {
        let b = tape.shape(y_k)[0];
        if tape.shape(x)[0] != b || steps.len() != b {
            return Err(Error::Dimension(format!(
                "batch sizes disagree: target {b}, lookback {}, steps {}",
                tape.shape(x)[0],
                steps.len()
            )));
        }
        let d = self.config.channels;
        let cond = self.step_condition(tape, p, steps)?;
        let cx = self.encode(tape, p, x, Side::Condition)?;
        let cy = self.encode(tape, p, y_k, Side::Latent)?;
        let mut tokens = tape.concat(cx, cy, 1)?;
        for i in 0..self.layout.blocks.len() {
            tokens = self.mix_block(tape, p, tokens, cond, i)?;
            self.guard(tape, tokens, &format!("mixing block {i}"))?;
        }
        let mut h = tape.slice(tokens, 1, d, 2 * d)?;
        for (i, blk) in self.layout.dec.iter().enumerate() {
            h = blk.forward(tape, p, h)?;
            self.guard(tape, h, &format!("decoder block {i}"))?;
        }
        let fm = &self.layout.final_mod;
        h = ada_layer_norm(tape, h, cond, p.var(fm.w), p.var(fm.b))?;
        let out = self.layout.head.forward(tape, p, h)?;
        self.guard(tape, out, "head")?;
        tape.permute(out, &[0, 2, 1])
    }
}

/// A noise predictor that records its forward pass on a tape.
pub trait TapeModel<T: Real> {
    /// `y_k` `[B, H, D]`, `x` `[B, L, D]`, one step per batch element.
    fn forward_tape(&self, tape: &mut Tape<T>, p: &Bound, y_k: Var, x: Var, steps: &[usize]) -> Result<Var>;
}

impl<T: Real> TapeModel<T> for Denoiser<T> {
    fn forward_tape(&self, tape: &mut Tape<T>, p: &Bound, y_k: Var, x: Var, steps: &[usize]) -> Result<Var> {
        self.forward(tape, p, y_k, x, steps)
    }
}

impl<T: Real> NoisePredictor<T> for Denoiser<T> {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn predict(&self, y_k: &Tensor<T>, x: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let y = tape.constant(y_k.clone());
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, y, xv, steps)?;
        Ok(tape.value(out).clone())
    }
}

/// Single-window convenience: `y_k` `[H, D]`, `x` `[L, D]`.
pub fn denoise<T: Real>(model: &Denoiser<T>, y_k: &Tensor<T>, x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let h = y_k.shape().to_vec();
    let yb = y_k.clone().reshape(&[1, h[0], h[1]])?;
    let xb = x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?;
    model.predict(&yb, &xb, &[k])?.reshape(&h)
}
