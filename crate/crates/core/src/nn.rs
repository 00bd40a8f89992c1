//! Named parameters and the neural building blocks of the denoiser.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Variance epsilon for every layer norm.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Places every parameter on `tape` as a variable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.values.iter().map(|v| tape.variable(v.clone())).collect())
    }

    /// Places every parameter on `tape` as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Gradient per parameter, aligned with [`ParamStore::ids`].
    pub fn collect_grads(&self, grads: &mut Grads<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound.0.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Weight initialization rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(3 / fan_in)` (unit-variance preserving).
    FanIn,
    Zeros,
    Constant(f64),
}

pub fn init_tensor<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(c) => Tensor::full(shape, T::lit(c)),
        Init::FanIn => {
            let bound = (3.0 / fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
        }
    }
}

/// Affine layer acting on the trailing axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_tensor(&[din, dout], din, init, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?;
        Ok(Self { w, b, din, dout })
    }

    pub fn param_count(din: usize, dout: usize) -> usize {
        din * dout + dout
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        dense(tape, x, p.var(self.w), p.var(self.b))
    }
}

/// Layer norm with learnable gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[width], T::one()))?;
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[width]))?;
        Ok(Self { gain, shift })
    }

    pub fn param_count(width: usize) -> usize {
        2 * width
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        layer_norm(tape, x, p.var(self.gain), p.var(self.shift))
    }
}

/// `input · weight + bias` along the trailing axis.
pub fn dense<T: Real>(tape: &mut Tape<T>, input: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.dense(input, weight, Some(bias))
}

/// Zero-mean, unit-variance normalization of the trailing axis followed by a
/// per-feature affine map.
pub fn layer_norm<T: Real>(tape: &mut Tape<T>, input: Var, gain: Var, shift: Var) -> Result<Var> {
    let n = tape.layer_norm(input, T::lit(LN_EPS))?;
    tape.affine_last(n, gain, shift)
}

/// `normed * (1 + scale) + shift` with `scale`/`shift` of shape `[B, e]`
/// broadcast over the token axis of `normed` (`[B, T, e]`).
pub fn modulate<T: Real>(tape: &mut Tape<T>, normed: Var, shift: Var, scale: Var) -> Result<Var> {
    let reps = tape.shape(normed)[1];
    let scale = tape.expand_mid(scale, reps)?;
    let scale = tape.add_scalar(scale, T::one());
    let shift = tape.expand_mid(shift, reps)?;
    let m = tape.mul(normed, scale)?;
    tape.add(m, shift)
}

/// `residual + gate * branch` with `gate` of shape `[B, e]`.
pub fn gated_residual<T: Real>(tape: &mut Tape<T>, residual: Var, branch: Var, gate: Var) -> Result<Var> {
    let reps = tape.shape(branch)[1];
    let gate = tape.expand_mid(gate, reps)?;
    let g = tape.mul(branch, gate)?;
    tape.add(residual, g)
}

/// Splits `[B, n*e]` into `n` chunks of `[B, e]`.
pub fn chunk<T: Real>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Vec<Var>> {
    let w = tape.shape(x)[1];
    if n == 0 || w % n != 0 {
        return Err(Error::Dimension(format!("cannot split width {w} into {n} chunks")));
    }
    let e = w / n;
    (0..n).map(|i| tape.slice(x, 1, i * e, (i + 1) * e)).collect()
}

fn check_cond<T: Real>(tape: &Tape<T>, input: Var, cond: Var) -> Result<()> {
    let xs = tape.shape(input);
    let cs = tape.shape(cond);
    if xs.len() != 3 {
        return Err(Error::Dimension(format!(
            "adaptive layer norm expects [B, T, e] tokens, got {xs:?}"
        )));
    }
    if cs.len() != 2 || cs[1] == 0 || cs[0] != xs[0] {
        return Err(Error::Contract(format!(
            "adaptive layer norm needs one conditioning embedding per batch element \
             (tokens {xs:?}, conditioning {cs:?})"
        )));
    }
    Ok(())
}

/// Layer norm whose shift and scale come from a linear map of `cond_embed`.
///
/// `input` is `[B, T, e]`, `cond_embed` is `[B, c]`, `mod_weight` is
/// `[c, 2e]` (shift then scale), `mod_bias` is `[2e]`.
pub fn ada_layer_norm<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    cond_embed: Var,
    mod_weight: Var,
    mod_bias: Var,
) -> Result<Var> {
    check_cond(tape, input, cond_embed)?;
    let m = tape.dense(cond_embed, mod_weight, Some(mod_bias))?;
    let parts = chunk(tape, m, 2)?;
    let normed = tape.layer_norm(input, T::lit(LN_EPS))?;
    modulate(tape, normed, parts[0], parts[1])
}

/// Adaptive layer norm with learnable modulation head.
#[derive(Debug, Clone, Copy)]
pub struct AdaNorm {
    pub modulation: Linear,
}

impl AdaNorm {
    /// The modulation head starts at zero, so the layer begins as a plain
    /// unit-gain, zero-shift layer norm.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cond_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let modulation = Linear::new(store, &format!("{name}.modulation"), cond_dim, 2 * width, Init::Zeros, rng)?;
        Ok(Self { modulation })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, cond: Var) -> Result<Var> {
        ada_layer_norm(tape, x, cond, p.var(self.modulation.w), p.var(self.modulation.b))
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, Init::FanIn, rng)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, Init::FanIn, rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, Init::FanIn, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, Init::FanIn, rng)?,
            heads,
        })
    }

    pub fn param_count(width: usize) -> usize {
        4 * Linear::param_count(width, width)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var) -> Result<Var> {
        multi_head_self_attention(tape, p, tokens, self)
    }
}

/// Scaled dot-product self-attention over the token axis of `[B, T, e]`,
/// split into `attn.heads` heads and recombined by the output projection.
pub fn multi_head_self_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    tokens: Var,
    attn: &Attention,
) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("attention expects [B, T, e], got {s:?}")));
    }
    let (b, t, e) = (s[0], s[1], s[2]);
    let h = attn.heads;
    if h == 0 || e % h != 0 {
        return Err(Error::Config(format!("width {e} is not divisible by {h} heads")));
    }
    let dh = e / h;
    let split = |tape: &mut Tape<T>, lin: &Linear| -> Result<Var> {
        let y = lin.forward(tape, p, tokens)?;
        let y = tape.reshape(y, &[b, t, h, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[b * h, t, dh])
    };
    let q = split(tape, &attn.q)?;
    let k = split(tape, &attn.k)?;
    let v = split(tape, &attn.v)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt());
    let probs = tape.softmax_last(scores);
    let ctx = tape.bmm(probs, v, false)?;
    let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, e])?;
    attn.o.forward(tape, p, ctx)
}

/// Interleaved sin/cos features of step `k` at geometrically spaced
/// frequencies `10000^(-2i/dim)`: entry `2i` is `sin(k·ω_i)`, `2i+1` is
/// `cos(k·ω_i)`.
pub fn sinusoidal_step_embedding<T: Real>(k: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("step embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let angle = k as f64 * freq;
        out.push(T::lit(angle.sin()));
        out.push(T::lit(angle.cos()));
    }
    Tensor::new(vec![dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let w = tape.constant(Tensor::zeros(&[5, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = dense(&mut tape, x, w, b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "{err}");
    }

    #[test]
    fn dense_gradcheck_3x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 5]), rand_t(&mut rng, &[5])];
        let rep = check_gradients(&inputs, 1e-6, |tape, v| {
            let y = dense(tape, v[0], v[1], v[2])?;
            Ok(tape.sum_all(y))
        })
        .unwrap();
        assert!(rep.max_rel_err() < 1e-5, "{rep:?}");
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::full(&[3], 1.0));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(Tensor::full(&[3], 4.2));
        let y = layer_norm(&mut tape, c, one, zero).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let g2 = tape.constant(Tensor::full(&[2], 1.0));
        let s2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let y = layer_norm(&mut tape, x, g2, s2).unwrap();
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] + expect).abs() < 1e-12);

        let zero_gain = tape.constant(Tensor::zeros(&[2]));
        let shift = tape.constant(Tensor::full(&[2], 0.7));
        let y = layer_norm(&mut tape, x, zero_gain, shift).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.7]);

        let empty = tape.constant(Tensor::zeros(&[2, 0]));
        let e0 = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(layer_norm(&mut tape, empty, e0, e0), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![rand_t(&mut rng, &[3, 6]), rand_t(&mut rng, &[6]), rand_t(&mut rng, &[6])];
        let w = rand_t(&mut rng, &[3, 6]);
        let rep = check_gradients(&inputs, 1e-6, |tape, v| {
            let y = layer_norm(tape, v[0], v[1], v[2])?;
            let w = tape.constant(w.clone());
            let y = tape.mul(y, w)?;
            Ok(tape.sum_all(y))
        })
        .unwrap();
        assert!(rep.max_rel_err() < 1e-5, "{rep:?}");
    }

    #[test]
    fn ada_layer_norm_zero_init_is_plain_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[2, 3, 4]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let cond = tape.constant(rand_t(&mut rng, &[2, 5]));
        let w = tape.constant(Tensor::zeros(&[5, 8]));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = ada_layer_norm(&mut tape, xv, cond, w, b).unwrap();
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let s = tape.constant(Tensor::zeros(&[4]));
        let plain = layer_norm(&mut tape, xv, g, s).unwrap();
        assert_eq!(tape.value(y), tape.value(plain));
    }

    #[test]
    fn ada_layer_norm_requires_conditioning() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let w = tape.constant(Tensor::zeros(&[5, 8]));
        let b = tape.constant(Tensor::zeros(&[8]));
        let wrong_batch = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(
            ada_layer_norm(&mut tape, x, wrong_batch, w, b),
            Err(Error::Contract(_))
        ));
        let empty = tape.constant(Tensor::zeros(&[2, 0]));
        let w0 = tape.constant(Tensor::zeros(&[0, 8]));
        assert!(matches!(ada_layer_norm(&mut tape, x, empty, w0, b), Err(Error::Contract(_))));
    }

    #[test]
    fn ada_layer_norm_gradcheck_and_injectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![
            rand_t(&mut rng, &[2, 3, 4]),
            rand_t(&mut rng, &[2, 5]),
            rand_t(&mut rng, &[5, 8]),
            rand_t(&mut rng, &[8]),
        ];
        let wout = rand_t(&mut rng, &[2, 3, 4]);
        let rep = check_gradients(&inputs, 1e-6, |tape, v| {
            let y = ada_layer_norm(tape, v[0], v[1], v[2], v[3])?;
            let w = tape.constant(wout.clone());
            let y = tape.mul(y, w)?;
            Ok(tape.sum_all(y))
        })
        .unwrap();
        assert!(rep.max_rel_err() < 1e-5, "{rep:?}");

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.3 - 1.0));
        let w = tape.constant(inputs[2].clone());
        let b = tape.constant(inputs[3].clone());
        let e1 = tape.constant(sinusoidal_step_embedding::<f64>(3, 4).unwrap().reshape(&[1, 4]).unwrap());
        let e2 = tape.constant(sinusoidal_step_embedding::<f64>(7, 4).unwrap().reshape(&[1, 4]).unwrap());
        let w4 = tape.slice(w, 0, 0, 4).unwrap();
        let y1 = ada_layer_norm(&mut tape, x, e1, w4, b).unwrap();
        let y2 = ada_layer_norm(&mut tape, x, e2, w4, b).unwrap();
        assert!(tape.value(y1).max_abs_diff(tape.value(y2)) > 1e-6);
    }

    fn attention_fixture(seed: u64, e: usize, heads: usize) -> (ParamStore<f64>, Attention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "attn", e, heads, &mut rng).unwrap();
        for v in store.values_mut() {
            for x in v.data_mut() {
                *x = rng.random_range(-0.8..0.8);
            }
        }
        (store, attn)
    }

    #[test]
    fn attention_single_token_is_value_then_output_projection() {
        let (store, attn) = attention_fixture(11, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(rand_t(&mut rng, &[1, 1, 4]));
        let y = attn.forward(&mut tape, &p, x).unwrap();
        let v = attn.v.forward(&mut tape, &p, x).unwrap();
        let o = attn.o.forward(&mut tape, &p, v).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(o)) < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (store, attn) = attention_fixture(13, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_t(&mut rng, &[1, 5, 6]);
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Tensor::from_fn(&[1, 5, 6], |i| x.at(&[0, perm[i / 6], i % 6]));
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let a = tape.constant(x);
        let b = tape.constant(xp);
        let ya = attn.forward(&mut tape, &p, a).unwrap();
        let yb = attn.forward(&mut tape, &p, b).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..6 {
                let d = tape.value(yb).at(&[0, i, j]) - tape.value(ya).at(&[0, src, j]);
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradcheck_all_projections() {
        let (store, _) = attention_fixture(15, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_t(&mut rng, &[2, 3, 4]);
        let wout = rand_t(&mut rng, &[2, 3, 4]);
        let mut inputs: Vec<Tensor<f64>> = store.values().to_vec();
        inputs.push(x);
        let rep = check_gradients(&inputs, 1e-6, |tape, v| {
            let attn = Attention {
                q: Linear { w: ParamId(0), b: ParamId(1), din: 4, dout: 4 },
                k: Linear { w: ParamId(2), b: ParamId(3), din: 4, dout: 4 },
                v: Linear { w: ParamId(4), b: ParamId(5), din: 4, dout: 4 },
                o: Linear { w: ParamId(6), b: ParamId(7), din: 4, dout: 4 },
                heads: 2,
            };
            let p = Bound(v[..8].to_vec());
            let y = attn.forward(tape, &p, v[8])?;
            let w = tape.constant(wout.clone());
            let y = tape.mul(y, w)?;
            Ok(tape.sum_all(y))
        })
        .unwrap();
        // The key bias shifts every score of a query by the same amount, so
        // softmax cancels it and its gradient is exactly zero.
        assert!(rep.grad_norms[3] < 1e-8, "{rep:?}");
        assert!(rep.failures(1e-5).is_empty(), "{rep:?}");
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            Attention::new(&mut store, "a", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn step_embedding_properties() {
        let a = sinusoidal_step_embedding::<f64>(17, 16).unwrap();
        let b = sinusoidal_step_embedding::<f64>(17, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let zero = sinusoidal_step_embedding::<f64>(0, 6).unwrap();
        assert_eq!(zero.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(sinusoidal_step_embedding::<f64>(1, 5), Err(Error::Config(_))));
    }
}
