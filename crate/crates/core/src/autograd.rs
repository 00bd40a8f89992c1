//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value and the handles of its
//! operands. [`Tape::backward`] walks the nodes in reverse, accumulating
//! gradients only into nodes that (transitively) depend on a variable leaf.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    LayerNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    AffineLast { x: Var, gain: Var, shift: Var },
    ExpandMid { x: Var, reps: usize },
    Softmax(Var),
    LogSumExp(Var),
    SumLast(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { a: Var, b: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass: one optional gradient per tape node.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or exact zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if last == 0 { 0 } else { n / last }, last)
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Affine map along the trailing axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last().copied() != Some(ws[0]) {
            return Err(shape_err("dense", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("dense bias", &ws, self.shape(b)));
            }
        }
        let (rows, _) = rows_of(&xs);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            dout as isize,
            1,
            T::one(),
            &mut out,
            dout as isize,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Dense { x, w, b }, rg))
    }

    /// Batched matrix product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with
    /// `b[B,n,k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..],
                k as isize,
                1,
                &bv[i * k * n..],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        va.zip_map(vb, f)
            .map_err(|_| shape_err(name, va.shape(), vb.shape()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    /// Normalizes each row of the trailing axis to zero mean and unit
    /// (population) variance, with `eps` added to the variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (rows, e) = rows_of(self.shape(x));
        if e == 0 {
            return Err(Error::Dimension("layer_norm over a zero-length axis".into()));
        }
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let ne = T::from_usize(e).unwrap();
        for row in xv.chunks(e) {
            let mean = row.iter().copied().sum::<T>() / ne;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ne;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let value = Tensor::new(self.shape(x).to_vec(), xhat.clone())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LayerNorm { x, xhat, inv_std }, rg))
    }

    /// `x[.., e] * gain[e] + shift[e]`.
    pub fn affine_last(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let e = self.value(x).last_dim();
        if self.shape(gain) != [e] || self.shape(shift) != [e] {
            return Err(shape_err("affine_last", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(e) {
            for ((v, &gi), &si) in row.iter_mut().zip(g).zip(s) {
                *v = *v * gi + si;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(value, Op::AffineLast { x, gain, shift }, rg))
    }

    /// Repeats `x[B, e]` along a new middle axis: `[B, reps, e]`.
    pub fn expand_mid(&mut self, x: Var, reps: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("expand_mid expects [B, e], got {s:?}")));
        }
        let (b, e) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * reps * e);
        for row in xv.chunks(e) {
            for _ in 0..reps {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![b, reps, e], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ExpandMid { x, reps }, rg))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let (_, e) = rows_of(self.shape(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(e.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out).unwrap();
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// `log Σ exp` over the trailing axis, which is dropped.
    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (_, e) = rows_of(&s);
        if s.is_empty() || e == 0 {
            return Err(Error::Dimension(format!("logsumexp over {s:?}")));
        }
        let out: Vec<T> = self.value(x).data().chunks(e).map(logsumexp).collect();
        let value = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSumExp(x), rg))
    }

    /// Sum over the trailing axis, which is dropped.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::Dimension("sum_last on a scalar".into()));
        }
        let e = s[s.len() - 1];
        let out: Vec<T> = if e == 0 {
            vec![T::zero(); s[..s.len() - 1].iter().product()]
        } else {
            self.value(x).data().chunks(e).map(|r| r.iter().copied().sum()).collect()
        };
        let value = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumLast(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len().max(1)).unwrap();
        let v = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.rg(x);
        self.push(v, Op::MeanAll(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let ca: usize = sa[axis..].iter().product();
        let cb: usize = sb[axis..].iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&vb[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b, axis }, rg))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{end} on axis {axis} of {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.shape(out), T::one()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_tensor(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> &'a mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let (rows, _) = rows_of(self.shape(*x));
                if self.rg(*x) {
                    let slot = self.grad_slot(grads, *x);
                    T::gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        gd,
                        dout as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        dout as isize,
                        T::one(),
                        slot.data_mut(),
                        din as isize,
                        1,
                    );
                }
                if self.rg(*w) {
                    let xv = self.value(*x).data();
                    let slot = self.grad_slot(grads, *w);
                    T::gemm(
                        din,
                        rows,
                        dout,
                        T::one(),
                        xv,
                        1,
                        din as isize,
                        gd,
                        dout as isize,
                        1,
                        T::one(),
                        slot.data_mut(),
                        dout as isize,
                        1,
                    );
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in gd.chunks(dout) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![dout], db).unwrap());
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let s = self.shape(*a);
                let (batch, m, k) = (s[0], s[1], s[2]);
                let n = node.value.shape()[2];
                let (rsb, csb) = if *trans_b { (1, k as isize) } else { (n as isize, 1) };
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let slot = self.grad_slot(grads, *a);
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[i * m * n..],
                            n as isize,
                            1,
                            &bv[i * k * n..],
                            csb,
                            rsb,
                            T::one(),
                            &mut slot.data_mut()[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let slot = self.grad_slot(grads, *b);
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[i * m * k..],
                            1,
                            k as isize,
                            &gd[i * m * n..],
                            n as isize,
                            1,
                            T::one(),
                            &mut slot.data_mut()[i * k * n..(i + 1) * k * n],
                            rsb,
                            csb,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let ga = g
                    .zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let e = node.value.last_dim();
                let ne = T::from_usize(e).unwrap();
                let mut dx = Vec::with_capacity(gd.len());
                for ((grow, hrow), &inv) in gd.chunks(e).zip(xhat.chunks(e)).zip(inv_std) {
                    let mg = grow.iter().copied().sum::<T>() / ne;
                    let mgh = grow.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / ne;
                    dx.extend(grow.iter().zip(hrow).map(|(&gv, &h)| inv * (gv - mg - h * mgh)));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::AffineLast { x, gain, shift } => {
                let e = node.value.last_dim();
                let gainv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = gd.to_vec();
                    for row in dx.chunks_mut(e) {
                        for (v, &gi) in row.iter_mut().zip(gainv) {
                            *v *= gi;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
                if self.rg(*gain) || self.rg(*shift) {
                    let xv = self.value(*x).data();
                    let mut dg = vec![T::zero(); e];
                    let mut ds = vec![T::zero(); e];
                    for (grow, xrow) in gd.chunks(e).zip(xv.chunks(e)) {
                        for j in 0..e {
                            dg[j] += grow[j] * xrow[j];
                            ds[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(vec![e], dg).unwrap());
                    self.accumulate(grads, *shift, Tensor::new(vec![e], ds).unwrap());
                }
            }
            Op::ExpandMid { x, reps } => {
                let s = self.shape(*x);
                let (b, e) = (s[0], s[1]);
                let mut dx = vec![T::zero(); b * e];
                for bi in 0..b {
                    for r in 0..*reps {
                        let src = &gd[(bi * reps + r) * e..(bi * reps + r + 1) * e];
                        for (acc, &v) in dx[bi * e..(bi + 1) * e].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![b, e], dx).unwrap());
            }
            Op::Softmax(x) => {
                let e = node.value.last_dim().max(1);
                let yv = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(e).zip(yv.chunks(e)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x);
                let e = xv.last_dim();
                let mut dx = Vec::with_capacity(xv.len());
                for ((row, &lse), &gv) in xv.data().chunks(e).zip(node.value.data()).zip(gd) {
                    dx.extend(row.iter().map(|&v| gv * (v - lse).exp()));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::SumLast(x) => {
                let xs = self.shape(*x).to_vec();
                let e = xs[xs.len() - 1];
                let mut dx = Vec::with_capacity(gd.len() * e);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv, e));
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx).unwrap());
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(xs, gd[0]));
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x);
                let n = T::from_usize(self.value(*x).len().max(1)).unwrap();
                self.accumulate(grads, *x, Tensor::full(xs, gd[0] / n));
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inv).unwrap());
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let outer: usize = sa[..*axis].iter().product();
                let ca: usize = sa[*axis..].iter().product();
                let cb: usize = sb[*axis..].iter().product();
                let mut ga = Vec::with_capacity(outer * ca);
                let mut gb = Vec::with_capacity(outer * cb);
                for o in 0..outer {
                    let base = o * (ca + cb);
                    ga.extend_from_slice(&gd[base..base + ca]);
                    gb.extend_from_slice(&gd[base + ca..base + ca + cb]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(sb, gb).unwrap());
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let width = node.value.shape()[*axis];
                let slot = self.grad_slot(grads, *x);
                let dst = slot.data_mut();
                for o in 0..outer {
                    let base = o * xs[*axis] * inner + start * inner;
                    let src = &gd[o * width * inner..(o + 1) * width * inner];
                    for (d, &s) in dst[base..base + width * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable `log Σ exp(v)`.
pub fn logsumexp<T: Real>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}
