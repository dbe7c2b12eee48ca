//! Reverse-mode differentiation over a linear operation tape.
//!
//! One tape per training step: leaves (parameters tracked, inputs and frozen
//! predictions untracked) are registered first, the forward expression is
//! built through the recording methods, and [`Tape::backward`] replays the
//! tape once in reverse. Elementwise ops support exact shape match plus
//! scalar (single-element) broadcast; nothing wider.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, F),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Scale(Var, F),
    BiasAdd(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Crop2d(Var),
    SoftmaxChannels(Var),
    SumAll(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`; `None` for untracked values.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Recording tape. Single-threaded; build, differentiate, drop.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// True when gradients will flow into `v`.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Untracked leaf: inputs, frozen predictions, masks.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf: gradients accumulate here.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise ──────────────────────────────────────────────────────

    fn binary_shape(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(Error::ShapeMismatch {
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let shape = self.binary_shape(a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        if ta.shape() == tb.shape() {
            for i in 0..n {
                values.push(f(ta.values()[i], tb.values()[i]));
            }
        } else if tb.is_scalar() {
            let s = tb.values()[0];
            for i in 0..n {
                values.push(f(ta.values()[i], s));
            }
        } else {
            let s = ta.values()[0];
            for i in 0..n {
                values.push(f(s, tb.values()[i]));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, values)?, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.unary(
            a,
            |x| if x > F::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    /// Natural log with the input clamped below at `eps_log`.
    pub fn log(&mut self, a: Var) -> Var {
        let eps = F::eps_log();
        self.unary(a, |x| x.max(eps).ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_value, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    // ── structured ops ───────────────────────────────────────────────────

    /// `x[c,h,w] + b[c]`, bias broadcast over spatial positions.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if tx.shape().len() != 3 || tb.shape().len() != 1 || tb.shape()[0] != tx.shape()[0] {
            return Err(Error::ShapeMismatch {
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut values = tx.values().to_vec();
        for ch in 0..c {
            let bias = tb.values()[ch];
            for v in &mut values[ch * h * w..(ch + 1) * h * w] {
                *v += bias;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![c, h, w], values)?,
            Op::BiasAdd(x, b),
            needs,
        ))
    }

    /// Cross-correlation of `input[c_in,h,w]` with `kernel[c_out,c_in,k,k]`.
    /// Output size must come out integral; callers crop first when it does not.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        if ti.shape().len() != 3 || tk.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                left: ti.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        let (c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (c_out, kc_in, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kc_in != c_in || kh != kw {
            return Err(Error::ShapeMismatch {
                left: ti.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::EvenKernel { k });
        }
        assert!(stride >= 1, "stride must be positive");
        let conv_err = Error::NonIntegralConv {
            h,
            w,
            k,
            stride,
            pad,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(conv_err);
        }
        if !(h + 2 * pad - k).is_multiple_of(stride) || !(w + 2 * pad - k).is_multiple_of(stride) {
            return Err(conv_err);
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;

        let mut out = vec![F::zero(); c_out * oh * ow];
        let iv = ti.values();
        let kv = tk.values();
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for ic in 0..c_in {
                        for ky in 0..k {
                            let y = (oy * stride + ky).wrapping_sub(pad);
                            if y >= h {
                                continue;
                            }
                            let irow = (ic * h + y) * w;
                            let krow = ((oc * c_in + ic) * k + ky) * k;
                            for kx in 0..k {
                                let x = (ox * stride + kx).wrapping_sub(pad);
                                if x >= w {
                                    continue;
                                }
                                acc += iv[irow + x] * kv[krow + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Tensor::new(vec![c_out, oh, ow], out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Top-left crop of a `[c,h,w]` tensor to `[c,new_h,new_w]`.
    pub fn crop2d(&mut self, input: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        if t.shape().len() != 3 || new_h > t.shape()[1] || new_w > t.shape()[2] {
            return Err(Error::ShapeMismatch {
                left: t.shape().to_vec(),
                right: vec![t.shape()[0], new_h, new_w],
            });
        }
        let (c, _h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if new_h == t.shape()[1] && new_w == w {
            return Ok(input);
        }
        let mut values = Vec::with_capacity(c * new_h * new_w);
        for ch in 0..c {
            for y in 0..new_h {
                let row = t.idx3(ch, y, 0);
                values.extend_from_slice(&t.values()[row..row + new_w]);
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![c, new_h, new_w], values)?,
            Op::Crop2d(input),
            needs,
        ))
    }

    /// Per-pixel softmax over the channel axis, computed with max-subtraction.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                left: t.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = vec![F::zero(); c * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut m = t.values()[t.idx3(0, y, x)];
                for ch in 1..c {
                    m = m.max(t.values()[t.idx3(ch, y, x)]);
                }
                let mut sum = F::zero();
                for ch in 0..c {
                    let e = (t.values()[t.idx3(ch, y, x)] - m).exp();
                    out[t.idx3(ch, y, x)] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[t.idx3(ch, y, x)] = out[t.idx3(ch, y, x)] / sum;
                }
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::SoftmaxChannels(logits),
            needs,
        ))
    }

    /// Sum of every element, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0]
            .value
            .values()
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), needs)
    }

    /// Mean of every element, as a `[1]` scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_usize(n).unwrap())
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each node is visited exactly once, in
    /// reverse topological order (the tape is already topologically sorted).
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], target: Var, contrib: &Tensor<F>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let tshape = self.nodes[target.0].value.shape();
        // Reduce to a scalar when the target side was broadcast.
        let reduced: Tensor<F> = if contrib.shape() == tshape {
            contrib.clone()
        } else {
            debug_assert_eq!(tshape.iter().product::<usize>(), 1);
            Tensor::scalar(contrib.values().iter().fold(F::zero(), |acc, &v| acc + v))
        };
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, r) in existing.values_mut().iter_mut().zip(reduced.values()) {
                    *e += *r;
                }
            }
            slot => *slot = Some(reduced),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg = g.map(|v| -v);
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].needs_grad {
                    let ga = broadcast_mul(g, tb);
                    self.accumulate(grads, *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = broadcast_mul(g, ta);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Relu(a) => {
                let ta = &self.nodes[a.0].value;
                let ga = zip_map(g, ta, |gv, x| if x > F::zero() { gv } else { F::zero() });
                self.accumulate(grads, *a, &ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ta = &self.nodes[a.0].value;
                let s = *slope;
                let ga = zip_map(g, ta, |gv, x| if x > F::zero() { gv } else { gv * s });
                self.accumulate(grads, *a, &ga);
            }
            Op::Log(a) => {
                // Derivative of ln(max(x, eps)): zero on the clamped branch.
                let ta = &self.nodes[a.0].value;
                let eps = F::eps_log();
                let ga = zip_map(g, ta, |gv, x| if x > eps { gv / x } else { F::zero() });
                self.accumulate(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let out = &self.nodes[i].value;
                let ga = zip_map(g, out, |gv, y| gv * y);
                self.accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[i].value;
                let ga = zip_map(g, out, |gv, s| gv * s * (F::one() - s));
                self.accumulate(grads, *a, &ga);
            }
            Op::Scale(a, k) => {
                let k = *k;
                let ga = g.map(|v| v * k);
                self.accumulate(grads, *a, &ga);
            }
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, *x, g);
                if self.nodes[b.0].needs_grad {
                    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let mut gb = vec![F::zero(); c];
                    for (ch, slot) in gb.iter_mut().enumerate() {
                        for v in &g.values()[ch * h * w..(ch + 1) * h * w] {
                            *slot += *v;
                        }
                    }
                    let gb = Tensor::new(vec![c], gb).expect("bias grad shape");
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                self.conv2d_backward(*input, *kernel, *stride, *pad, g, grads);
            }
            Op::Crop2d(a) => {
                let ta = &self.nodes[a.0].value;
                let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let (nh, nw) = (g.shape()[1], g.shape()[2]);
                let mut ga = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    for y in 0..nh {
                        for x in 0..nw {
                            let src = (ch * nh + y) * nw + x;
                            let dst = ga.idx3(ch, y, x);
                            ga.values_mut()[dst] = g.values()[src];
                        }
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::SoftmaxChannels(a) => {
                let p = &self.nodes[i].value;
                let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
                let mut ga = Tensor::zeros(vec![c, h, w]);
                for y in 0..h {
                    for x in 0..w {
                        let mut dot = F::zero();
                        for ch in 0..c {
                            let idx = p.idx3(ch, y, x);
                            dot += g.values()[idx] * p.values()[idx];
                        }
                        for ch in 0..c {
                            let idx = p.idx3(ch, y, x);
                            ga.values_mut()[idx] = p.values()[idx] * (g.values()[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::SumAll(a) => {
                let ta = &self.nodes[a.0].value;
                let ga = Tensor::filled(ta.shape().to_vec(), g.values()[0]);
                self.accumulate(grads, *a, &ga);
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let ti = &self.nodes[input.0].value;
        let tk = &self.nodes[kernel.0].value;
        let (c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (c_out, _, k, _) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let want_input = self.nodes[input.0].needs_grad;
        let want_kernel = self.nodes[kernel.0].needs_grad;
        let mut gi = Tensor::zeros(vec![c_in, h, w]);
        let mut gk = Tensor::zeros(vec![c_out, c_in, k, k]);
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.values()[(oc * oh + oy) * ow + ox];
                    for ic in 0..c_in {
                        for ky in 0..k {
                            let y = (oy * stride + ky).wrapping_sub(pad);
                            if y >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let x = (ox * stride + kx).wrapping_sub(pad);
                                if x >= w {
                                    continue;
                                }
                                let ii = (ic * h + y) * w + x;
                                let ki = ((oc * c_in + ic) * k + ky) * k + kx;
                                if want_input {
                                    gi.values_mut()[ii] += gv * tk.values()[ki];
                                }
                                if want_kernel {
                                    gk.values_mut()[ki] += gv * ti.values()[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_input {
            self.accumulate(grads, input, &gi);
        }
        if want_kernel {
            self.accumulate(grads, kernel, &gk);
        }
    }
}

#[inline]
fn sigmoid_value<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Elementwise `g * t` where `t` may be scalar-broadcast against `g` (or the
/// reverse); result has the wider shape.
fn broadcast_mul<F: Scalar>(g: &Tensor<F>, t: &Tensor<F>) -> Tensor<F> {
    if g.shape() == t.shape() {
        let values = g
            .values()
            .iter()
            .zip(t.values())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::new(g.shape().to_vec(), values).expect("same shape")
    } else if t.is_scalar() {
        let s = t.values()[0];
        g.map(|v| v * s)
    } else {
        debug_assert!(g.is_scalar());
        let s = g.values()[0];
        t.map(|v| v * s)
    }
}

fn zip_map<F: Scalar>(g: &Tensor<F>, t: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(g.shape(), t.shape());
    let values = g
        .values()
        .iter()
        .zip(t.values())
        .map(|(&gv, &tv)| f(gv, tv))
        .collect();
    Tensor::new(g.shape().to_vec(), values).expect("same shape")
}
