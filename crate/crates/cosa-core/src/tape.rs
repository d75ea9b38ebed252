//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! A forward pass records one node per operation; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients. Leaves are
//! either constants or named parameters; parameter gradients are
//! returned keyed by `(store, param)` so callers can push them into
//! the owning [`ParamStore`](crate::params::ParamStore).

use crate::tensor::{Scalar, Tensor};
use crate::{CosaError, Result};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef(usize);

/// Whether parameters fed to a forward pass receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Parameters are tracked leaves; backward produces their gradients.
    Tracked,
    /// Parameters enter as constants; backward leaves them untouched.
    Frozen,
}

enum Op {
    Leaf(Option<ParamKey>),
    AddE(NodeRef, NodeRef),
    SubE(NodeRef, NodeRef),
    MulE(NodeRef, NodeRef),
    /// `a / (b + eps)` elementwise.
    DivEps(NodeRef, NodeRef, f64),
    /// `x + bias` broadcast over leading axes.
    AddBias(NodeRef, NodeRef),
    /// `[N, d] x [d, o]` with leading axes of the left operand flattened.
    MatMul(NodeRef, NodeRef),
    /// Per-sample `a @ b^T`: `[B,T,h] x [B,S,h] -> [B,T,S]`.
    BmmNT(NodeRef, NodeRef),
    /// Per-sample `a @ b`: `[B,T,S] x [B,S,h] -> [B,T,h]`.
    BmmNN(NodeRef, NodeRef),
    Relu(NodeRef),
    Sigmoid(NodeRef),
    SoftmaxLast(NodeRef),
    /// Mean negative log-likelihood of `targets` under softmax of logits `[N, C]`.
    CrossEntropy(NodeRef, Vec<usize>),
    MeanAll(NodeRef),
    SumAll(NodeRef),
    /// `[B,T,h] -> [B,h]` mean over the frame axis.
    MeanFrames(NodeRef),
    /// `out[b,t,:] = w[b,t] * f[b,t,:]` for `f [B,T,h]`, `w [B,T]`.
    ScaleFrames(NodeRef, NodeRef),
    /// Euclidean norm over the last axis.
    NormLast(NodeRef),
    Abs(NodeRef),
    ScalarMul(NodeRef, f64),
    AddConst(NodeRef),
    /// Elementwise `min(x, cap)`.
    ClampMax(NodeRef, f64),
    ConcatLast(Vec<NodeRef>),
    Reshape(NodeRef),
}

struct Node<F> {
    op: Op,
    value: Tensor<F>,
}

/// Identifies a parameter leaf: `(store name, parameter name)`.
pub type ParamKey = (String, String);

/// Gradients keyed by parameter, produced by [`Tape::backward`].
pub struct Gradients<F> {
    map: HashMap<ParamKey, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, store: &str, param: &str) -> Option<&Tensor<F>> {
        self.map.get(&(store.to_string(), param.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeRef) -> &Tensor<F> {
        &self.nodes[n.0].value
    }

    pub fn shape(&self, n: NodeRef) -> &[usize] {
        self.nodes[n.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> NodeRef {
        self.nodes.push(Node { op, value });
        NodeRef(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeRef {
        self.push(Op::Leaf(None), value)
    }

    /// Insert a named parameter leaf. Gradients flow back to it only in
    /// [`ParamMode::Tracked`].
    pub fn leaf(&mut self, store: &str, param: &str, value: Tensor<F>, mode: ParamMode) -> NodeRef {
        let key = match mode {
            ParamMode::Tracked => Some((store.to_string(), param.to_string())),
            ParamMode::Frozen => None,
        };
        self.push(Op::Leaf(key), value)
    }

    fn shapes_equal(&self, a: NodeRef, b: NodeRef, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.shapes_equal(a, b, "add");
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::AddE(a, b), v)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.shapes_equal(a, b, "sub");
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::SubE(a, b), v)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.shapes_equal(a, b, "mul");
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::MulE(a, b), v)
    }

    pub fn div_eps(&mut self, num: NodeRef, den: NodeRef, eps: f64) -> NodeRef {
        self.shapes_equal(num, den, "div_eps");
        let e = F::from_f64(eps);
        let v = zip_map(self.value(num), self.value(den), |x, y| x / (y + e));
        self.push(Op::DivEps(num, den, eps), v)
    }

    pub fn add_bias(&mut self, x: NodeRef, bias: NodeRef) -> NodeRef {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        assert_eq!(bs.len(), 1, "add_bias: bias must be rank 1");
        let o = bs[0];
        assert_eq!(*xs.last().expect("add_bias: rank >= 1"), o, "add_bias: width mismatch");
        let bd = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, slot) in v.data_mut().iter_mut().enumerate() {
            *slot += bd[i % o];
        }
        self.push(Op::AddBias(x, bias), v)
    }

    pub fn matmul(&mut self, x: NodeRef, w: NodeRef) -> NodeRef {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul: weight must be rank 2");
        let d = *xs.last().expect("matmul: input rank >= 1");
        assert_eq!(d, ws[0], "matmul: inner dims {d} vs {}", ws[0]);
        let o = ws[1];
        let rows = self.value(x).len() / d;
        let mut out = vec![F::ZERO; rows * o];
        mat_mul(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            d,
            o,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let v = Tensor::new(shape, out).expect("matmul output shape");
        self.push(Op::MatMul(x, w), v)
    }

    pub fn bmm_nt(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (ab, at, ah) = rank3(self.shape(a), "bmm_nt lhs");
        let (bb, bs, bh) = rank3(self.shape(b), "bmm_nt rhs");
        assert_eq!(ab, bb, "bmm_nt: batch mismatch");
        assert_eq!(ah, bh, "bmm_nt: feature mismatch");
        let mut out = vec![F::ZERO; ab * at * bs];
        for i in 0..ab {
            mat_mul_nt(
                &self.value(a).data()[i * at * ah..(i + 1) * at * ah],
                &self.value(b).data()[i * bs * bh..(i + 1) * bs * bh],
                &mut out[i * at * bs..(i + 1) * at * bs],
                at,
                ah,
                bs,
            );
        }
        let v = Tensor::new(vec![ab, at, bs], out).expect("bmm_nt output shape");
        self.push(Op::BmmNT(a, b), v)
    }

    pub fn bmm_nn(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (ab, at, as_) = rank3(self.shape(a), "bmm_nn lhs");
        let (bb, bs, bh) = rank3(self.shape(b), "bmm_nn rhs");
        assert_eq!(ab, bb, "bmm_nn: batch mismatch");
        assert_eq!(as_, bs, "bmm_nn: inner mismatch");
        let mut out = vec![F::ZERO; ab * at * bh];
        for i in 0..ab {
            mat_mul(
                &self.value(a).data()[i * at * as_..(i + 1) * at * as_],
                &self.value(b).data()[i * bs * bh..(i + 1) * bs * bh],
                &mut out[i * at * bh..(i + 1) * at * bh],
                at,
                as_,
                bh,
            );
        }
        let v = Tensor::new(vec![ab, at, bh], out).expect("bmm_nn output shape");
        self.push(Op::BmmNN(a, b), v)
    }

    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        let v = self.value(x).map(|v| v.maxs(F::ZERO));
        self.push(Op::Relu(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeRef) -> NodeRef {
        let v = self.value(x).map(|v| F::ONE / (F::ONE + (-v).exp()));
        self.push(Op::Sigmoid(x), v)
    }

    pub fn softmax_last(&mut self, x: NodeRef) -> NodeRef {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("softmax_last: rank >= 1");
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxLast(x), v)
    }

    /// Mean cross-entropy of integer `targets` against logits `[N, C]`.
    pub fn cross_entropy(&mut self, logits: NodeRef, targets: &[usize]) -> NodeRef {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy: logits must be [N, C]");
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(n, targets.len(), "cross_entropy: target count");
        assert!(
            targets.iter().all(|&t| t < c),
            "cross_entropy: target class out of range"
        );
        let mut total = F::ZERO;
        for (row, &t) in self.value(logits).data().chunks(c).zip(targets) {
            let mut probs = row.to_vec();
            softmax_in_place(&mut probs);
            total += -(probs[t].ln());
        }
        let v = Tensor::scalar(total / F::from_usize(n));
        self.push(Op::CrossEntropy(logits, targets.to_vec()), v)
    }

    pub fn mean_all(&mut self, x: NodeRef) -> NodeRef {
        let n = self.value(x).len();
        assert!(n > 0, "mean_all: empty tensor");
        let mut total = F::ZERO;
        for &v in self.value(x).data() {
            total += v;
        }
        let v = Tensor::scalar(total / F::from_usize(n));
        self.push(Op::MeanAll(x), v)
    }

    pub fn sum_all(&mut self, x: NodeRef) -> NodeRef {
        let mut total = F::ZERO;
        for &v in self.value(x).data() {
            total += v;
        }
        self.push(Op::SumAll(x), Tensor::scalar(total))
    }

    pub fn mean_frames(&mut self, x: NodeRef) -> NodeRef {
        let (b, t, h) = rank3(self.shape(x), "mean_frames");
        let inv = F::ONE / F::from_usize(t);
        let mut out = vec![F::ZERO; b * h];
        for bi in 0..b {
            for ti in 0..t {
                let src = &self.value(x).data()[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                for (o, &s) in out[bi * h..(bi + 1) * h].iter_mut().zip(src) {
                    *o += s * inv;
                }
            }
        }
        let v = Tensor::new(vec![b, h], out).expect("mean_frames output shape");
        self.push(Op::MeanFrames(x), v)
    }

    pub fn scale_frames(&mut self, f: NodeRef, w: NodeRef) -> NodeRef {
        let (b, t, h) = rank3(self.shape(f), "scale_frames features");
        assert_eq!(self.shape(w), &[b, t], "scale_frames: weight shape");
        let mut v = self.value(f).clone();
        let wd = self.value(w).data().to_vec();
        for (bt, chunk) in v.data_mut().chunks_mut(h).enumerate() {
            let s = wd[bt];
            for val in chunk {
                *val = *val * s;
            }
        }
        self.push(Op::ScaleFrames(f, w), v)
    }

    pub fn norm_last(&mut self, x: NodeRef) -> NodeRef {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().expect("norm_last: rank >= 1");
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(h)
            .map(|row| {
                let mut s = F::ZERO;
                for &v in row {
                    s += v * v;
                }
                s.sqrt()
            })
            .collect();
        let v = Tensor::new(shape[..shape.len() - 1].to_vec(), out).expect("norm_last shape");
        self.push(Op::NormLast(x), v)
    }

    pub fn abs(&mut self, x: NodeRef) -> NodeRef {
        let v = self.value(x).map(|v| v.abs());
        self.push(Op::Abs(x), v)
    }

    pub fn scalar_mul(&mut self, x: NodeRef, c: f64) -> NodeRef {
        let cf = F::from_f64(c);
        let v = self.value(x).map(|v| v * cf);
        self.push(Op::ScalarMul(x, c), v)
    }

    pub fn add_const(&mut self, x: NodeRef, c: f64) -> NodeRef {
        let cf = F::from_f64(c);
        let v = self.value(x).map(|v| v + cf);
        self.push(Op::AddConst(x), v)
    }

    pub fn clamp_max(&mut self, x: NodeRef, cap: f64) -> NodeRef {
        let capf = F::from_f64(cap);
        let v = self.value(x).map(|v| v.mins(capf));
        self.push(Op::ClampMax(x, cap), v)
    }

    pub fn concat_last(&mut self, parts: &[NodeRef]) -> NodeRef {
        assert!(!parts.is_empty(), "concat_last: no inputs");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last: leading dims differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![F::ZERO; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let data = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, out).expect("concat_last shape");
        self.push(Op::ConcatLast(parts.to_vec()), v)
    }

    pub fn reshape(&mut self, x: NodeRef, shape: &[usize]) -> NodeRef {
        let v = self
            .value(x)
            .reshaped(shape)
            .expect("reshape: element count must match");
        self.push(Op::Reshape(x), v)
    }

    /// Backpropagate from a scalar loss node. Fails on a non-finite loss
    /// or gradient.
    pub fn backward(&self, loss: NodeRef) -> Result<Gradients<F>> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let lv = self.value(loss).item();
        if !lv.is_finite() {
            return Err(CosaError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::ONE));

        for idx in (0..=loss.0).rev() {
            let go = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf(_) => {
                    grads[idx] = Some(go);
                    continue;
                }
                Op::AddE(a, b) => {
                    accumulate(&mut grads, *a, go.clone());
                    accumulate(&mut grads, *b, go);
                }
                Op::SubE(a, b) => {
                    accumulate(&mut grads, *a, go.clone());
                    accumulate(&mut grads, *b, go.map(|v| -v));
                }
                Op::MulE(a, b) => {
                    let ga = zip_map(&go, self.value(*b), |g, v| g * v);
                    let gb = zip_map(&go, self.value(*a), |g, v| g * v);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::DivEps(a, b, eps) => {
                    let e = F::from_f64(*eps);
                    let bv = self.value(*b);
                    let av = self.value(*a);
                    let ga = zip_map(&go, bv, |g, y| g / (y + e));
                    let mut gb = go.clone();
                    for ((g, &x), &y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        let d = y + e;
                        *g = -(*g) * x / (d * d);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, bias) => {
                    let o = self.value(*bias).len();
                    let mut gb = Tensor::zeros(&[o]);
                    for (i, &g) in go.data().iter().enumerate() {
                        gb.data_mut()[i % o] += g;
                    }
                    accumulate(&mut grads, *x, go);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::MatMul(x, w) => {
                    let ws = self.value(*w).shape().to_vec();
                    let (d, o) = (ws[0], ws[1]);
                    let rows = self.value(*x).len() / d;
                    // gx = go . w^T
                    let mut gx = vec![F::ZERO; rows * d];
                    mat_mul_nt(go.data(), self.value(*w).data(), &mut gx, rows, o, d);
                    // gw = x^T . go
                    let mut gw = vec![F::ZERO; d * o];
                    mat_mul_tn(self.value(*x).data(), go.data(), &mut gw, rows, d, o);
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), gx).unwrap(),
                    );
                    accumulate(&mut grads, *w, Tensor::new(ws, gw).unwrap());
                }
                Op::BmmNT(a, b) => {
                    let (ab, at, ah) = rank3(self.value(*a).shape(), "bmm_nt grad");
                    let bs = self.value(*b).shape()[1];
                    let mut ga = vec![F::ZERO; ab * at * ah];
                    let mut gb = vec![F::ZERO; ab * bs * ah];
                    for i in 0..ab {
                        let go_i = &go.data()[i * at * bs..(i + 1) * at * bs];
                        let a_i = &self.value(*a).data()[i * at * ah..(i + 1) * at * ah];
                        let b_i = &self.value(*b).data()[i * bs * ah..(i + 1) * bs * ah];
                        // ga_i = go_i . b_i      [at,bs] x [bs,ah]
                        mat_mul(go_i, b_i, &mut ga[i * at * ah..(i + 1) * at * ah], at, bs, ah);
                        // gb_i = go_i^T . a_i    [bs,at] x [at,ah]
                        mat_mul_tn(go_i, a_i, &mut gb[i * bs * ah..(i + 1) * bs * ah], at, bs, ah);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![ab, at, ah], ga).unwrap());
                    accumulate(&mut grads, *b, Tensor::new(vec![ab, bs, ah], gb).unwrap());
                }
                Op::BmmNN(a, b) => {
                    let (ab, at, as_) = rank3(self.value(*a).shape(), "bmm_nn grad");
                    let bh = self.value(*b).shape()[2];
                    let mut ga = vec![F::ZERO; ab * at * as_];
                    let mut gb = vec![F::ZERO; ab * as_ * bh];
                    for i in 0..ab {
                        let go_i = &go.data()[i * at * bh..(i + 1) * at * bh];
                        let a_i = &self.value(*a).data()[i * at * as_..(i + 1) * at * as_];
                        let b_i = &self.value(*b).data()[i * as_ * bh..(i + 1) * as_ * bh];
                        // ga_i = go_i . b_i^T    [at,bh] x [bh,as]
                        mat_mul_nt(go_i, b_i, &mut ga[i * at * as_..(i + 1) * at * as_], at, bh, as_);
                        // gb_i = a_i^T . go_i    [as,at] x [at,bh]
                        mat_mul_tn(a_i, go_i, &mut gb[i * as_ * bh..(i + 1) * as_ * bh], at, as_, bh);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![ab, at, as_], ga).unwrap());
                    accumulate(&mut grads, *b, Tensor::new(vec![ab, as_, bh], gb).unwrap());
                }
                Op::Relu(x) => {
                    let gx = zip_map(&go, self.value(*x), |g, v| {
                        if v > F::ZERO {
                            g
                        } else {
                            F::ZERO
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&go, &self.nodes[idx].value, |g, y| g * y * (F::ONE - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxLast(x) => {
                    let y = &self.nodes[idx].value;
                    let c = *y.shape().last().unwrap();
                    let mut gx = go.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let mut dot = F::ZERO;
                        for (g, &yv) in grow.iter().zip(yrow) {
                            dot += *g * yv;
                        }
                        for (g, &yv) in grow.iter_mut().zip(yrow) {
                            *g = (*g - dot) * yv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy(logits, targets) => {
                    let c = self.value(*logits).shape()[1];
                    let n = targets.len();
                    let scale = go.item() / F::from_usize(n);
                    let mut gl = self.value(*logits).clone();
                    for (row, &t) in gl.data_mut().chunks_mut(c).zip(targets) {
                        softmax_in_place(row);
                        row[t] -= F::ONE;
                        for v in row.iter_mut() {
                            *v = *v * scale;
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).len();
                    let g = go.item() / F::from_usize(n);
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
                Op::SumAll(x) => {
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::full(self.value(*x).shape(), go.item()),
                    );
                }
                Op::MeanFrames(x) => {
                    let (b, t, h) = rank3(self.value(*x).shape(), "mean_frames grad");
                    let inv = F::ONE / F::from_usize(t);
                    let mut gx = vec![F::ZERO; b * t * h];
                    for bi in 0..b {
                        let src = &go.data()[bi * h..(bi + 1) * h];
                        for ti in 0..t {
                            for (g, &s) in gx[(bi * t + ti) * h..(bi * t + ti + 1) * h]
                                .iter_mut()
                                .zip(src)
                            {
                                *g = s * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![b, t, h], gx).unwrap());
                }
                Op::ScaleFrames(f, w) => {
                    let (b, t, h) = rank3(self.value(*f).shape(), "scale_frames grad");
                    let wd = self.value(*w).data();
                    let fd = self.value(*f).data();
                    let mut gf = go.clone();
                    let mut gw = vec![F::ZERO; b * t];
                    for bt in 0..b * t {
                        let s = wd[bt];
                        let grow = &mut gf.data_mut()[bt * h..(bt + 1) * h];
                        let frow = &fd[bt * h..(bt + 1) * h];
                        let gorow = &go.data()[bt * h..(bt + 1) * h];
                        let mut dot = F::ZERO;
                        for ((g, &gov), &fv) in grow.iter_mut().zip(gorow).zip(frow) {
                            dot += gov * fv;
                            *g = gov * s;
                        }
                        gw[bt] = dot;
                    }
                    accumulate(&mut grads, *f, gf);
                    accumulate(&mut grads, *w, Tensor::new(vec![b, t], gw).unwrap());
                }
                Op::NormLast(x) => {
                    let h = *self.value(*x).shape().last().unwrap();
                    let y = &self.nodes[idx].value;
                    let mut gx = self.value(*x).clone();
                    for (i, row) in gx.data_mut().chunks_mut(h).enumerate() {
                        let norm = y.data()[i];
                        let g = go.data()[i];
                        if norm > F::ZERO {
                            for v in row.iter_mut() {
                                *v = g * *v / norm;
                            }
                        } else {
                            for v in row.iter_mut() {
                                *v = F::ZERO;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let gx = zip_map(&go, self.value(*x), |g, v| {
                        if v > F::ZERO {
                            g
                        } else if v < F::ZERO {
                            -g
                        } else {
                            F::ZERO
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScalarMul(x, c) => {
                    let cf = F::from_f64(*c);
                    accumulate(&mut grads, *x, go.map(|g| g * cf));
                }
                Op::AddConst(x) => {
                    accumulate(&mut grads, *x, go);
                }
                Op::ClampMax(x, cap) => {
                    let capf = F::from_f64(*cap);
                    let gx = zip_map(&go, self.value(*x), |g, v| {
                        if v <= capf {
                            g
                        } else {
                            F::ZERO
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatLast(parts) => {
                    let total = *self.nodes[idx].value.shape().last().unwrap();
                    let rows = self.nodes[idx].value.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let w = *self.value(p).shape().last().unwrap();
                        let mut gp = Tensor::zeros(self.value(p).shape());
                        for r in 0..rows {
                            gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(
                                &go.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    let gx = go
                        .reshaped(self.value(*x).shape())
                        .expect("reshape grad shape");
                    accumulate(&mut grads, *x, gx);
                }
            }
        }

        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(key)) = &node.op {
                if let Some(g) = grads[idx].take() {
                    g.check_finite(&format!("gradient of {}/{}", key.0, key.1))?;
                    match map.entry(key.clone()) {
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            let acc: &mut Tensor<F> = e.get_mut();
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { map })
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], n: NodeRef, g: Tensor<F>) {
    match &mut grads[n.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.len(), b.len());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

fn rank3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "{what}: expected rank 3, got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maxs(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `out[m,n] = sum_k a[m,k] * b[k,n]`; `out` is overwritten.
pub(crate) fn mat_mul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = F::ZERO;
    }
    for mi in 0..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let orow = &mut out[mi * n..(mi + 1) * n];
        for (ki, &av) in arow.iter().enumerate() {
            let brow = &b[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] = sum_k a[m,k] * b[n,k]` (right operand transposed).
pub(crate) fn mat_mul_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for mi in 0..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let orow = &mut out[mi * n..(mi + 1) * n];
        for (ni, o) in orow.iter_mut().enumerate() {
            let brow = &b[ni * k..(ni + 1) * k];
            let mut s = F::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o = s;
        }
    }
}

/// `out[k,n] = sum_m a[m,k] * b[m,n]` (left operand transposed).
pub(crate) fn mat_mul_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for v in out.iter_mut() {
        *v = F::ZERO;
    }
    for mi in 0..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let brow = &b[mi * n..(mi + 1) * n];
        for (ki, &av) in arow.iter().enumerate() {
            let orow = &mut out[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
