//! Reverse-mode autodiff on a flat tape of batched tensor ops.
//!
//! One `Tape` records a single forward pass. `backward` walks the recorded
//! ops exactly once in reverse, so gradients are deterministic. Stop-gradient
//! nodes are forward-identity and contribute exactly zero upstream.
//!
//! Finite-difference checking needs the tape to replay a frozen
//! linearization: backprop returns the exact gradient of the loss with every
//! stop-gradient output held constant and every relu activation pattern
//! fixed at the base point (the subgradient convention picks one side of
//! each kink). A `Record` pass captures those, a `Replay` pass re-evaluates
//! the loss under them, and central differences of the replayed function
//! agree with backprop to roundoff.

use super::store::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Activation applied by [`Tape::dense`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

/// Non-smooth choices captured on a base pass: stop-gradient outputs and
/// relu activation masks, both in creation order.
#[derive(Debug, Clone, Default)]
pub struct FrozenContext {
    sg_values: Vec<Tensor>,
    relu_masks: Vec<Vec<bool>>,
}

enum FreezeState {
    Passthrough,
    Record(FrozenContext),
    Replay { ctx: FrozenContext, sg_cursor: usize, relu_cursor: usize },
}

enum Op {
    Input,
    Param(ParamId),
    StopGradient,
    MatMul(ValueId, ValueId),
    AddRow(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    MulColBroadcast(ValueId, ValueId),
    Scale(ValueId, f64),
    Relu(ValueId),
    Sigmoid(ValueId),
    SoftmaxRows(ValueId),
    Conv1d { input: ValueId, kernels: ValueId, bias: ValueId },
    Reshape(ValueId),
    ConcatCols(Vec<ValueId>),
    SliceCol(ValueId, usize),
    MeanAll(ValueId),
    BceLogitsMean { logits: ValueId, labels: ValueId, weights: ValueId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    freeze: FreezeState,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// Mathematically sigmoid lives in the open interval (0, 1); under f64
// rounding it would hit exactly 0.0 below -745 and exactly 1.0 above ~36.7.
// Clamp to the nearest representable interior values so bounded-gate and
// probability invariants survive extreme pre-activations.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), freeze: FreezeState::Passthrough }
    }

    /// Forward pass that captures stop-gradient outputs and relu masks.
    pub fn recording() -> Self {
        Tape { nodes: Vec::new(), freeze: FreezeState::Record(FrozenContext::default()) }
    }

    /// Forward pass that substitutes a previously recorded context.
    pub fn replaying(ctx: FrozenContext) -> Self {
        Tape { nodes: Vec::new(), freeze: FreezeState::Replay { ctx, sg_cursor: 0, relu_cursor: 0 } }
    }

    /// The context captured by a [`Tape::recording`] pass.
    pub fn take_frozen(self) -> FrozenContext {
        match self.freeze {
            FreezeState::Record(ctx) => ctx,
            _ => panic!("take_frozen on a tape that was not recording"),
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Constant leaf: inputs, labels, lookup results. Receives gradient during
    /// backward (readable via [`Gradients::of`]) but is never updated.
    pub fn input(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Input)
    }

    /// Parameter leaf bound to a store entry; `backward` accumulates its
    /// gradient into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Forward identity, zero gradient upstream.
    pub fn stop_gradient(&mut self, x: ValueId) -> ValueId {
        let value = match &mut self.freeze {
            FreezeState::Passthrough => self.nodes[x.0].value.clone(),
            FreezeState::Record(ctx) => {
                let v = self.nodes[x.0].value.clone();
                ctx.sg_values.push(v.clone());
                v
            }
            FreezeState::Replay { ctx, sg_cursor, .. } => {
                let v = ctx
                    .sg_values
                    .get(*sg_cursor)
                    .expect("stop-gradient replay exhausted: graph structure changed")
                    .clone();
                assert_eq!(
                    v.shape(),
                    self.nodes[x.0].value.shape(),
                    "stop-gradient replay shape mismatch"
                );
                *sg_cursor += 1;
                v
            }
        };
        self.push(value, Op::StopGradient)
    }

    /// `[b, i] x [i, o] -> [b, o]`
    pub fn matmul(&mut self, a: ValueId, w: ValueId) -> ValueId {
        let (av, wv) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        let (b, i) = (av.rows(), av.cols());
        assert_eq!(i, wv.rows(), "matmul inner dims: {:?} x {:?}", av.shape(), wv.shape());
        let o = wv.cols();
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            let arow = av.row(r);
            let orow = &mut out[r * o..(r + 1) * o];
            for (k, &ark) in arow.iter().enumerate() {
                if ark == 0.0 {
                    continue;
                }
                let wrow = wv.row(k);
                for (c, &wkc) in wrow.iter().enumerate() {
                    orow[c] += ark * wkc;
                }
            }
        }
        self.push(Tensor::from_vec(&[b, o], out), Op::MatMul(a, w))
    }

    /// `[b, o] + [o]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: ValueId, bias: ValueId) -> ValueId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (b, o) = (av.rows(), av.cols());
        assert_eq!(bv.shape(), &[o], "add_row bias shape {:?} vs cols {}", bv.shape(), o);
        let mut out = av.data().to_vec();
        for r in 0..b {
            for c in 0..o {
                out[r * o + c] += bv.data()[c];
            }
        }
        self.push(Tensor::from_vec(&[b, o], out), Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Mul(a, b))
    }

    /// `[b, o] * [b, 1]`, the column broadcast used to mix expert outputs.
    pub fn mul_col_broadcast(&mut self, a: ValueId, col: ValueId) -> ValueId {
        let (av, cv) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let (b, o) = (av.rows(), av.cols());
        assert_eq!(cv.shape(), &[b, 1], "mul_col_broadcast col shape {:?}", cv.shape());
        let mut out = av.data().to_vec();
        for r in 0..b {
            let s = cv.data()[r];
            for c in 0..o {
                out[r * o + c] *= s;
            }
        }
        self.push(Tensor::from_vec(&[b, o], out), Op::MulColBroadcast(a, col))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let av = &self.nodes[a.0].value;
        let out = av.data().iter().map(|x| x * c).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        let out: Vec<f64> = match &mut self.freeze {
            FreezeState::Passthrough => av.data().iter().map(|x| x.max(0.0)).collect(),
            FreezeState::Record(ctx) => {
                ctx.relu_masks.push(av.data().iter().map(|&x| x > 0.0).collect());
                av.data().iter().map(|x| x.max(0.0)).collect()
            }
            FreezeState::Replay { ctx, relu_cursor, .. } => {
                let mask = ctx
                    .relu_masks
                    .get(*relu_cursor)
                    .expect("relu replay exhausted: graph structure changed");
                assert_eq!(mask.len(), av.len(), "relu replay shape mismatch");
                *relu_cursor += 1;
                av.data().iter().zip(mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect()
            }
        };
        self.push(Tensor::from_vec(&shape, out), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let av = &self.nodes[a.0].value;
        let out = av.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Sigmoid(a))
    }

    /// Row-wise softmax of a `[b, e]` matrix.
    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let av = &self.nodes[a.0].value;
        let (b, e) = (av.rows(), av.cols());
        let mut out = vec![0.0; b * e];
        for r in 0..b {
            let row = av.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let v = (x - m).exp();
                out[r * e + c] = v;
                sum += v;
            }
            for c in 0..e {
                out[r * e + c] /= sum;
            }
        }
        self.push(Tensor::from_vec(&[b, e], out), Op::SoftmaxRows(a))
    }

    /// Valid 1D cross-correlation, stride 1.
    /// `[b, c_in, l] * [c_out, c_in, k] + [c_out] -> [b, c_out, l - k + 1]`
    pub fn conv1d(&mut self, input: ValueId, kernels: ValueId, bias: ValueId) -> ValueId {
        let (iv, kv, bv) =
            (&self.nodes[input.0].value, &self.nodes[kernels.0].value, &self.nodes[bias.0].value);
        let (b, c_in, l) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (c_out, kc_in, k) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        assert_eq!(c_in, kc_in, "conv1d channel mismatch");
        assert!(l >= k, "conv1d input length {} shorter than kernel {}", l, k);
        assert_eq!(bv.shape(), &[c_out], "conv1d bias shape");
        let t_len = l - k + 1;
        let mut out = vec![0.0; b * c_out * t_len];
        for bi in 0..b {
            for o in 0..c_out {
                for t in 0..t_len {
                    let mut acc = bv.data()[o];
                    for c in 0..c_in {
                        let ibase = (bi * c_in + c) * l + t;
                        let kbase = (o * c_in + c) * k;
                        for j in 0..k {
                            acc += iv.data()[ibase + j] * kv.data()[kbase + j];
                        }
                    }
                    out[(bi * c_out + o) * t_len + t] = acc;
                }
            }
        }
        self.push(Tensor::from_vec(&[b, c_out, t_len], out), Op::Conv1d { input, kernels, bias })
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> ValueId {
        let v = self.nodes[a.0].value.reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Concatenate `[b, c_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let b = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = vec![0.0; b * total];
        for r in 0..b {
            let mut at = 0;
            for p in parts {
                let pv = &self.nodes[p.0].value;
                assert_eq!(pv.rows(), b, "concat_cols row mismatch");
                let row = pv.row(r);
                out[r * total + at..r * total + at + row.len()].copy_from_slice(row);
                at += row.len();
            }
        }
        self.push(Tensor::from_vec(&[b, total], out), Op::ConcatCols(parts.to_vec()))
    }

    /// Extract column `idx` of a `[b, e]` matrix as `[b, 1]`.
    pub fn slice_col(&mut self, a: ValueId, idx: usize) -> ValueId {
        let av = &self.nodes[a.0].value;
        let (b, e) = (av.rows(), av.cols());
        assert!(idx < e, "slice_col index {} out of {}", idx, e);
        let out = (0..b).map(|r| av.at2(r, idx)).collect();
        self.push(Tensor::from_vec(&[b, 1], out), Op::SliceCol(a, idx))
    }

    /// Mean over all elements, yielding a `[1]` scalar.
    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let av = &self.nodes[a.0].value;
        let n = av.len().max(1);
        let m = av.data().iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    /// Weighted binary cross-entropy on logits:
    /// `sum_b w_b * bce(l_b, y_b) / max(sum_b w_b, 1)`.
    ///
    /// Stable form `max(l, 0) - l*y + ln(1 + exp(-|l|))`. Labels and weights
    /// are constants; only the logits receive gradient.
    pub fn bce_logits_mean(&mut self, logits: ValueId, labels: ValueId, weights: ValueId) -> ValueId {
        let (lv, yv, wv) =
            (&self.nodes[logits.0].value, &self.nodes[labels.0].value, &self.nodes[weights.0].value);
        assert_eq!(lv.shape(), yv.shape(), "bce labels shape mismatch");
        assert_eq!(lv.shape(), wv.shape(), "bce weights shape mismatch");
        let mut num = 0.0;
        let mut denom = 0.0;
        for ((&l, &y), &w) in lv.data().iter().zip(yv.data()).zip(wv.data()) {
            num += w * (l.max(0.0) - l * y + (-l.abs()).exp().ln_1p());
            denom += w;
        }
        let out = num / denom.max(1.0);
        self.push(Tensor::scalar(out), Op::BceLogitsMean { logits, labels, weights })
    }

    /// Affine map plus activation: `act(x w + b)`.
    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId, act: Activation) -> ValueId {
        let lin = self.matmul(x, w);
        let lin = self.add_row(lin, b);
        match act {
            Activation::Relu => self.relu(lin),
            Activation::Sigmoid => self.sigmoid(lin),
            Activation::Identity => lin,
        }
    }

    /// Reverse pass from a scalar loss node. Visits every recorded op at most
    /// once, in reverse creation order.
    pub fn backward(&self, loss: ValueId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::StopGradient => {
                    // forward identity, nothing flows upstream
                }
                Op::MatMul(a, w) => {
                    let (av, wv) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
                    let (b, iin) = (av.rows(), av.cols());
                    let o = wv.cols();
                    {
                        let da = ensure(&mut grads, a.0, av.shape());
                        for r in 0..b {
                            for k in 0..iin {
                                let mut acc = 0.0;
                                let wrow = wv.row(k);
                                let grow = &g.data()[r * o..(r + 1) * o];
                                for c in 0..o {
                                    acc += grow[c] * wrow[c];
                                }
                                da.data_mut()[r * iin + k] += acc;
                            }
                        }
                    }
                    {
                        let dw = ensure(&mut grads, w.0, wv.shape());
                        for r in 0..b {
                            let arow = av.row(r);
                            let grow = &g.data()[r * o..(r + 1) * o];
                            for (k, &ark) in arow.iter().enumerate() {
                                if ark == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw.data_mut()[k * o..(k + 1) * o];
                                for c in 0..o {
                                    drow[c] += ark * grow[c];
                                }
                            }
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    let (b, o) = {
                        let av = &self.nodes[a.0].value;
                        (av.rows(), av.cols())
                    };
                    add_into(&mut grads, a.0, &g);
                    let db = ensure(&mut grads, bias.0, &[o]);
                    for r in 0..b {
                        for c in 0..o {
                            db.data_mut()[c] += g.data()[r * o + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, a.0, &g);
                    add_into(&mut grads, b.0, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, a.0, &g);
                    let shape = self.nodes[b.0].value.shape().to_vec();
                    let db = ensure(&mut grads, b.0, &shape);
                    for (d, &gv) in db.data_mut().iter_mut().zip(g.data()) {
                        *d -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b.0].value.clone();
                    let av = self.nodes[a.0].value.clone();
                    {
                        let da = ensure(&mut grads, a.0, av.shape());
                        for ((d, &gv), &ov) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *d += gv * ov;
                        }
                    }
                    {
                        let db = ensure(&mut grads, b.0, bv.shape());
                        for ((d, &gv), &ov) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *d += gv * ov;
                        }
                    }
                }
                Op::MulColBroadcast(a, col) => {
                    let av = self.nodes[a.0].value.clone();
                    let cv = self.nodes[col.0].value.clone();
                    let (b, o) = (av.rows(), av.cols());
                    {
                        let da = ensure(&mut grads, a.0, av.shape());
                        for r in 0..b {
                            let s = cv.data()[r];
                            for c in 0..o {
                                da.data_mut()[r * o + c] += g.data()[r * o + c] * s;
                            }
                        }
                    }
                    {
                        let dc = ensure(&mut grads, col.0, &[b, 1]);
                        for r in 0..b {
                            let mut acc = 0.0;
                            for c in 0..o {
                                acc += g.data()[r * o + c] * av.data()[r * o + c];
                            }
                            dc.data_mut()[r] += acc;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let da = ensure(&mut grads, a.0, &shape);
                    for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * c;
                    }
                }
                Op::Relu(a) => {
                    let out = &self.nodes[i].value;
                    let shape = out.shape().to_vec();
                    let outd: Vec<f64> = out.data().to_vec();
                    let da = ensure(&mut grads, a.0, &shape);
                    for ((d, &gv), &ov) in da.data_mut().iter_mut().zip(g.data()).zip(&outd) {
                        if ov > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let out = self.nodes[i].value.clone();
                    let da = ensure(&mut grads, a.0, out.shape());
                    for ((d, &gv), &s) in da.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gv * s * (1.0 - s);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let out = self.nodes[i].value.clone();
                    let (b, e) = (out.rows(), out.cols());
                    let da = ensure(&mut grads, a.0, out.shape());
                    for r in 0..b {
                        let srow = out.row(r);
                        let grow = &g.data()[r * e..(r + 1) * e];
                        let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                        for c in 0..e {
                            da.data_mut()[r * e + c] += srow[c] * (grow[c] - dot);
                        }
                    }
                }
                Op::Conv1d { input, kernels, bias } => {
                    let iv = self.nodes[input.0].value.clone();
                    let kv = self.nodes[kernels.0].value.clone();
                    let (b, c_in, l) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
                    let (c_out, _, k) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                    let t_len = l - k + 1;
                    {
                        let di = ensure(&mut grads, input.0, iv.shape());
                        for bi in 0..b {
                            for o in 0..c_out {
                                for t in 0..t_len {
                                    let gv = g.data()[(bi * c_out + o) * t_len + t];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for c in 0..c_in {
                                        let ibase = (bi * c_in + c) * l + t;
                                        let kbase = (o * c_in + c) * k;
                                        for j in 0..k {
                                            di.data_mut()[ibase + j] += gv * kv.data()[kbase + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let dk = ensure(&mut grads, kernels.0, kv.shape());
                        for bi in 0..b {
                            for o in 0..c_out {
                                for t in 0..t_len {
                                    let gv = g.data()[(bi * c_out + o) * t_len + t];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for c in 0..c_in {
                                        let ibase = (bi * c_in + c) * l + t;
                                        let kbase = (o * c_in + c) * k;
                                        for j in 0..k {
                                            dk.data_mut()[kbase + j] += gv * iv.data()[ibase + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let db = ensure(&mut grads, bias.0, &[c_out]);
                        for bi in 0..b {
                            for o in 0..c_out {
                                for t in 0..t_len {
                                    db.data_mut()[o] += g.data()[(bi * c_out + o) * t_len + t];
                                }
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let da = ensure(&mut grads, a.0, &shape);
                    for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let b = self.nodes[parts[0].0].value.rows();
                    let total = self.nodes[i].value.cols();
                    let mut at = 0;
                    for p in &parts {
                        let c = self.nodes[p.0].value.cols();
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        let dp = ensure(&mut grads, p.0, &shape);
                        for r in 0..b {
                            for j in 0..c {
                                dp.data_mut()[r * c + j] += g.data()[r * total + at + j];
                            }
                        }
                        at += c;
                    }
                }
                Op::SliceCol(a, idx) => {
                    let (b, e) = {
                        let av = &self.nodes[a.0].value;
                        (av.rows(), av.cols())
                    };
                    let idx = *idx;
                    let da = ensure(&mut grads, a.0, &[b, e]);
                    for r in 0..b {
                        da.data_mut()[r * e + idx] += g.data()[r];
                    }
                }
                Op::MeanAll(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let n: usize = shape.iter().product::<usize>().max(1);
                    let gv = g.item() / n as f64;
                    let da = ensure(&mut grads, a.0, &shape);
                    for d in da.data_mut() {
                        *d += gv;
                    }
                }
                Op::BceLogitsMean { logits, labels, weights } => {
                    let lv = self.nodes[logits.0].value.clone();
                    let yv = self.nodes[labels.0].value.clone();
                    let wv = self.nodes[weights.0].value.clone();
                    let denom = wv.data().iter().sum::<f64>().max(1.0);
                    let gv = g.item();
                    let dl = ensure(&mut grads, logits.0, lv.shape());
                    for (((d, &l), &y), &w) in
                        dl.data_mut().iter_mut().zip(lv.data()).zip(yv.data()).zip(wv.data())
                    {
                        *d += gv * w * (sigmoid(l) - y) / denom;
                    }
                }
            }
        }
        Gradients { grads }
    }

    /// Add the gradients of every parameter leaf into the store (skipping
    /// frozen groups).
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads.grads[i].as_ref() {
                    store.add_grad(pid, g);
                }
            }
        }
    }
}

fn ensure<'a>(grads: &'a mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'a mut Tensor {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(shape));
    }
    grads[idx].as_mut().unwrap()
}

fn add_into(grads: &mut [Option<Tensor>], idx: usize, g: &Tensor) {
    match &mut grads[idx] {
        Some(t) => {
            for (d, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                *d += gv;
            }
        }
        None => grads[idx] = Some(g.clone()),
    }
}
