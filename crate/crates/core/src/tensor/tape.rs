use super::batchnorm::{self, BatchNormState, BnSaved, Mode};
use super::kernels::{self, ConvGeom};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: VarId,
        gamma: VarId,
        beta: VarId,
        saved: BnSaved<T>,
    },
    Linear {
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
    },
    LeakyRelu {
        input: VarId,
        slope: T,
    },
    Sigmoid {
        input: VarId,
    },
    ConcatChannels {
        a: VarId,
        b: VarId,
    },
    SliceChannels {
        input: VarId,
        start: usize,
    },
    ConcatBatch {
        a: VarId,
        b: VarId,
    },
    SliceBatch {
        input: VarId,
        start: usize,
    },
    DiffX {
        input: VarId,
    },
    DiffY {
        input: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        input: VarId,
        factor: T,
    },
    AddScalar {
        input: VarId,
    },
    Square {
        input: VarId,
    },
    Ln {
        input: VarId,
    },
    Clamp {
        input: VarId,
        lo: T,
        hi: T,
    },
    Sum {
        input: VarId,
    },
    GlobalAvgPool {
        input: VarId,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    pieces: Pieces,
}

/// Which side of the kink each LeakyReLU input lies on.
#[derive(Debug, Default)]
enum Pieces {
    #[default]
    Free,
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            pieces: Pieces::Free,
        }
    }

    /// Starts recording, per LeakyReLU call, which inputs are nonnegative.
    pub fn record_pieces(&mut self) {
        self.pieces = Pieces::Record(Vec::new());
    }

    /// Masks recorded since [`Tape::record_pieces`].
    pub fn take_pieces(&mut self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut self.pieces) {
            Pieces::Record(m) | Pieces::Replay(m, _) => m,
            Pieces::Free => Vec::new(),
        }
    }

    /// Makes later LeakyReLU calls use recorded masks instead of input signs,
    /// so the forward pass stays on one linear piece of the activation.
    pub fn replay_pieces(&mut self, masks: Vec<Vec<bool>>) {
        self.pieces = Pieces::Replay(masks, 0);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[VarId]) -> VarId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.leaf(value, false)
    }

    fn check_bias(&self, op: &'static str, bias: Option<VarId>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            let s = self.shape(b);
            if s.numel() != channels {
                return Err(Error::shape(op, format!("bias {} for {} output channels", s, channels)));
            }
        }
        Ok(())
    }

    /// Zero-padded cross-correlation; `weight` is `(c_out, c_in, k, k)`.
    pub fn conv2d(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if ws.c != xs.c || ws.h != ws.w {
            return Err(Error::shape(
                "conv2d",
                format!("input {} against weight {}", xs, ws),
            ));
        }
        let geom = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel of weight {} with stride {} pad {} does not fit input {}", ws, stride, pad, xs),
            )
        })?;
        self.check_bias("conv2d", bias, ws.n)?;
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &ins))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with respect to its
    /// input. `weight` is `(c_in, c_out, k, k)`, the same array a matching conv2d uses.
    pub fn conv2d_transpose(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if ws.n != xs.c || ws.h != ws.w {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input {} against weight {}", xs, ws),
            ));
        }
        let geom = kernels::transpose_geom(ws.c, xs.h, xs.w, ws.h, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d_transpose",
                format!("weight {} with stride {} pad {} yields no valid output for input {}", ws, stride, pad, xs),
            )
        })?;
        self.check_bias("conv2d_transpose", bias, ws.c)?;
        let out = kernels::conv_transpose_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(out, Op::ConvTranspose2d { input, weight, bias, geom }, &ins))
    }

    /// Batch normalization. `gamma`/`beta` are the recorded parameter leaves;
    /// `state` supplies the running statistics (updated in [`Mode::Train`]).
    pub fn batchnorm(
        &mut self,
        input: VarId,
        gamma: VarId,
        beta: VarId,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<VarId> {
        let (y, saved) = batchnorm::forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            state,
            mode,
        )?;
        Ok(self.push(y, Op::BatchNorm { input, gamma, beta, saved }, &[input, gamma, beta]))
    }

    /// Fully connected layer over flattened batch items; `weight` is `(out, in, 1, 1)`.
    pub fn linear(&mut self, input: VarId, weight: VarId, bias: Option<VarId>) -> Result<VarId> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if ws.c * ws.h * ws.w != xs.item_len() {
            return Err(Error::shape("linear", format!("input {} against weight {}", xs, ws)));
        }
        self.check_bias("linear", bias, ws.n)?;
        let y = kernels::linear_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)));
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(y, Op::Linear { input, weight, bias }, &ins))
    }

    pub fn leaky_relu(&mut self, input: VarId, slope: T) -> VarId {
        let x = &self.nodes[input.0].value;
        let y = match &mut self.pieces {
            Pieces::Replay(masks, next) if *next < masks.len() && masks[*next].len() == x.len() => {
                let m = &masks[*next];
                *next += 1;
                let mut y = x.clone();
                for (v, &pos) in y.data_mut().iter_mut().zip(m) {
                    if !pos {
                        *v = slope * *v;
                    }
                }
                y
            }
            Pieces::Record(masks) => {
                masks.push(x.data().iter().map(|&v| v >= T::zero()).collect());
                x.map(|v| if v >= T::zero() { v } else { slope * v })
            }
            _ => x.map(|v| if v >= T::zero() { v } else { slope * v }),
        };
        self.push(y, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn sigmoid(&mut self, input: VarId) -> VarId {
        let y = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, Op::Sigmoid { input }, &[input])
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape("concat_channels", format!("{} vs {}", sa, sb)));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (ia, ib) = (sa.item_len(), sb.item_len());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for n in 0..sa.n {
            data.extend_from_slice(&va[n * ia..(n + 1) * ia]);
            data.extend_from_slice(&vb[n * ib..(n + 1) * ib]);
        }
        let y = Tensor::from_vec([sa.n, sa.c + sb.c, sa.h, sa.w], data)?;
        Ok(self.push(y, Op::ConcatChannels { a, b }, &[a, b]))
    }

    pub fn slice_channels(&mut self, input: VarId, start: usize, len: usize) -> Result<VarId> {
        let y = self.value(input).slice_channels(start, len)?;
        Ok(self.push(y, Op::SliceChannels { input, start }, &[input]))
    }

    pub fn concat_batch(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let y = Tensor::concat_batch(&[self.value(a), self.value(b)])?;
        Ok(self.push(y, Op::ConcatBatch { a, b }, &[a, b]))
    }

    pub fn slice_batch(&mut self, input: VarId, start: usize, len: usize) -> Result<VarId> {
        let y = self.value(input).slice_batch(start, len)?;
        Ok(self.push(y, Op::SliceBatch { input, start }, &[input]))
    }

    /// Horizontal forward difference `x[.., j+1] - x[.., j]`; width shrinks by one.
    pub fn diff_x(&mut self, input: VarId) -> Result<VarId> {
        let s = self.shape(input);
        if s.w < 2 {
            return Err(Error::shape("diff_x", format!("width must be at least 2, got {}", s)));
        }
        let v = self.value(input);
        let mut y = Tensor::zeros([s.n, s.c, s.h, s.w - 1]);
        for (row_out, row_in) in y.data_mut().chunks_mut(s.w - 1).zip(v.data().chunks(s.w)) {
            for (j, o) in row_out.iter_mut().enumerate() {
                *o = row_in[j + 1] - row_in[j];
            }
        }
        Ok(self.push(y, Op::DiffX { input }, &[input]))
    }

    /// Vertical forward difference `x[.., i+1, :] - x[.., i, :]`; height shrinks by one.
    pub fn diff_y(&mut self, input: VarId) -> Result<VarId> {
        let s = self.shape(input);
        if s.h < 2 {
            return Err(Error::shape("diff_y", format!("height must be at least 2, got {}", s)));
        }
        let v = self.value(input);
        let mut y = Tensor::zeros([s.n, s.c, s.h - 1, s.w]);
        for (p_out, p_in) in y.data_mut().chunks_mut((s.h - 1) * s.w).zip(v.data().chunks(s.plane())) {
            for (o, (lo, hi)) in p_out.iter_mut().zip(p_in.iter().zip(&p_in[s.w..])) {
                *o = *hi - *lo;
            }
        }
        Ok(self.push(y, Op::DiffY { input }, &[input]))
    }

    fn binary(&mut self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{} vs {}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("add", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("sub", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: VarId, factor: T) -> VarId {
        let y = self.value(input).map(|v| v * factor);
        self.push(y, Op::Scale { input, factor }, &[input])
    }

    pub fn add_scalar(&mut self, input: VarId, value: T) -> VarId {
        let y = self.value(input).map(|v| v + value);
        self.push(y, Op::AddScalar { input }, &[input])
    }

    pub fn square(&mut self, input: VarId) -> VarId {
        let y = self.value(input).map(|v| v * v);
        self.push(y, Op::Square { input }, &[input])
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, input: VarId) -> Result<VarId> {
        let x = self.value(input);
        if x.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::InvalidArgument("ln of a non-positive value".into()));
        }
        let y = x.map(|v| v.ln());
        Ok(self.push(y, Op::Ln { input }, &[input]))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, input: VarId, lo: T, hi: T) -> VarId {
        let y = self.value(input).map(|v| v.max(lo).min(hi));
        self.push(y, Op::Clamp { input, lo, hi }, &[input])
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, input: VarId) -> VarId {
        let y = Tensor::scalar(self.value(input).sum());
        self.push(y, Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: VarId) -> VarId {
        let n = self.value(input).len();
        let s = self.sum(input);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Spatial mean per channel: `(n,c,h,w) -> (n,c,1,1)`.
    pub fn global_avg_pool(&mut self, input: VarId) -> VarId {
        let s = self.shape(input);
        let inv = T::one() / T::of(s.plane() as f64);
        let data = self
            .value(input)
            .data()
            .chunks(s.plane())
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec([s.n, s.c, 1, 1], data).expect("pooled shape");
        self.push(y, Op::GlobalAvgPool { input }, &[input])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::shape("backward", format!("loss must be (1,1,1,1), got {}", ls)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            for (target, g) in self.node_backward(node, &dy) {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, ids: &[Option<VarId>]) -> [bool; 3] {
        let w = |i: usize| ids[i].is_some_and(|v| self.nodes[v.0].needs_grad);
        [w(0), w(1), w(2)]
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Vec<(VarId, Tensor<T>)> {
        let val = |id: VarId| &self.nodes[id.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } | Op::ConvTranspose2d { input, weight, bias, geom } => {
                let want = self.wants(&[Some(*input), Some(*weight), *bias]);
                let g = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward(val(*input), val(*weight), dy, geom, want)
                } else {
                    kernels::conv_transpose_backward(val(*input), val(*weight), dy, geom, want)
                };
                push_grads(&mut out, *input, *weight, *bias, g);
            }
            Op::Linear { input, weight, bias } => {
                let want = self.wants(&[Some(*input), Some(*weight), *bias]);
                let g = kernels::linear_backward(val(*input), val(*weight), dy, want);
                push_grads(&mut out, *input, *weight, *bias, g);
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (dx, dg, db) = batchnorm::backward(dy, val(*gamma), saved);
                out.push((*input, dx));
                out.push((*gamma, dg.reshape(val(*gamma).shape()).expect("gamma shape")));
                out.push((*beta, db.reshape(val(*beta).shape()).expect("beta shape")));
            }
            Op::LeakyRelu { input, slope } => {
                let g = val(*input).zip_map(dy, |x, d| if x >= T::zero() { d } else { *slope * d });
                out.push((*input, g));
            }
            Op::Sigmoid { input } => {
                let g = node.value.zip_map(dy, |y, d| d * y * (T::one() - y));
                out.push((*input, g));
            }
            Op::ConcatChannels { a, b } => {
                let ca = val(*a).shape().c;
                let cb = val(*b).shape().c;
                out.push((*a, dy.slice_channels(0, ca).expect("concat split")));
                out.push((*b, dy.slice_channels(ca, cb).expect("concat split")));
            }
            Op::SliceChannels { input, start } => {
                let s = val(*input).shape();
                let len = dy.shape().c;
                let mut g = Tensor::zeros(s);
                let plane = s.plane();
                for n in 0..s.n {
                    let dst = (n * s.c + start) * plane;
                    let src = n * len * plane;
                    g.data_mut()[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                out.push((*input, g));
            }
            Op::ConcatBatch { a, b } => {
                let na = val(*a).shape().n;
                let nb = val(*b).shape().n;
                out.push((*a, dy.slice_batch(0, na).expect("concat split")));
                out.push((*b, dy.slice_batch(na, nb).expect("concat split")));
            }
            Op::SliceBatch { input, start } => {
                let s = val(*input).shape();
                let mut g = Tensor::zeros(s);
                let off = start * s.item_len();
                g.data_mut()[off..off + dy.len()].copy_from_slice(dy.data());
                out.push((*input, g));
            }
            Op::DiffX { input } => {
                let s = val(*input).shape();
                let mut g = Tensor::zeros(s);
                for (gr, dr) in g.data_mut().chunks_mut(s.w).zip(dy.data().chunks(s.w - 1)) {
                    for (j, &d) in dr.iter().enumerate() {
                        gr[j + 1] += d;
                        gr[j] -= d;
                    }
                }
                out.push((*input, g));
            }
            Op::DiffY { input } => {
                let s = val(*input).shape();
                let mut g = Tensor::zeros(s);
                for (gp, dp) in g.data_mut().chunks_mut(s.plane()).zip(dy.data().chunks((s.h - 1) * s.w)) {
                    for (i, &d) in dp.iter().enumerate() {
                        gp[i + s.w] += d;
                        gp[i] -= d;
                    }
                }
                out.push((*input, g));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.map(|d| -d)));
            }
            Op::Mul { a, b } => {
                out.push((*a, dy.zip_map(val(*b), |d, y| d * y)));
                out.push((*b, dy.zip_map(val(*a), |d, x| d * x)));
            }
            Op::Scale { input, factor } => out.push((*input, dy.map(|d| d * *factor))),
            Op::AddScalar { input } => out.push((*input, dy.clone())),
            Op::Square { input } => {
                let two = T::of(2.0);
                out.push((*input, val(*input).zip_map(dy, |x, d| two * x * d)));
            }
            Op::Ln { input } => out.push((*input, val(*input).zip_map(dy, |x, d| d / x))),
            Op::Clamp { input, lo, hi } => {
                let g = val(*input).zip_map(dy, |x, d| if x < *lo || x > *hi { T::zero() } else { d });
                out.push((*input, g));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(val(*input).shape(), dy.item())));
            }
            Op::GlobalAvgPool { input } => {
                let s = val(*input).shape();
                let inv = T::one() / T::of(s.plane() as f64);
                let mut g = Tensor::zeros(s);
                for (p, &d) in g.data_mut().chunks_mut(s.plane()).zip(dy.data()) {
                    p.fill(d * inv);
                }
                out.push((*input, g));
            }
        }
        out
    }
}

fn push_grads<T: Scalar>(
    out: &mut Vec<(VarId, Tensor<T>)>,
    input: VarId,
    weight: VarId,
    bias: Option<VarId>,
    g: kernels::ConvGrads<T>,
) {
    if let Some(dx) = g.input {
        out.push((input, dx));
    }
    if let Some(dw) = g.weight {
        out.push((weight, dw));
    }
    if let (Some(b), Some(db)) = (bias, g.bias) {
        out.push((b, db));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_1x1_scales_and_shifts() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::scalar(3.0));
        let w = t.constant(Tensor::scalar(2.0));
        let b = t.constant(Tensor::column(vec![1.0]));
        let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(t.value(y).item(), 7.0);
    }

    #[test]
    fn conv_output_shapes() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros([1, 3, 64, 64]));
        let w = t.constant(Tensor::zeros([16, 3, 4, 4]));
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(t.shape(y), Shape::new(1, 16, 32, 32));
        let wt = t.constant(Tensor::zeros([16, 8, 4, 4]));
        let z = t.conv2d_transpose(y, wt, None, 2, 1).unwrap();
        assert_eq!(t.shape(z), Shape::new(1, 8, 64, 64));
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros([1, 3, 8, 8]));
        let w = t.constant(Tensor::zeros([4, 2, 3, 3]));
        let msg = t.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("(1,3,8,8)") && msg.contains("(4,2,3,3)"), "{msg}");
    }

    #[test]
    fn activations_at_reference_points() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::column(vec![-1.0, 0.0, 2.0]));
        let l = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(l).data(), &[-0.2, 0.0, 2.0]);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[1], 0.5);
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut t = Tape::<f32>::new();
        let a0 = Tensor::from_fn([1, 2, 4, 4], |i| i as f32);
        let b0 = Tensor::from_fn([1, 3, 4, 4], |i| -(i as f32));
        let a = t.constant(a0.clone());
        let b = t.constant(b0.clone());
        let ab = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(ab), Shape::new(1, 5, 4, 4));
        let a1 = t.slice_channels(ab, 0, 2).unwrap();
        let b1 = t.slice_channels(ab, 2, 3).unwrap();
        assert_eq!(t.value(a1), &a0);
        assert_eq!(t.value(b1), &b0);
        let c = t.constant(Tensor::zeros([1, 1, 4, 3]));
        assert!(t.concat_channels(a, c).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_fn([2, 3, 2, 2], |i| i as f64), true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones([2, 3, 2, 2]));
    }

    #[test]
    fn mean_squared_error_gradient_closed_form() {
        let mut t = Tape::<f64>::new();
        let xv = Tensor::from_fn([1, 2, 3, 3], |i| (i as f64 * 0.37).sin());
        let tv = Tensor::from_fn([1, 2, 3, 3], |i| (i as f64 * 0.11).cos());
        let x = t.leaf(xv.clone(), true);
        let tt = t.constant(tv.clone());
        let d = t.sub(x, tt).unwrap();
        let sq = t.square(d);
        let m = t.mean(sq);
        let g = t.backward(m).unwrap();
        let n = xv.len() as f64;
        let expect = xv.zip_map(&tv, |a, b| 2.0 * (a - b) / n);
        for (a, b) in g.get(x).unwrap().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        let y = t.square(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full([1, 1, 1, 3], 2.0), true);
        let w = t.leaf(Tensor::full([1, 1, 1, 3], 3.0), false);
        let p = t.mul(x, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0; 3]);
    }

    #[test]
    fn diff_x_of_row() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 4.0]).unwrap());
        let d = t.diff_x(x).unwrap();
        assert_eq!(t.value(d).data(), &[1.0, 2.0]);
        assert!(t.diff_y(x).is_err());
    }

    #[test]
    fn batchnorm_single_value_per_channel_rejected_in_training() {
        let mut t = Tape::<f64>::new();
        let mut st = BatchNormState::new(2);
        let x = t.constant(Tensor::zeros([1, 2, 1, 1]));
        let g = t.constant(st.gamma.clone());
        let b = t.constant(st.beta.clone());
        assert!(t.batchnorm(x, g, b, &mut st, Mode::Train).is_err());
        assert!(t.batchnorm(x, g, b, &mut st, Mode::Eval).is_ok());
    }
}
