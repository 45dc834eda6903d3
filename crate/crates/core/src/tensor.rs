//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation as a node whose inputs always have
//! smaller ids, so a single reverse sweep over node ids is a valid
//! topological order for [`Graph::backward`]. Only scalar-vs-tensor
//! broadcasting is supported; everything else needs equal shapes.
//!
//! ```
//! use tempest::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let x = g.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
//! let wx = g.mul(w, x).unwrap();
//! let loss = g.sum(wx);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

use std::sync::Arc;

use crate::error::{invalid, Error, Result};

/// Negative-side slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(invalid!("tensor rank must be 1..=4, got {}", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(invalid!("expected a rank-4 [N,C,H,W] tensor, got {:?}", self.shape)),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Softplus,
    LeakyRelu,
    Sigmoid,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// A fixed linear map on flattened data, usable as a graph node.
///
/// The backward pass of the node is `adjoint`, so an implementation is
/// only correct if `<apply(x), u> == <x, adjoint(u)>`.
pub trait LinearMap: Send + Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn adjoint(&self, y: &[f64], out: &mut [f64]);
}

enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    Reduce(ReduceOp, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize, cols: Vec<Vec<f64>> },
    ChannelBias { input: Var, bias: Var },
    ChannelScale { input: Var, scale: Var },
    ChannelNorm { input: Var, inv_std: Vec<f64> },
    Upsample2x(Var),
    Concat(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    Reshape(Var),
    Linear(Var, Arc<dyn LinearMap>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node, in creation (topological) order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The elementwise operation that produced `v`, if any.
    pub fn unary_op(&self, v: Var) -> Option<UnaryOp> {
        match &self.nodes[v.0].op {
            Op::Unary(op, _) => Some(*op),
            _ => None,
        }
    }

    /// Ids of the inputs of `v`, in call order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Reduce(_, a)
            | Op::Upsample2x(a)
            | Op::Reshape(a)
            | Op::Linear(a, _) => vec![*a],
            Op::SliceChannels { input, .. } | Op::ChannelNorm { input, .. } => vec![*input],
            Op::ChannelScale { input, scale } => vec![*input, *scale],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::Concat(vs) => vs.clone(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let out = match op {
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Log => {
                if let Some(bad) = x.data.iter().find(|v| v.is_nan() || **v <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                x.map(f64::ln)
            }
            UnaryOp::Softplus => x.map(softplus),
            UnaryOp::LeakyRelu => x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            UnaryOp::Sigmoid => x.map(sigmoid),
            UnaryOp::Square => x.map(|v| v * v),
            UnaryOp::Neg => x.map(|v| -v),
        };
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Unary(op, a), out, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a).expect("softplus is total")
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::LeakyRelu, a).expect("leaky relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a).expect("square is total")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a).expect("neg is total")
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |p: f64, q: f64| match op {
            BinaryOp::Add => p + q,
            BinaryOp::Sub => p - q,
            BinaryOp::Mul => p * q,
        };
        let out = if x.shape == y.shape {
            let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
            Tensor { shape: x.shape.clone(), data }
        } else if y.is_scalar() {
            let q = y.item();
            x.map(|p| f(p, q))
        } else if x.is_scalar() {
            let p = x.item();
            y.map(|q| f(p, q))
        } else {
            return Err(invalid!("shape mismatch {:?} vs {:?}", x.shape, y.shape));
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Binary(op, a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `alpha * a` for a constant `alpha`.
    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| alpha * v);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, alpha), out, rg)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s: f64 = x.data.iter().sum();
        let v = match op {
            ReduceOp::Sum => s,
            ReduceOp::Mean => s / x.len() as f64,
        };
        let rg = self.needs(&[a]);
        self.push(Op::Reduce(op, a), Tensor::scalar(v), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Cross-correlation of `input` `[N,C,H,W]` with `kernel` `[O,C,k,k]`.
    ///
    /// Output extent is `(H + 2 pad - k) / stride + 1` (floor), zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let kt = &self.nodes[kernel.0].value;
        let [n, c, h, w] = x.dims4()?;
        let [o, kc, kh, kw] = kt.dims4()?;
        if kc != c || kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(invalid!(
                "conv2d kernel {:?} incompatible with input {:?} (stride {stride})",
                kt.shape,
                x.shape
            ));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(invalid!("conv2d kernel {k} larger than padded input {h}x{w}"));
        }
        let geom = ConvGeom { c, h, w, k, stride, pad };
        let (oh, ow) = geom.out_dims();
        let rows = c * k * k;
        let cols_n = oh * ow;
        let mut out = vec![0.0; n * o * cols_n];
        let mut saved = Vec::with_capacity(n);
        for b in 0..n {
            let img = &x.data[b * c * h * w..(b + 1) * c * h * w];
            let cols = geom.im2col(img);
            gemm(
                o,
                rows,
                cols_n,
                &kt.data,
                (rows as isize, 1),
                &cols,
                (cols_n as isize, 1),
                &mut out[b * o * cols_n..(b + 1) * o * cols_n],
                0.0,
            );
            saved.push(cols);
        }
        let rg = self.needs(&[input, kernel]);
        let value = Tensor { shape: vec![n, o, oh, ow], data: out };
        Ok(self.push(Op::Conv2d { input, kernel, stride, pad, cols: saved }, value, rg))
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let b = &self.nodes[bias.0].value;
        let [n, c, h, w] = x.dims4()?;
        if b.len() != c {
            return Err(invalid!("bias of length {} for {c} channels", b.len()));
        }
        let plane = h * w;
        let mut data = x.data.clone();
        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                data[off..off + plane].iter_mut().for_each(|v| *v += b.data[ci]);
            }
        }
        let rg = self.needs(&[input, bias]);
        Ok(self.push(Op::ChannelBias { input, bias }, Tensor { shape: x.shape.clone(), data }, rg))
    }

    /// Multiplies every pixel of channel `c` by `scale[c]`.
    pub fn mul_channel(&mut self, input: Var, scale: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let s = &self.nodes[scale.0].value;
        let [n, c, h, w] = x.dims4()?;
        if s.len() != c {
            return Err(invalid!("scale of length {} for {c} channels", s.len()));
        }
        let plane = h * w;
        let mut data = x.data.clone();
        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                data[off..off + plane].iter_mut().for_each(|v| *v *= s.data[ci]);
            }
        }
        let rg = self.needs(&[input, scale]);
        Ok(self.push(Op::ChannelScale { input, scale }, Tensor { shape: x.shape.clone(), data }, rg))
    }

    /// Normalises every `(sample, channel)` plane to zero mean and unit
    /// variance: `(x - mean) / sqrt(var + eps)`, biased variance.
    pub fn channel_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let [_, _, h, w] = x.dims4()?;
        if eps.is_nan() || eps <= 0.0 {
            return Err(invalid!("normalisation eps must be positive, got {eps}"));
        }
        let plane = h * w;
        let mut data = x.data.clone();
        let mut inv_std = Vec::with_capacity(x.len() / plane);
        for p in data.chunks_exact_mut(plane) {
            let mean = p.iter().sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            p.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Op::ChannelNorm { input, inv_std }, Tensor { shape: x.shape.clone(), data }, rg))
    }

    /// Nearest-neighbour 2x upsampling of a `[N,C,H,W]` tensor.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let [n, c, h, w] = x.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x.data[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Op::Upsample2x(input), Tensor { shape: vec![n, c, h2, w2], data }, rg))
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self
            .nodes
            .get(inputs.first().ok_or_else(|| invalid!("concat of nothing"))?.0)
            .expect("valid var")
            .value
            .dims4()?;
        let [n, _, h, w] = first;
        let mut total = 0;
        for v in inputs {
            let [ni, ci, hi, wi] = self.nodes[v.0].value.dims4()?;
            if ni != n || hi != h || wi != w {
                return Err(invalid!("concat spatial mismatch"));
            }
            total += ci;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let ci = t.shape[1];
                data.extend_from_slice(&t.data[b * ci * plane..(b + 1) * ci * plane]);
            }
        }
        let rg = self.needs(inputs);
        Ok(self.push(Op::Concat(inputs.to_vec()), Tensor { shape: vec![n, total, h, w], data }, rg))
    }

    /// Channels `start..start + len` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let [n, c, h, w] = x.dims4()?;
        if start + len > c || len == 0 {
            return Err(invalid!("channel slice {start}..{} of {c}", start + len));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            data.extend_from_slice(&x.data[off..off + len * plane]);
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Op::SliceChannels { input, start }, Tensor { shape: vec![n, len, h, w], data }, rg))
    }

    /// Applies a [`LinearMap`] to the flattened value of `input`.
    pub fn linear(&mut self, input: Var, map: Arc<dyn LinearMap>, out_shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if x.len() != map.input_len() || out_shape.iter().product::<usize>() != map.output_len() {
            return Err(invalid!(
                "linear map {}->{} applied to {:?} -> {:?}",
                map.input_len(),
                map.output_len(),
                x.shape,
                out_shape
            ));
        }
        let mut out = vec![0.0; map.output_len()];
        map.apply(&x.data, &mut out);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::Linear(input, map), value, rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(invalid!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &gout, &mut grads);
            }
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = val(*a);
                let y = &node.value;
                let g: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let (xi, yi, gi) = (x.data[i], y.data[i], gout.data[i]);
                        gi * match op {
                            UnaryOp::Exp => yi,
                            UnaryOp::Log => 1.0 / xi,
                            UnaryOp::Softplus => sigmoid(xi),
                            UnaryOp::LeakyRelu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    LEAKY_SLOPE
                                }
                            }
                            UnaryOp::Sigmoid => yi * (1.0 - yi),
                            UnaryOp::Square => 2.0 * xi,
                            UnaryOp::Neg => -1.0,
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Binary(op, a, b) => {
                let (x, y) = (val(*a), val(*b));
                let n = node.value.len();
                let xa = |i: usize| if x.is_scalar() { x.data[0] } else { x.data[i] };
                let yb = |i: usize| if y.is_scalar() { y.data[0] } else { y.data[i] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|i| {
                        let g = gout.data[i];
                        match op {
                            BinaryOp::Add => (g, g),
                            BinaryOp::Sub => (g, -g),
                            BinaryOp::Mul => (g * yb(i), g * xa(i)),
                        }
                    })
                    .unzip();
                let fold = |t: &Tensor, g: Vec<f64>| {
                    if t.len() == n {
                        g
                    } else {
                        vec![g.iter().sum()]
                    }
                };
                let (ga, gb) = (fold(x, ga), fold(y, gb));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, alpha) => {
                self.accumulate(grads, *a, gout.data.iter().map(|g| alpha * g).collect());
            }
            Op::Reduce(op, a) => {
                let n = val(*a).len();
                let g = match op {
                    ReduceOp::Sum => gout.item(),
                    ReduceOp::Mean => gout.item() / n as f64,
                };
                self.accumulate(grads, *a, vec![g; n]);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gout.data.clone()),
            Op::Conv2d { input, kernel, stride, pad, cols } => {
                let x = val(*input);
                let kt = val(*kernel);
                let [n, c, h, w] = x.dims4().expect("checked in forward");
                let o = kt.shape[0];
                let k = kt.shape[2];
                let geom = ConvGeom { c, h, w, k, stride: *stride, pad: *pad };
                let (oh, ow) = geom.out_dims();
                let rows = c * k * k;
                let p = oh * ow;
                if self.nodes[kernel.0].requires_grad {
                    let mut gk = vec![0.0; o * rows];
                    for (b, col) in cols.iter().enumerate() {
                        // gk += gout_b (o x p) * col^T (p x rows)
                        gemm(
                            o,
                            p,
                            rows,
                            &gout.data[b * o * p..(b + 1) * o * p],
                            (p as isize, 1),
                            col,
                            (1, p as isize),
                            &mut gk,
                            1.0,
                        );
                    }
                    self.accumulate(grads, *kernel, gk);
                }
                if self.nodes[input.0].requires_grad {
                    let mut gx = vec![0.0; n * c * h * w];
                    let mut gcols = vec![0.0; rows * p];
                    for b in 0..n {
                        // gcols = kernel^T (rows x o) * gout_b (o x p)
                        gemm(
                            rows,
                            o,
                            p,
                            &kt.data,
                            (1, rows as isize),
                            &gout.data[b * o * p..(b + 1) * o * p],
                            (p as isize, 1),
                            &mut gcols,
                            0.0,
                        );
                        geom.col2im(&gcols, &mut gx[b * c * h * w..(b + 1) * c * h * w]);
                    }
                    self.accumulate(grads, *input, gx);
                }
            }
            Op::ChannelBias { input, bias } => {
                let [n, c, h, w] = gout.dims4().expect("rank 4");
                let plane = h * w;
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for (ci, acc) in gb.iter_mut().enumerate() {
                        let off = (b * c + ci) * plane;
                        *acc += gout.data[off..off + plane].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, *input, gout.data.clone());
                self.accumulate(grads, *bias, gb);
            }
            Op::ChannelScale { input, scale } => {
                let x = val(*input);
                let s = val(*scale);
                let [n, c, h, w] = gout.dims4().expect("rank 4");
                let plane = h * w;
                let mut gs = vec![0.0; c];
                let mut gx = gout.data.clone();
                for b in 0..n {
                    for (ci, gsc) in gs.iter_mut().enumerate() {
                        let off = (b * c + ci) * plane;
                        let range = off..off + plane;
                        *gsc += gout.data[range.clone()].iter().zip(&x.data[range.clone()]).map(|(g, v)| g * v).sum::<f64>();
                        gx[range].iter_mut().for_each(|g| *g *= s.data[ci]);
                    }
                }
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *scale, gs);
            }
            Op::ChannelNorm { input, inv_std } => {
                let y = &node.value;
                let plane = y.shape[2] * y.shape[3];
                let mut gx = vec![0.0; y.len()];
                for (p, &is) in inv_std.iter().enumerate() {
                    let range = p * plane..(p + 1) * plane;
                    let (g, yh) = (&gout.data[range.clone()], &y.data[range.clone()]);
                    let g_mean = g.iter().sum::<f64>() / plane as f64;
                    let gy_mean = g.iter().zip(yh).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                    for ((dst, &gi), &yi) in gx[range].iter_mut().zip(g).zip(yh) {
                        *dst = is * (gi - g_mean - yi * gy_mean);
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Upsample2x(a) => {
                let [n, c, h, w] = val(*a).dims4().expect("rank 4");
                let w2 = 2 * w;
                let mut g = vec![0.0; n * c * h * w];
                for pl in 0..n * c {
                    let src = &gout.data[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                    let dst = &mut g[pl * h * w..(pl + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..w2 {
                            dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Concat(inputs) => {
                let [n, total, h, w] = gout.dims4().expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for v in inputs {
                    let ci = val(*v).shape[1];
                    if self.nodes[v.0].requires_grad {
                        let mut g = Vec::with_capacity(n * ci * plane);
                        for b in 0..n {
                            let off = (b * total + offset) * plane;
                            g.extend_from_slice(&gout.data[off..off + ci * plane]);
                        }
                        self.accumulate(grads, *v, g);
                    }
                    offset += ci;
                }
            }
            Op::SliceChannels { input, start } => {
                let [n, c, h, w] = val(*input).dims4().expect("rank 4");
                let len = gout.shape[1];
                let plane = h * w;
                let mut g = vec![0.0; n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    g[dst..dst + len * plane].copy_from_slice(&gout.data[src..src + len * plane]);
                }
                self.accumulate(grads, *input, g);
            }
            Op::Linear(a, map) => {
                let mut g = vec![0.0; map.input_len()];
                map.adjoint(&gout.data, &mut g);
                self.accumulate(grads, *a, g);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.data.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(Tensor { shape: node.value.shape.clone(), data: g }),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Unfolds one `[C,H,W]` image into `[C*k*k, OH*OW]`.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_dims();
        let Self { c, h, w, k, stride, pad } = *self;
        let mut cols = vec![0.0; c * k * k * oh * ow];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &img[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[oi * ow + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`], accumulating into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (oh, ow) = self.out_dims();
        let Self { c, h, w, k, stride, pad } = *self;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = (ci * h + ii as usize) * w;
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                img[base + jj as usize] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
