//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node that
//! transitively depends on a [`Tape::leaf`]. Constants never receive gradients,
//! which is how frozen parameters are expressed.

use crate::conv;
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along image rows (vertical neighbours).
    Height,
    /// Along image columns (horizontal neighbours).
    Width,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<u32>,
    },
    ConcatChannels(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Diff(Var, Axis),
    Stencil3x3(Var, [T; 9]),
    ChannelMix(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn unbroadcast_check<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies the current value of `v` onto the tape as a constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        unbroadcast_check(va, vb, name);
        let value = va.zip_map(vb, f);
        let tracked = self.tracked_any(&[a, b]);
        self.push(value, op, tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.nodes[a.0].tracked;
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    /// Zero-padded convolution, see [`conv::conv2d_forward`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked_any(&deps);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, tracked)
    }

    /// Transposed convolution, see [`conv::conv_transpose2d_forward`].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, output_pad: usize) -> Var {
        let value = conv::conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, output_pad);
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked_any(&deps);
        self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, tracked)
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Var {
        let (value, argmax) = conv::max_pool2x2_forward(self.value(x));
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::MaxPool2x2 { x, argmax }, tracked)
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let (n, _, h, w) = self.value(parts[0]).dims4().expect("concat needs rank-4 tensors");
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4().expect("concat needs rank-4 tensors");
            assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched batch or spatial dims");
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], data).unwrap();
        let tracked = self.tracked_any(parts);
        self.push(value, Op::ConcatChannels(parts.to_vec()), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let tracked = self.nodes[a.0].tracked;
        self.push(value, Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let tracked = self.nodes[a.0].tracked;
        self.push(value, Op::Mean(a), tracked)
    }

    /// Forward difference `x[i+1] - x[i]` along one spatial axis; that axis shrinks by one.
    pub fn diff(&mut self, a: Var, axis: Axis) -> Var {
        let v = self.value(a);
        let (n, c, h, w) = v.dims4().expect("diff needs rank-4 tensors");
        let src = v.data();
        let value = match axis {
            Axis::Width => {
                assert!(w >= 2, "diff along width needs at least two columns");
                let mut out = Vec::with_capacity(n * c * h * (w - 1));
                for row in src.chunks(w) {
                    out.extend(row.windows(2).map(|p| p[1] - p[0]));
                }
                Tensor::from_vec(&[n, c, h, w - 1], out).unwrap()
            }
            Axis::Height => {
                assert!(h >= 2, "diff along height needs at least two rows");
                let mut out = Vec::with_capacity(n * c * (h - 1) * w);
                for plane in src.chunks(h * w) {
                    for y in 0..h - 1 {
                        out.extend((0..w).map(|x| plane[(y + 1) * w + x] - plane[y * w + x]));
                    }
                }
                Tensor::from_vec(&[n, c, h - 1, w], out).unwrap()
            }
        };
        let tracked = self.nodes[a.0].tracked;
        self.push(value, Op::Diff(a, axis), tracked)
    }

    /// Per-channel 3x3 correlation with replicated borders. `kernel` is row-major,
    /// `kernel[4]` is the centre tap.
    pub fn stencil3x3(&mut self, a: Var, kernel: [T; 9]) -> Var {
        let v = self.value(a);
        let (n, c, h, w) = v.dims4().expect("stencil needs rank-4 tensors");
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for (src, dst) in v.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
            stencil_plane(src, dst, h, w, &kernel);
        }
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::Stencil3x3(a, kernel), tracked)
    }

    /// Weighted sum over channels: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mix(&mut self, a: Var, weights: &[T]) -> Var {
        let v = self.value(a);
        let (n, c, h, w) = v.dims4().expect("channel_mix needs rank-4 tensors");
        assert_eq!(weights.len(), c, "channel_mix: {} weights for {c} channels", weights.len());
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        for s in 0..n {
            let dst = &mut out.data_mut()[s * plane..(s + 1) * plane];
            for (ch, &wt) in weights.iter().enumerate() {
                let src = &v.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += wt * x;
                }
            }
        }
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::ChannelMix(a, weights.to_vec()), tracked)
    }

    /// Back-propagates from the scalar `loss` (seeded with 1).
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |d, y| d * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |d, x| d * x));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.wants(*a) {
                    acc(*a, g.zip_map(vb, |d, y| d / y));
                }
                if self.wants(*b) {
                    // d(x/y)/dy = -out / y
                    let t = g.zip_map(&node.value, |d, o| d * o).zip_map(vb, |p, y| -p / y);
                    acc(*b, t);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let c = *c;
                    acc(*a, g.map(|d| d * c));
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let two = T::of(2.0);
                    acc(*a, g.zip_map(self.value(*a), |d, x| two * x * d));
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*a), |d, x| d * sign(x)));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() }));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants(*a) {
                    let s = *slope;
                    acc(*a, g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { d * s }));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(&node.value, |d, y| d * (T::one() - y * y)));
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(&node.value, |d, y| d * y * (T::one() - y)));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let (dx, dw, db) = conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, want);
                if let Some(t) = dx {
                    acc(*x, t);
                }
                if let Some(t) = dw {
                    acc(*w, t);
                }
                if let (Some(t), Some(b)) = (db, b) {
                    acc(*b, t);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let (dx, dw, db) = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, want);
                if let Some(t) = dx {
                    acc(*x, t);
                }
                if let Some(t) = dw {
                    acc(*w, t);
                }
                if let (Some(t), Some(b)) = (db, b) {
                    acc(*b, t);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let dst = dx.data_mut();
                    for (&src, &d) in argmax.iter().zip(g.data()) {
                        dst[src as usize] += d;
                    }
                    acc(*x, dx);
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, total_c, h, w) = node.value.dims4().unwrap();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let start = (s * total_c + offset) * plane;
                            data.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        acc(p, Tensor::from_vec(self.shape(p), data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    acc(*a, Tensor::full(self.shape(*a), g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = T::of(self.value(*a).numel() as f64);
                    acc(*a, Tensor::full(self.shape(*a), g.item() / n));
                }
            }
            Op::Diff(a, axis) => {
                if self.wants(*a) {
                    let (n, c, h, w) = self.value(*a).dims4().unwrap();
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let dst = dx.data_mut();
                    match axis {
                        Axis::Width => {
                            for (row, grow) in dst.chunks_mut(w).zip(g.data().chunks(w - 1)) {
                                for (j, &d) in grow.iter().enumerate() {
                                    row[j + 1] += d;
                                    row[j] -= d;
                                }
                            }
                        }
                        Axis::Height => {
                            for (plane, gplane) in dst.chunks_mut(h * w).zip(g.data().chunks((h - 1) * w)) {
                                for y in 0..h - 1 {
                                    for x in 0..w {
                                        let d = gplane[y * w + x];
                                        plane[(y + 1) * w + x] += d;
                                        plane[y * w + x] -= d;
                                    }
                                }
                            }
                        }
                    }
                    acc(*a, dx);
                }
            }
            Op::Stencil3x3(a, kernel) => {
                if self.wants(*a) {
                    let (_, _, h, w) = self.value(*a).dims4().unwrap();
                    let mut dx = Tensor::zeros(self.shape(*a));
                    for (gsrc, dst) in g.data().chunks(h * w).zip(dx.data_mut().chunks_mut(h * w)) {
                        stencil_plane_adjoint(gsrc, dst, h, w, kernel);
                    }
                    acc(*a, dx);
                }
            }
            Op::ChannelMix(a, weights) => {
                if self.wants(*a) {
                    let (n, c, h, w) = self.value(*a).dims4().unwrap();
                    let plane = h * w;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for s in 0..n {
                        let gs = &g.data()[s * plane..(s + 1) * plane];
                        for (ch, &wt) in weights.iter().enumerate() {
                            let dst = &mut dx.data_mut()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                            for (d, &gv) in dst.iter_mut().zip(gs) {
                                *d = wt * gv;
                            }
                        }
                    }
                    acc(*a, dx);
                }
            }
        }
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn stencil_plane<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, k: &[T; 9]) {
    for y in 0..h {
        let rows = [clamp_index(y as isize - 1, h), y, clamp_index(y as isize + 1, h)];
        for x in 0..w {
            let cols = [clamp_index(x as isize - 1, w), x, clamp_index(x as isize + 1, w)];
            let mut acc = T::zero();
            for (ki, &r) in rows.iter().enumerate() {
                for (kj, &c) in cols.iter().enumerate() {
                    acc += k[ki * 3 + kj] * src[r * w + c];
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

fn stencil_plane_adjoint<T: Scalar>(g: &[T], dst: &mut [T], h: usize, w: usize, k: &[T; 9]) {
    for y in 0..h {
        let rows = [clamp_index(y as isize - 1, h), y, clamp_index(y as isize + 1, h)];
        for x in 0..w {
            let cols = [clamp_index(x as isize - 1, w), x, clamp_index(x as isize + 1, w)];
            let d = g[y * w + x];
            for (ki, &r) in rows.iter().enumerate() {
                for (kj, &c) in cols.iter().enumerate() {
                    dst[r * w + c] += k[ki * 3 + kj] * d;
                }
            }
        }
    }
}
