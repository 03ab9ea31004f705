use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::pointwise;
use super::Array;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    graph: u64,
    id: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding keeping the spatial size.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Storage precision for values produced in an inference graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    /// Every op output is rounded to `f32`.
    Single,
}

/// Per-class multipliers of the focal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub background: f64,
    pub vessel: f64,
}

impl ClassWeights {
    pub fn uniform(alpha: f64) -> Self {
        Self {
            background: alpha,
            vessel: alpha,
        }
    }

    /// Inverse class frequency over the masked pixels, scaled so the mean
    /// per-pixel weight is one. Falls back to uniform weights when a class is
    /// absent.
    pub fn balanced(label: &[f64], mask: &[f64]) -> Self {
        let (mut n0, mut n1) = (0usize, 0usize);
        for (&l, &m) in label.iter().zip(mask) {
            if m > 0.0 {
                if l > 0.5 {
                    n1 += 1;
                } else {
                    n0 += 1;
                }
            }
        }
        if n0 == 0 || n1 == 0 {
            return Self::uniform(1.0);
        }
        let n = (n0 + n1) as f64;
        Self {
            background: n / (2.0 * n0 as f64),
            vessel: n / (2.0 * n1 as f64),
        }
    }
}

/// Constant targets of a focal-loss node, each `[N, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct FocalTarget {
    pub label: Array,
    pub weight: Array,
    pub mask: Array,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        ph: usize,
        pw: usize,
    },
    PadReflect {
        input: usize,
        pad: usize,
    },
    Act {
        input: usize,
        kind: Activation,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    SliceChannels {
        input: usize,
        start: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale {
        input: usize,
        factor: f64,
    },
    Exp {
        input: usize,
    },
    Sum {
        input: usize,
    },
    SumSquares {
        input: usize,
    },
    MaxOf {
        inputs: Vec<usize>,
        argmax: Vec<u8>,
    },
    SoftmaxChannels {
        input: usize,
    },
    Eig2x2 {
        hxx: usize,
        hxy: usize,
        hyy: usize,
    },
    Vesselness {
        lambdas: usize,
        beta: usize,
        c: usize,
    },
    Focal {
        prob: usize,
        target: Box<FocalTarget>,
        gamma: f64,
        weights: ClassWeights,
        normalizer: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::PadReflect { .. } => "pad_reflect",
            Op::Act { .. } => "activation",
            Op::MaxPool2 { .. } => "pool_down",
            Op::Upsample2 { .. } => "upsample",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::Exp { .. } => "exp",
            Op::Sum { .. } => "sum",
            Op::SumSquares { .. } => "sum_squares",
            Op::MaxOf { .. } => "max_of",
            Op::SoftmaxChannels { .. } => "softmax",
            Op::Eig2x2 { .. } => "eig2x2",
            Op::Vesselness { .. } => "vesselness",
            Op::Focal { .. } => "focal_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record. Inputs always precede their consumers, so
/// a reverse sweep over the node list is a valid backward order.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    track: bool,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            track: true,
            precision: Precision::Double,
        }
    }

    /// A graph that never records gradients.
    pub fn inference(precision: Precision) -> Self {
        Self {
            track: false,
            precision,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Array) -> Result<Tensor> {
        self.leaf(value, false)
    }

    /// Trainable leaf. In an inference graph this is a constant.
    pub fn param(&mut self, value: Array) -> Result<Tensor> {
        let track = self.track;
        self.leaf(value, track)
    }

    fn leaf(&mut self, mut value: Array, requires_grad: bool) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        if self.precision == Precision::Single {
            value.round_to_f32();
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(self.handle(self.nodes.len() - 1))
    }

    fn handle(&self, id: usize) -> Tensor {
        Tensor { graph: self.id, id }
    }

    fn check(&self, t: Tensor) -> Result<usize> {
        if t.graph != self.id || t.id >= self.nodes.len() {
            return Err(Error::ForeignTensor);
        }
        Ok(t.id)
    }

    pub fn value(&self, t: Tensor) -> Result<&Array> {
        let id = self.check(t)?;
        Ok(&self.nodes[id].value)
    }

    pub fn requires_grad(&self, t: Tensor) -> Result<bool> {
        let id = self.check(t)?;
        Ok(self.nodes[id].requires_grad)
    }

    fn push(&mut self, mut value: Array, op: Op, inputs: &[usize]) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        if self.precision == Precision::Single {
            value.round_to_f32();
        }
        let requires_grad = self.track && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.handle(self.nodes.len() - 1))
    }

    fn v(&self, id: usize) -> &Array {
        &self.nodes[id].value
    }

    fn conv_geom(&self, input: usize, kernel: usize, ph: usize, pw: usize) -> Result<ConvGeom> {
        let (n, c, h, w) = self.v(input).dims4("conv2d")?;
        let (f, kc, kh, kw) = self.v(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels ({c}) differ from kernel channels ({kc})"),
            ));
        }
        let oh = (h + 2 * ph).checked_sub(kh - 1).filter(|&v| v > 0);
        let ow = (w + 2 * pw).checked_sub(kw - 1).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input height {h} / width {w}"),
            ));
        };
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            ph,
            pw,
            oh,
            ow,
        })
    }

    pub fn conv2d(
        &mut self,
        input: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        padding: Padding,
    ) -> Result<Tensor> {
        let (xi, ki) = (self.check(input)?, self.check(kernel)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        let (f, _, kh, kw) = self.v(ki).dims4("conv2d")?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel height {kh} and width {kw} must be odd"),
            ));
        }
        if let Some(b) = bi {
            if self.v(b).shape() != [f] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {f} filters", self.v(b).shape()),
                ));
            }
        }
        let (ph, pw) = match padding {
            Padding::Same => (kh / 2, kw / 2),
            Padding::Valid => (0, 0),
        };
        let geom = self.conv_geom(xi, ki, ph, pw)?;
        let out = kernels::conv2d_forward(self.v(xi), self.v(ki), bi.map(|b| self.v(b)), &geom);
        let mut inputs = vec![xi, ki];
        inputs.extend(bi);
        self.push(
            out,
            Op::Conv2d {
                input: xi,
                kernel: ki,
                bias: bi,
                ph,
                pw,
            },
            &inputs,
        )
    }

    /// Mirror padding of the two spatial dimensions (edge pixel not repeated).
    pub fn pad_reflect(&mut self, input: Tensor, pad: usize) -> Result<Tensor> {
        let xi = self.check(input)?;
        let (n, c, h, w) = self.v(xi).dims4("pad_reflect")?;
        if pad >= h || pad >= w {
            return Err(Error::shape(
                "pad_reflect",
                format!("padding {pad} needs height and width above {pad}, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let x = self.v(xi).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &x[p * h * w..][..h * w];
            for y in 0..oh {
                let sy = kernels::reflect_index(y as isize - pad as isize, h);
                for xo in 0..ow {
                    let sx = kernels::reflect_index(xo as isize - pad as isize, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        let out = Array::new(vec![n, c, oh, ow], out)?;
        self.push(out, Op::PadReflect { input: xi, pad }, &[xi])
    }

    pub fn activation(&mut self, input: Tensor, kind: Activation) -> Result<Tensor> {
        let xi = self.check(input)?;
        let out = self.v(xi).map(|x| kind.apply(x));
        self.push(out, Op::Act { input: xi, kind }, &[xi])
    }

    pub fn relu(&mut self, input: Tensor) -> Result<Tensor> {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Tensor) -> Result<Tensor> {
        self.activation(input, Activation::Tanh)
    }

    /// 2x2 max pooling with stride 2.
    pub fn pool_down(&mut self, input: Tensor) -> Result<Tensor> {
        let xi = self.check(input)?;
        let (n, c, h, w) = self.v(xi).dims4("pool_down")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "pool_down",
                format!("height {h} and width {w} must be even; pad the input first"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.v(xi).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let cands = [
                        base + 2 * y * w + 2 * xo,
                        base + 2 * y * w + 2 * xo + 1,
                        base + (2 * y + 1) * w + 2 * xo,
                        base + (2 * y + 1) * w + 2 * xo + 1,
                    ];
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Array::new(vec![n, c, oh, ow], out)?;
        self.push(out, Op::MaxPool2 { input: xi, argmax }, &[xi])
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample(&mut self, input: Tensor) -> Result<Tensor> {
        let xi = self.check(input)?;
        let (n, c, h, w) = self.v(xi).dims4("upsample")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.v(xi).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &x[p * h * w..][..h * w];
            for y in 0..oh {
                for xo in 0..ow {
                    out.push(plane[(y / 2) * w + xo / 2]);
                }
            }
        }
        let out = Array::new(vec![n, c, oh, ow], out)?;
        self.push(out, Op::Upsample2 { input: xi }, &[xi])
    }

    pub fn concat_channels(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (n, c1, h, w) = self.v(ai).dims4("concat_channels")?;
        let (n2, c2, h2, w2) = self.v(bi).dims4("concat_channels")?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/height/width differ: {n}x{h}x{w} vs {n2}x{h2}x{w2}"),
            ));
        }
        let plane = h * w;
        let (xa, xb) = (self.v(ai).data(), self.v(bi).data());
        let mut out = Vec::with_capacity(n * (c1 + c2) * plane);
        for s in 0..n {
            out.extend_from_slice(&xa[s * c1 * plane..][..c1 * plane]);
            out.extend_from_slice(&xb[s * c2 * plane..][..c2 * plane]);
        }
        let out = Array::new(vec![n, c1 + c2, h, w], out)?;
        self.push(out, Op::Concat { a: ai, b: bi }, &[ai, bi])
    }

    pub fn slice_channels(&mut self, input: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let xi = self.check(input)?;
        let (n, c, h, w) = self.v(xi).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} out of range for {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let x = self.v(xi).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            out.extend_from_slice(&x[(s * c + start) * plane..][..len * plane]);
        }
        let out = Array::new(vec![n, len, h, w], out)?;
        self.push(out, Op::SliceChannels { input: xi, start }, &[xi])
    }

    fn binary(
        &mut self,
        a: Tensor,
        b: Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Array, usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.v(ai).shape() != self.v(bi).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.v(ai).shape(), self.v(bi).shape()),
            ));
        }
        let data = self
            .v(ai)
            .data()
            .iter()
            .zip(self.v(bi).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Array::new(self.v(ai).shape().to_vec(), data)?, ai, bi))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out, ai, bi) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(ai, bi), &[ai, bi])
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out, ai, bi) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(ai, bi), &[ai, bi])
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (out, ai, bi) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(ai, bi), &[ai, bi])
    }

    pub fn scale(&mut self, input: Tensor, factor: f64) -> Result<Tensor> {
        let xi = self.check(input)?;
        let out = self.v(xi).map(|x| x * factor);
        self.push(out, Op::Scale { input: xi, factor }, &[xi])
    }

    pub fn exp(&mut self, input: Tensor) -> Result<Tensor> {
        let xi = self.check(input)?;
        let out = self.v(xi).map(f64::exp);
        self.push(out, Op::Exp { input: xi }, &[xi])
    }

    pub fn sum(&mut self, input: Tensor) -> Result<Tensor> {
        let xi = self.check(input)?;
        let out = Array::scalar(self.v(xi).sum());
        self.push(out, Op::Sum { input: xi }, &[xi])
    }

    pub fn mean(&mut self, input: Tensor) -> Result<Tensor> {
        let n = self.value(input)?.len() as f64;
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, input: Tensor) -> Result<Tensor> {
        let xi = self.check(input)?;
        let out = Array::scalar(self.v(xi).data().iter().map(|v| v * v).sum());
        self.push(out, Op::SumSquares { input: xi }, &[xi])
    }

    /// Elementwise maximum over same-shaped tensors; ties go to the earliest input.
    pub fn max_of(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        if inputs.is_empty() || inputs.len() > u8::MAX as usize {
            return Err(Error::shape("max_of", format!("{} inputs", inputs.len())));
        }
        let ids = inputs
            .iter()
            .map(|&t| self.check(t))
            .collect::<Result<Vec<_>>>()?;
        let shape = self.v(ids[0]).shape().to_vec();
        if let Some(&bad) = ids.iter().find(|&&i| self.v(i).shape() != shape) {
            return Err(Error::shape(
                "max_of",
                format!("{:?} vs {:?}", self.v(bad).shape(), shape),
            ));
        }
        let mut out = self.v(ids[0]).data().to_vec();
        let mut argmax = vec![0u8; out.len()];
        for (k, &i) in ids.iter().enumerate().skip(1) {
            for (j, &v) in self.v(i).data().iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = k as u8;
                }
            }
        }
        let out = Array::new(shape, out)?;
        self.push(
            out,
            Op::MaxOf {
                inputs: ids.clone(),
                argmax,
            },
            &ids,
        )
    }

    pub fn softmax_channels(&mut self, input: Tensor) -> Result<Tensor> {
        let xi = self.check(input)?;
        let (n, c, h, w) = self.v(xi).dims4("softmax")?;
        let plane = h * w;
        let x = self.v(xi).data();
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let m = (0..c)
                    .map(|k| x[base + k * plane + p])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (x[base + k * plane + p] - m).exp();
                    out[base + k * plane + p] = e;
                    z += e;
                }
                for k in 0..c {
                    out[base + k * plane + p] /= z;
                }
            }
        }
        let out = Array::new(vec![n, c, h, w], out)?;
        self.push(out, Op::SoftmaxChannels { input: xi }, &[xi])
    }

    /// Eigenvalues of the per-pixel symmetric 2x2 Hessian, stacked as
    /// `[N, 2, H, W]` with channel 0 the smaller magnitude.
    pub fn eig2x2(&mut self, hxx: Tensor, hxy: Tensor, hyy: Tensor) -> Result<Tensor> {
        let (a, b, d) = (self.check(hxx)?, self.check(hxy)?, self.check(hyy)?);
        let (n, c, h, w) = self.v(a).dims4("eig2x2")?;
        if c != 1 || self.v(b).shape() != self.v(a).shape() || self.v(d).shape() != self.v(a).shape()
        {
            return Err(Error::shape(
                "eig2x2",
                "hxx, hxy and hyy must share one [N, 1, H, W] shape",
            ));
        }
        let plane = h * w;
        let (va, vb, vd) = (self.v(a).data(), self.v(b).data(), self.v(d).data());
        let mut out = vec![0.0; 2 * n * plane];
        for s in 0..n {
            for p in 0..plane {
                let i = s * plane + p;
                let (l1, l2) = pointwise::eig2x2(va[i], vb[i], vd[i]);
                out[2 * s * plane + p] = l1;
                out[(2 * s + 1) * plane + p] = l2;
            }
        }
        let out = Array::new(vec![n, 2, h, w], out)?;
        self.push(
            out,
            Op::Eig2x2 {
                hxx: a,
                hxy: b,
                hyy: d,
            },
            &[a, b, d],
        )
    }

    /// Dark-ridge vesselness from `[N, 2, H, W]` eigenvalues and one-element
    /// `beta` and `c` tensors.
    pub fn vesselness(&mut self, lambdas: Tensor, beta: Tensor, c: Tensor) -> Result<Tensor> {
        let (li, bi, ci) = (self.check(lambdas)?, self.check(beta)?, self.check(c)?);
        let (n, ch, h, w) = self.v(li).dims4("vesselness")?;
        if ch != 2 {
            return Err(Error::shape("vesselness", format!("expected 2 eigenvalue channels, got {ch}")));
        }
        let (Some(bv), Some(cv)) = (self.v(bi).item(), self.v(ci).item()) else {
            return Err(Error::shape("vesselness", "beta and c must hold one value"));
        };
        if bv <= 0.0 || cv <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "vesselness needs beta > 0 and c > 0, got {bv} and {cv}"
            )));
        }
        let plane = h * w;
        let l = self.v(li).data();
        let mut out = vec![0.0; n * plane];
        for s in 0..n {
            for p in 0..plane {
                let (l1, l2) = (l[2 * s * plane + p], l[(2 * s + 1) * plane + p]);
                out[s * plane + p] = pointwise::vesselness_with_grad(l1, l2, bv, cv).0;
            }
        }
        let out = Array::new(vec![n, 1, h, w], out)?;
        self.push(
            out,
            Op::Vesselness {
                lambdas: li,
                beta: bi,
                c: ci,
            },
            &[li, bi, ci],
        )
    }

    /// Pixel-weighted focal loss summed over masked pixels and divided by
    /// `normalizer`. `prob` is `[N, 2, H, W]` with channel 1 the vessel class.
    pub fn focal_loss(
        &mut self,
        prob: Tensor,
        target: FocalTarget,
        gamma: f64,
        weights: ClassWeights,
        normalizer: f64,
    ) -> Result<Tensor> {
        let pi = self.check(prob)?;
        let (n, c, h, w) = self.v(pi).dims4("focal_loss")?;
        if c != 2 {
            return Err(Error::shape("focal_loss", format!("expected 2 class channels, got {c}")));
        }
        for (name, a) in [
            ("label", &target.label),
            ("weight", &target.weight),
            ("mask", &target.mask),
        ] {
            if a.shape() != [n, 1, h, w] {
                return Err(Error::shape(
                    "focal_loss",
                    format!("{name} shape {:?} differs from [{n}, 1, {h}, {w}]", a.shape()),
                ));
            }
        }
        if !(normalizer > 0.0) {
            return Err(Error::InvalidArgument(format!("focal normalizer {normalizer}")));
        }
        let plane = h * w;
        let p = self.v(pi).data();
        let mut total = 0.0;
        for s in 0..n {
            for q in 0..plane {
                let i = s * plane + q;
                if target.mask.data()[i] <= 0.0 {
                    continue;
                }
                let vessel = target.label.data()[i] > 0.5;
                let (cls, alpha) = if vessel {
                    (1, weights.vessel)
                } else {
                    (0, weights.background)
                };
                let pt = p[(2 * s + cls) * plane + q];
                total += target.weight.data()[i] * alpha * pointwise::focal_term(pt, gamma).0;
            }
        }
        let out = Array::scalar(total / normalizer);
        self.push(
            out,
            Op::Focal {
                prob: pi,
                target: Box::new(target),
                gamma,
                weights,
                normalizer,
            },
            &[pi],
        )
    }

    /// Reverse sweep from a scalar loss. Consumes the graph.
    pub fn backward(self, loss: Tensor) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[li].requires_grad {
            grads[li] = Some(Array::full(self.nodes[li].value.shape(), 1.0));
        }
        for id in (0..=li).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gout);
                continue;
            }
            for (input, g) in self.node_backward(node, &gout)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Array::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn node_backward(&self, node: &Node, gout: &Array) -> Result<Vec<(usize, Array)>> {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                ph,
                pw,
            } => {
                let geom = self.conv_geom(*input, *kernel, *ph, *pw)?;
                if needs(*input) {
                    out.push((*input, kernels::conv2d_grad_input(gout, self.v(*kernel), &geom)));
                }
                if needs(*kernel) {
                    out.push((*kernel, kernels::conv2d_grad_kernel(gout, self.v(*input), &geom)));
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    out.push((b, kernels::conv2d_grad_bias(gout, &geom)));
                }
            }
            Op::PadReflect { input, pad } => {
                let (n, c, h, w) = self.v(*input).dims4("pad_reflect")?;
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let mut g = Array::zeros(&[n, c, h, w]);
                let gd = g.data_mut();
                let go = gout.data();
                for p in 0..n * c {
                    for y in 0..oh {
                        let sy = kernels::reflect_index(y as isize - *pad as isize, h);
                        for x in 0..ow {
                            let sx = kernels::reflect_index(x as isize - *pad as isize, w);
                            gd[p * h * w + sy * w + sx] += go[p * oh * ow + y * ow + x];
                        }
                    }
                }
                out.push((*input, g));
            }
            Op::Act { input, kind } => {
                let x = self.v(*input).data();
                let y = node.value.data();
                let data = gout
                    .data()
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&go, (&xv, &yv))| go * kind.derivative(xv, yv))
                    .collect();
                out.push((*input, Array::new(gout.shape().to_vec(), data)?));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut g = Array::zeros(self.v(*input).shape());
                let gd = g.data_mut();
                for (&src, &go) in argmax.iter().zip(gout.data()) {
                    gd[src as usize] += go;
                }
                out.push((*input, g));
            }
            Op::Upsample2 { input } => {
                let (n, c, h, w) = self.v(*input).dims4("upsample")?;
                let ow = 2 * w;
                let mut g = Array::zeros(&[n, c, h, w]);
                let gd = g.data_mut();
                let go = gout.data();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..ow {
                            gd[p * h * w + (y / 2) * w + x / 2] += go[p * 4 * h * w + y * ow + x];
                        }
                    }
                }
                out.push((*input, g));
            }
            Op::Concat { a, b } => {
                let (n, c1, h, w) = self.v(*a).dims4("concat_channels")?;
                let c2 = self.v(*b).shape()[1];
                let plane = h * w;
                let go = gout.data();
                let mut ga = Vec::with_capacity(n * c1 * plane);
                let mut gb = Vec::with_capacity(n * c2 * plane);
                for s in 0..n {
                    let base = s * (c1 + c2) * plane;
                    ga.extend_from_slice(&go[base..][..c1 * plane]);
                    gb.extend_from_slice(&go[base + c1 * plane..][..c2 * plane]);
                }
                out.push((*a, Array::new(vec![n, c1, h, w], ga)?));
                out.push((*b, Array::new(vec![n, c2, h, w], gb)?));
            }
            Op::SliceChannels { input, start } => {
                let (n, c, h, w) = self.v(*input).dims4("slice_channels")?;
                let len = gout.shape()[1];
                let plane = h * w;
                let mut g = Array::zeros(&[n, c, h, w]);
                let gd = g.data_mut();
                for s in 0..n {
                    gd[(s * c + start) * plane..][..len * plane]
                        .copy_from_slice(&gout.data()[s * len * plane..][..len * plane]);
                }
                out.push((*input, g));
            }
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.v(*a), self.v(*b));
                let prod = |x: &Array| {
                    let data = gout.data().iter().zip(x.data()).map(|(g, v)| g * v).collect();
                    Array::new(gout.shape().to_vec(), data)
                };
                out.push((*a, prod(vb)?));
                out.push((*b, prod(va)?));
            }
            Op::Scale { input, factor } => out.push((*input, gout.map(|v| v * factor))),
            Op::Exp { input } => {
                let data = gout
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                out.push((*input, Array::new(gout.shape().to_vec(), data)?));
            }
            Op::Sum { input } => {
                out.push((*input, Array::full(self.v(*input).shape(), gout.data()[0])));
            }
            Op::SumSquares { input } => {
                let g0 = gout.data()[0];
                out.push((*input, self.v(*input).map(|v| 2.0 * v * g0)));
            }
            Op::MaxOf { inputs, argmax } => {
                let shape = node.value.shape();
                let mut gs: Vec<Option<Array>> = inputs
                    .iter()
                    .map(|&i| needs(i).then(|| Array::zeros(shape)))
                    .collect();
                for (j, (&k, &g)) in argmax.iter().zip(gout.data()).enumerate() {
                    if let Some(acc) = &mut gs[k as usize] {
                        acc.data_mut()[j] += g;
                    }
                }
                for (&i, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        out.push((i, g));
                    }
                }
            }
            Op::SoftmaxChannels { input } => {
                let (n, c, h, w) = node.value.dims4("softmax")?;
                let plane = h * w;
                let y = node.value.data();
                let go = gout.data();
                let mut g = vec![0.0; y.len()];
                for s in 0..n {
                    let base = s * c * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..c)
                            .map(|k| go[base + k * plane + p] * y[base + k * plane + p])
                            .sum();
                        for k in 0..c {
                            let i = base + k * plane + p;
                            g[i] = y[i] * (go[i] - dot);
                        }
                    }
                }
                out.push((*input, Array::new(vec![n, c, h, w], g)?));
            }
            Op::Eig2x2 { hxx, hxy, hyy } => {
                let (n, _, h, w) = self.v(*hxx).dims4("eig2x2")?;
                let plane = h * w;
                let (va, vb, vd) = (self.v(*hxx).data(), self.v(*hxy).data(), self.v(*hyy).data());
                let go = gout.data();
                let mut gs = [vec![0.0; n * plane], vec![0.0; n * plane], vec![0.0; n * plane]];
                for s in 0..n {
                    for p in 0..plane {
                        let i = s * plane + p;
                        let j = pointwise::eig2x2_jacobian(va[i], vb[i], vd[i]);
                        let (g1, g2) = (go[2 * s * plane + p], go[(2 * s + 1) * plane + p]);
                        for (k, gk) in gs.iter_mut().enumerate() {
                            gk[i] = g1 * j[0][k] + g2 * j[1][k];
                        }
                    }
                }
                let [ga, gb, gd] = gs;
                for (id, g) in [(*hxx, ga), (*hxy, gb), (*hyy, gd)] {
                    out.push((id, Array::new(vec![n, 1, h, w], g)?));
                }
            }
            Op::Vesselness { lambdas, beta, c } => {
                let (n, _, h, w) = self.v(*lambdas).dims4("vesselness")?;
                let plane = h * w;
                let l = self.v(*lambdas).data();
                let bv = self.v(*beta).data()[0];
                let cv = self.v(*c).data()[0];
                let go = gout.data();
                let mut gl = vec![0.0; 2 * n * plane];
                let (mut gbeta, mut gc) = (0.0, 0.0);
                for s in 0..n {
                    for p in 0..plane {
                        let (i1, i2) = (2 * s * plane + p, (2 * s + 1) * plane + p);
                        let (_, d) = pointwise::vesselness_with_grad(l[i1], l[i2], bv, cv);
                        let g = go[s * plane + p];
                        gl[i1] = g * d[0];
                        gl[i2] = g * d[1];
                        gbeta += g * d[2];
                        gc += g * d[3];
                    }
                }
                out.push((*lambdas, Array::new(vec![n, 2, h, w], gl)?));
                out.push((*beta, Array::new(self.v(*beta).shape().to_vec(), vec![gbeta])?));
                out.push((*c, Array::new(self.v(*c).shape().to_vec(), vec![gc])?));
            }
            Op::Focal {
                prob,
                target,
                gamma,
                weights,
                normalizer,
            } => {
                let (n, _, h, w) = self.v(*prob).dims4("focal_loss")?;
                let plane = h * w;
                let p = self.v(*prob).data();
                let scale = gout.data()[0] / normalizer;
                let mut g = vec![0.0; p.len()];
                for s in 0..n {
                    for q in 0..plane {
                        let i = s * plane + q;
                        if target.mask.data()[i] <= 0.0 {
                            continue;
                        }
                        let vessel = target.label.data()[i] > 0.5;
                        let (cls, alpha) = if vessel {
                            (1, weights.vessel)
                        } else {
                            (0, weights.background)
                        };
                        let k = (2 * s + cls) * plane + q;
                        let (_, d) = pointwise::focal_term(p[k], *gamma);
                        g[k] = scale * target.weight.data()[i] * alpha * d;
                    }
                }
                out.push((*prob, Array::new(vec![n, 2, h, w], g)?));
            }
        }
        Ok(out)
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Result<&Array> {
        if t.graph != self.graph || t.id >= self.grads.len() {
            return Err(Error::ForeignTensor);
        }
        self.grads[t.id].as_ref().ok_or(Error::NoGradient(t.id))
    }

    pub fn take(&mut self, t: Tensor) -> Result<Array> {
        if t.graph != self.graph || t.id >= self.grads.len() {
            return Err(Error::ForeignTensor);
        }
        self.grads[t.id].take().ok_or(Error::NoGradient(t.id))
    }
}
