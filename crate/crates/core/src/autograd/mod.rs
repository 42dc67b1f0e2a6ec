//! Reverse-mode differentiation over the operator set.
//!
//! A [`Graph`] records every forward op as a node holding its value and the
//! handles of its inputs. Nodes are appended in evaluation order, so walking
//! them backwards from the root is a valid topological order.
//!
//! ```
//! use pdconv::autograd::Graph;
//! use pdconv::tensor::{Shape, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 6.0));
//! ```

mod gradcheck;

pub use gradcheck::{gradcheck, gradcheck_with, rel_err, GradEntry, GradReport};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_backward_input, conv2d_backward_weights, ConvSpec, ConvWeights, Shape, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    /// `conv(x, w) - alpha * x * sum(w)` with a depthwise kernel.
    Pdc {
        input: Var,
        weight: Var,
        alpha: Var,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy {
        input: Var,
        scalar: Var,
    },
    Sigmoid(Var),
    Silu(Var),
    Standardize {
        input: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    Upsample(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Pdc { .. } => "pdc",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sigmoid(_) => "sigmoid",
            Op::Silu(_) => "silu",
            Op::Standardize { .. } => "standardize",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Upsample(_) => "upsample",
            Op::Concat(..) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    preset: HashMap<String, Var>,
    track_params: bool,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_unchecked(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Source index pairs and weights for half-pixel bilinear resampling.
fn bilinear_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// A graph whose [`Graph::bind`] produces constants.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            preset: HashMap::new(),
            track_params: false,
        }
    }

    /// A graph whose [`Graph::bind`] registers differentiable parameters.
    pub fn with_params() -> Self {
        Graph {
            track_params: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.params.push((name.into(), v));
        v
    }

    /// Resolves a named tensor: a var preset under `name` if there is one,
    /// otherwise a new parameter leaf when tracking parameters, otherwise a
    /// constant.
    pub fn bind(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.preset.get(name) {
            return v;
        }
        if self.track_params {
            self.param(name, t.clone())
        } else {
            self.constant(t.clone())
        }
    }

    /// Binds `{name}.weight` and `{name}.bias`.
    pub fn bind_conv(&mut self, name: &str, w: &ConvWeights<T>) -> (Var, Option<Var>) {
        let wv = self.bind(&format!("{name}.weight"), &w.weights);
        let bv = w.bias.as_ref().map(|b| self.bind(&format!("{name}.bias"), b));
        (wv, bv)
    }

    /// Makes later [`Graph::bind`] calls for `name` return `v`.
    pub fn preset(&mut self, name: impl Into<String>, v: Var) {
        self.preset.insert(name.into(), v);
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let cw = ConvWeights::new(self.value(weight).clone(), bias.map(|b| self.value(b).clone()))?;
        let y = conv2d(self.value(input), &cw, &spec)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            y,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        )
    }

    /// Pixel-difference response `conv(x, w) - alpha * x(p0) * sum(w)`.
    ///
    /// `weight` must be depthwise (`groups == channels`, one kernel per
    /// channel) and `alpha` a single-element tensor.
    pub fn pdc(&mut self, input: Var, weight: Var, alpha: Var, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if spec.groups != xs.c || ws.n != xs.c || ws.c != 1 {
            return Err(Error::Config(format!(
                "pixel-difference convolution needs a depthwise kernel over {} channels, got {} with groups {}",
                xs.c, ws, spec.groups
            )));
        }
        if spec.stride != 1 {
            return Err(Error::Config("pixel-difference convolution is stride 1".into()));
        }
        let a = self.value(alpha).item()?;
        let cw = ConvWeights {
            weights: self.value(weight).clone(),
            bias: None,
        };
        let mut y = conv2d(self.value(input), &cw, &spec)?;
        y.shape().expect_eq(&xs)?;
        let sums = cw.tap_sums();
        let x = self.value(input);
        let plane = xs.plane();
        for (i, (dst, &src)) in y.data_mut().iter_mut().zip(x.data()).enumerate() {
            let c = (i / plane) % xs.c;
            *dst -= a * src * sums[c];
        }
        let rg = self.rg(&[input, weight, alpha]);
        self.push(
            y,
            Op::Pdc {
                input,
                weight,
                alpha,
                spec,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Sub(a, b), rg)
    }

    /// Elementwise product `a ⊗ b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, c), rg)
    }

    /// `s * x` for a single-element `scalar`.
    pub fn scale_by(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let s = self.value(scalar).item()?;
        let y = self.value(input).map(|v| v * s);
        let rg = self.rg(&[input, scalar]);
        self.push(y, Op::ScaleBy { input, scalar }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(y, Op::Silu(x), rg)
    }

    /// Zero-mean, unit-variance over the spatial axes of every
    /// `(sample, channel)` plane.
    pub fn standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let m = T::lit(plane as f64);
        let mut y = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xs.n * xs.c);
        for chunk in y.data_mut().chunks_mut(plane) {
            let mean = chunk.iter().copied().sum::<T>() / m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[x]);
        self.push(y, Op::Standardize { input: x, inv_std }, rg)
    }

    /// `x * gamma[c] + beta[c]` with `gamma`, `beta` of shape `1 x C x 1 x 1`.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(input);
        let cshape = Shape::new(1, xs.c, 1, 1);
        cshape.expect_eq(&self.shape(gamma))?;
        cshape.expect_eq(&self.shape(beta))?;
        let plane = xs.plane();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut y = self.value(input).clone();
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let c = i % xs.c;
            for v in chunk.iter_mut() {
                *v = *v * gv[c] + bv[c];
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        self.push(y, Op::ChannelAffine { input, gamma, beta }, rg)
    }

    /// Half-pixel bilinear resampling to `h x w`.
    pub fn upsample_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(Error::Config("upsample target must be non-empty".into()));
        }
        let xs = self.shape(x);
        let ty = bilinear_table(xs.h, h);
        let tx = bilinear_table(xs.w, w);
        let out_shape = Shape::new(xs.n, xs.c, h, w);
        let src = self.value(x);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let p = src.plane(n, c);
                for &(y0, y1, fy) in &ty {
                    let fy = T::lit(fy);
                    for &(x0, x1, fx) in &tx {
                        let fx = T::lit(fx);
                        let top = p[y0 * xs.w + x0] * (T::one() - fx) + p[y0 * xs.w + x1] * fx;
                        let bot = p[y1 * xs.w + x0] * (T::one() - fx) + p[y1 * xs.w + x1] * fx;
                        data.push(top * (T::one() - fy) + bot * fy);
                    }
                }
            }
        }
        let y = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Upsample(x), rg)
    }

    /// Channel concatenation.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n {
            return Err(Error::dim("batch", sa.n, sb.n));
        }
        if sa.h != sb.h {
            return Err(Error::dim("height", sa.h, sb.h));
        }
        if sa.w != sb.w {
            return Err(Error::dim("width", sa.w, sb.w));
        }
        let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(out.numel());
        let (va, vb) = (self.value(a), self.value(b));
        for n in 0..sa.n {
            let ca = sa.c * sa.plane();
            let cb = sb.c * sb.plane();
            data.extend_from_slice(&va.data()[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&vb.data()[n * cb..(n + 1) * cb]);
        }
        let y = Tensor::new(out, data)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Concat(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.nodes.push(Node {
            value: y,
            op: Op::Sum(x),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        let rg = self.rg(&[x]);
        self.nodes.push(Node {
            value: y,
            op: Op::Mean(x),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Mean over all `N * H * W` pixels of `-log softmax(logits)[label]`.
    /// `labels` is indexed `(n, y, x)` row-major.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let map = self.cross_entropy_map(logits, labels)?;
        Ok(self.mean(map))
    }

    /// Per-pixel `-log softmax(logits)[label]` as an `N × 1 × H × W` tensor.
    pub fn cross_entropy_map(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let pixels = s.n * s.plane();
        if labels.len() != pixels {
            return Err(Error::dim("labels", pixels, labels.len()));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= s.c {
                return Err(Error::Label {
                    label: l as i64,
                    classes: s.c,
                    n: i / s.plane(),
                    y: (i % s.plane()) / s.w,
                    x: i % s.w,
                });
            }
        }
        let z = self.value(logits);
        let plane = s.plane();
        let mut probs = vec![T::zero(); z.numel()];
        let mut loss = Vec::with_capacity(pixels);
        for n in 0..s.n {
            for p in 0..plane {
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let mx = (0..s.c).map(|c| z.data()[idx(c)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for c in 0..s.c {
                    let e = (z.data()[idx(c)] - mx).exp();
                    probs[idx(c)] = e;
                    denom += e;
                }
                for c in 0..s.c {
                    probs[idx(c)] /= denom;
                }
                let label = labels[n * plane + p];
                loss.push(mx + denom.ln() - z.data()[idx(label)]);
            }
        }
        let loss = Tensor::new(Shape::new(s.n, 1, s.h, s.w), loss)?;
        let rg = self.rg(&[logits]);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rs = self.shape(root);
        if rs.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {rs}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rs, T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                if self.needs(*input) {
                    let gx = conv2d_backward_input(gy, w, spec, x.shape())?;
                    accumulate(grads, *input, gx);
                }
                if self.needs(*weight) {
                    let gw = conv2d_backward_weights(gy, x, spec, w.shape())?;
                    accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = crate::tensor::conv2d_backward_bias(gy);
                        accumulate(grads, *b, Tensor::new(self.shape(*b), gb)?);
                    }
                }
            }
            Op::Pdc {
                input,
                weight,
                alpha,
                spec,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let a = self.value(*alpha).item()?;
                let xs = x.shape();
                let plane = xs.plane();
                let sums = ConvWeights {
                    weights: w.clone(),
                    bias: None,
                }
                .tap_sums();
                // Per-channel sum of gy * x, shared by the kernel and alpha grads.
                let mut gx_dot = vec![T::zero(); xs.c];
                for (i, (&g, &v)) in gy.data().iter().zip(x.data()).enumerate() {
                    gx_dot[(i / plane) % xs.c] += g * v;
                }
                if self.needs(*input) {
                    let mut gx = conv2d_backward_input(gy, w, spec, xs)?;
                    for (i, (dst, &g)) in gx.data_mut().iter_mut().zip(gy.data()).enumerate() {
                        *dst -= a * g * sums[(i / plane) % xs.c];
                    }
                    accumulate(grads, *input, gx);
                }
                if self.needs(*weight) {
                    let mut gw = conv2d_backward_weights(gy, x, spec, w.shape())?;
                    let taps = w.shape().h * w.shape().w;
                    for (i, v) in gw.data_mut().iter_mut().enumerate() {
                        *v -= a * gx_dot[i / taps];
                    }
                    accumulate(grads, *weight, gw);
                }
                if self.needs(*alpha) {
                    let ga: T = gx_dot.iter().zip(&sums).map(|(&d, &s)| -d * s).sum();
                    accumulate(grads, *alpha, Tensor::full(self.shape(*alpha), ga));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.zip_map(self.value(*b), |g, v| g * v)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.zip_map(self.value(*a), |g, v| g * v)?);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let c = *c;
                    accumulate(grads, *x, gy.map(|g| g * c));
                }
            }
            Op::ScaleBy { input, scalar } => {
                let s = self.value(*scalar).item()?;
                if self.needs(*input) {
                    accumulate(grads, *input, gy.map(|g| g * s));
                }
                if self.needs(*scalar) {
                    let d: T = gy
                        .data()
                        .iter()
                        .zip(self.value(*input).data())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    accumulate(grads, *scalar, Tensor::full(self.shape(*scalar), d));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let g = gy.zip_map(&node.value, |g, s| g * s * (T::one() - s))?;
                    accumulate(grads, *x, g);
                }
            }
            Op::Silu(x) => {
                if self.needs(*x) {
                    let g = gy.zip_map(self.value(*x), |g, v| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })?;
                    accumulate(grads, *x, g);
                }
            }
            Op::Standardize { input, inv_std } => {
                if self.needs(*input) {
                    let y = &node.value;
                    let plane = y.shape().plane();
                    let m = T::lit(plane as f64);
                    let mut gx = gy.clone();
                    for (k, (gchunk, ychunk)) in gx
                        .data_mut()
                        .chunks_mut(plane)
                        .zip(y.data().chunks(plane))
                        .enumerate()
                    {
                        let mean_g = gchunk.iter().copied().sum::<T>() / m;
                        let mean_gy = gchunk
                            .iter()
                            .zip(ychunk)
                            .map(|(&g, &v)| g * v)
                            .sum::<T>()
                            / m;
                        for (g, &v) in gchunk.iter_mut().zip(ychunk) {
                            *g = (*g - mean_g - v * mean_gy) * inv_std[k];
                        }
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let x = self.value(*input);
                let xs = x.shape();
                let plane = xs.plane();
                let gv = self.value(*gamma).data();
                if self.needs(*input) {
                    let mut gx = gy.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                        let s = gv[i % xs.c];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *input, gx);
                }
                let cshape = Shape::new(1, xs.c, 1, 1);
                if self.needs(*gamma) {
                    let mut gg = vec![T::zero(); xs.c];
                    for (i, (gc, xc)) in gy.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                        gg[i % xs.c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    accumulate(grads, *gamma, Tensor::new(cshape, gg)?);
                }
                if self.needs(*beta) {
                    let mut gb = vec![T::zero(); xs.c];
                    for (i, gc) in gy.data().chunks(plane).enumerate() {
                        gb[i % xs.c] += gc.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *beta, Tensor::new(cshape, gb)?);
                }
            }
            Op::Upsample(x) => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let ys = node.value.shape();
                    let ty = bilinear_table(xs.h, ys.h);
                    let tx = bilinear_table(xs.w, ys.w);
                    let mut gx = Tensor::zeros(xs);
                    let in_plane = xs.plane();
                    for (pi, gplane) in gy.data().chunks(ys.plane()).enumerate() {
                        let dst = &mut gx.data_mut()[pi * in_plane..(pi + 1) * in_plane];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            let fy = T::lit(fy);
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let fx = T::lit(fx);
                                let g = gplane[oy * ys.w + ox];
                                let top = g * (T::one() - fy);
                                let bot = g * fy;
                                dst[y0 * xs.w + x0] += top * (T::one() - fx);
                                dst[y0 * xs.w + x1] += top * fx;
                                dst[y1 * xs.w + x0] += bot * (T::one() - fx);
                                dst[y1 * xs.w + x1] += bot * fx;
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let ca = sa.c * sa.plane();
                let cb = sb.c * sb.plane();
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for chunk in gy.data().chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, Tensor::new(sa, ga)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, Tensor::new(sb, gb)?);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let g = gy.item()?;
                    accumulate(grads, *x, Tensor::full(self.shape(*x), g));
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let g = gy.item()? / T::lit(s.numel() as f64);
                    accumulate(grads, *x, Tensor::full(s, g));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let s = self.shape(*logits);
                    let plane = s.plane();
                    let mut g = probs.clone();
                    for (i, (&l, &gp)) in labels.iter().zip(gy.data()).enumerate() {
                        let (n, p) = (i / plane, i % plane);
                        for c in 0..s.c {
                            g[(n * s.c + c) * plane + p] *= gp;
                        }
                        g[(n * s.c + l) * plane + p] -= gp;
                    }
                    accumulate(grads, *logits, Tensor::new(s, g)?);
                }
            }
        }
        Ok(())
    }
}
