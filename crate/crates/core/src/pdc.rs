//! Pixel-difference convolution.
//!
//! For a depthwise kernel `w` and blend weight `α`,
//!
//! ```text
//! PDC(x)(p0) = α·Σ w(pn)·(x(p0+pn) − x(p0)) + (1−α)·Σ w(pn)·x(p0+pn)
//!            = Σ w(pn)·x(p0+pn) − α·x(p0)·Σ w(pn)
//! ```
//!
//! The first line is the definitional form, the second the rewritten form used
//! on the production path. Pixels outside the image read as zero in both.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{join, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, elementwise, pointwise_conv, ConvSpec, ConvWeights, ElementwiseOp, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PdcMode {
    /// Explicit difference loop; kept as the oracle.
    Definitional,
    #[default]
    Rewritten,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaMode<T> {
    /// Effective α is `sigmoid(stored)`.
    Learnable,
    /// Effective α is the given value; the stored parameter is ignored.
    Fixed(T),
}

/// Depthwise PDC kernel, blend weight and the 1×1 output gate.
#[derive(Clone, Debug, PartialEq)]
pub struct PdcLayer<T> {
    /// Depthwise, no bias. Shape `(C, 1, k, k)`.
    pub dw: ConvWeights<T>,
    pub spec: ConvSpec,
    /// Unconstrained stored α, one element.
    pub alpha: Tensor<T>,
    pub alpha_mode: AlphaMode<T>,
    /// `C -> C` pointwise with bias.
    pub gate: ConvWeights<T>,
    pub mode: PdcMode,
}

impl<T: Scalar> PdcLayer<T> {
    /// Randomly initialised layer with stored α = 0.
    pub fn new<R: Rng + ?Sized>(channels: usize, k: usize, dilation: usize, rng: &mut R) -> Result<Self> {
        let spec = ConvSpec::depthwise(k, dilation, channels);
        spec.validate()?;
        Ok(PdcLayer {
            dw: ConvWeights::init(channels, 1, (k, k), false, rng),
            spec,
            alpha: Tensor::scalar(T::zero()),
            alpha_mode: AlphaMode::Learnable,
            gate: ConvWeights::init(channels, channels, (1, 1), true, rng),
            mode: PdcMode::Rewritten,
        })
    }

    /// 5×5, dilation 1.
    pub fn default_for<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self::new(channels, 5, 1, rng).expect("5x5 d1 is a valid depthwise spec")
    }

    pub fn channels(&self) -> usize {
        self.dw.out_channels()
    }

    pub fn with_alpha_mode(mut self, mode: AlphaMode<T>) -> Self {
        self.alpha_mode = mode;
        self
    }

    pub fn with_mode(mut self, mode: PdcMode) -> Self {
        self.mode = mode;
        self
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let c = self.channels();
        if input.shape().c != c {
            return Err(Error::dim("channels", c, input.shape().c));
        }
        if self.spec.groups != c || self.dw.weights.shape().c != 1 || self.spec.stride != 1 {
            return Err(Error::Config(format!(
                "pixel-difference layer needs a stride-1 depthwise kernel over {c} channels"
            )));
        }
        Ok(())
    }

    /// Effective α as a graph node: `sigmoid(alpha)` or a fixed constant.
    pub fn alpha_var(&self, g: &mut Graph<T>, prefix: &str) -> Result<Var> {
        match self.alpha_mode {
            AlphaMode::Learnable => {
                let a = g.bind(&join(prefix, "alpha"), &self.alpha);
                g.sigmoid(a)
            }
            AlphaMode::Fixed(a) => Ok(g.constant(Tensor::scalar(a))),
        }
    }

    /// Ungated `PDC(x)` recorded on `g`.
    pub fn build(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let c = self.channels();
        if g.shape(x).c != c {
            return Err(Error::dim("channels", c, g.shape(x).c));
        }
        let w = g.bind(&join(prefix, "dw.weight"), &self.dw.weights);
        let a = self.alpha_var(g, prefix)?;
        g.pdc(x, w, a, self.spec)
    }

    /// `gate(PDC(x)) ⊗ x` recorded on `g`.
    pub fn build_gated(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let f = self.build(g, prefix, x)?;
        gate_product(g, &join(prefix, "gate"), &self.gate, f, x)
    }
}

impl<T: Scalar> PdcLayer<T> {
    /// Kernel and α only: the parameters used by [`PdcLayer::build`].
    pub fn visit_core(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "dw.weight"), &self.dw.weights);
        f(join(prefix, "alpha"), &self.alpha);
    }

    pub fn visit_core_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "dw.weight"), &mut self.dw.weights);
        f(join(prefix, "alpha"), &mut self.alpha);
    }
}

impl<T: Scalar> Parameterized<T> for PdcLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.visit_core(prefix, f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.visit_core_mut(prefix, f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

/// `pw(feature) ⊗ input` with the pointwise weights bound under `name`.
pub fn gate_product<T: Scalar>(
    g: &mut Graph<T>,
    name: &str,
    gate: &ConvWeights<T>,
    feature: Var,
    input: Var,
) -> Result<Var> {
    let (w, b) = g.bind_conv(name, gate);
    let p = g.conv2d(feature, w, b, ConvSpec::pointwise())?;
    g.mul(p, input)
}

fn logistic<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Maps the stored parameter to the α used in the blend.
pub fn alpha_effective<T: Scalar>(layer: &PdcLayer<T>) -> T {
    match layer.alpha_mode {
        AlphaMode::Learnable => logistic(layer.alpha.data()[0]),
        AlphaMode::Fixed(a) => a,
    }
}

/// Ungated PDC response in the layer's [`PdcMode`].
pub fn pdc_forward<T: Scalar>(input: &Tensor<T>, layer: &PdcLayer<T>) -> Result<Tensor<T>> {
    layer.check_input(input)?;
    let a = alpha_effective(layer);
    match layer.mode {
        PdcMode::Rewritten => rewritten(input, &layer.dw, &layer.spec, a),
        PdcMode::Definitional => definitional(input, &layer.dw, &layer.spec, a),
    }
}

/// `pw(PDC(x)) ⊗ x`.
pub fn pdc_gated<T: Scalar>(input: &Tensor<T>, layer: &PdcLayer<T>) -> Result<Tensor<T>> {
    let f = pdc_forward(input, layer)?;
    let p = pointwise_conv(&f, &layer.gate)?;
    elementwise(ElementwiseOp::Mul, &p, input)
}

/// `conv(x, w) − α·x(p0)·Σw`.
pub(crate) fn rewritten<T: Scalar>(x: &Tensor<T>, dw: &ConvWeights<T>, spec: &ConvSpec, alpha: T) -> Result<Tensor<T>> {
    let mut y = conv2d(x, dw, spec)?;
    y.shape().expect_eq(&x.shape())?;
    let sums = dw.tap_sums();
    let s = x.shape();
    for (i, (dst, &src)) in y.data_mut().iter_mut().zip(x.data()).enumerate() {
        let c = (i / s.plane()) % s.c;
        *dst -= alpha * src * sums[c];
    }
    Ok(y)
}

/// Blend of the difference sum and the plain sum, one tap at a time.
fn definitional<T: Scalar>(x: &Tensor<T>, dw: &ConvWeights<T>, spec: &ConvSpec, alpha: T) -> Result<Tensor<T>> {
    let s = x.shape();
    let (oh, ow) = spec.output_size(s.h, s.w)?;
    if (oh, ow) != (s.h, s.w) {
        return Err(Error::Config("pixel-difference convolution preserves spatial size".into()));
    }
    let (kh, kw) = spec.kernel;
    let d = spec.dilation as isize;
    let (ph, pw) = spec.pad();
    let read = |n: usize, c: usize, h: isize, w: isize| -> T {
        if h < 0 || w < 0 || h >= s.h as isize || w >= s.w as isize {
            T::zero()
        } else {
            x.at(n, c, h as usize, w as usize)
        }
    };
    let one = T::one();
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h, s.w), |n, c, h, w| {
        let center = x.at(n, c, h, w);
        let mut diff = T::zero();
        let mut plain = T::zero();
        for ky in 0..kh {
            for kx in 0..kw {
                let tap = dw.weights.at(c, 0, ky, kx);
                let v = read(
                    n,
                    c,
                    h as isize + ky as isize * d - ph as isize,
                    w as isize + kx as isize * d - pw as isize,
                );
                diff += tap * (v - center);
                plain += tap * v;
            }
        }
        alpha * diff + (one - alpha) * plain
    }))
}

/// Largest accepted definitional/rewritten deviation at f32.
pub const EQUIVALENCE_TOL_F32: f64 = 1e-6;
/// Largest accepted definitional/rewritten deviation at f64.
pub const EQUIVALENCE_TOL_F64: f64 = 1e-12;

/// Worst deviation between the two PDC forms over a batch of random layers,
/// measured by [`Tensor::max_rel_diff`] against the definitional output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Equivalence {
    pub instances: usize,
    pub max_dev_f32: f64,
    pub max_dev_f64: f64,
}

impl Equivalence {
    pub fn passes(&self) -> bool {
        self.max_dev_f32 <= EQUIVALENCE_TOL_F32 && self.max_dev_f64 <= EQUIVALENCE_TOL_F64
    }
}

/// Compares both forms on `instances` random layers. Instance `i` uses the
/// 5×5 d1 or 7×7 d3 geometry alternately, `C` cycling through 1, 2 and 8, a
/// random map of side 6 to 16 and α uniform in `[0, 1]`.
pub fn equivalence_sweep(instances: usize, seed: u64) -> Result<Equivalence> {
    use rand::SeedableRng;
    let mut out = Equivalence {
        instances,
        max_dev_f32: 0.0,
        max_dev_f64: 0.0,
    };
    for i in 0..instances {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (k, d) = if i % 2 == 0 { (5, 1) } else { (7, 3) };
        let c = [1, 2, 8][(i / 2) % 3];
        let (h, w) = (rng.gen_range(6..=16), rng.gen_range(6..=16));
        let alpha: f64 = rng.gen_range(0.0..=1.0);
        let l64 = PdcLayer::<f64>::new(c, k, d, &mut rng)?.with_alpha_mode(AlphaMode::Fixed(alpha));
        let x64 = Tensor::<f64>::uniform(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng);
        let def = definitional(&x64, &l64.dw, &l64.spec, alpha)?;
        let rew = rewritten(&x64, &l64.dw, &l64.spec, alpha)?;
        out.max_dev_f64 = out.max_dev_f64.max(rew.max_rel_diff(&def)?);

        let dw32 = ConvWeights::new(l64.dw.weights.cast::<f32>(), None)?;
        let x32 = x64.cast::<f32>();
        let a32 = alpha as f32;
        let def = definitional(&x32, &dw32, &l64.spec, a32)?;
        let rew = rewritten(&x32, &dw32, &l64.spec, a32)?;
        out.max_dev_f32 = out.max_dev_f32.max(rew.max_rel_diff(&def)?);
    }
    Ok(out)
}
