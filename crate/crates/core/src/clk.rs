//! Cascade large kernel (CLK), its parallel baseline, CPDC, and
//! receptive-field measurement by gradient probing.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::Array;
use crate::params::{join, Parameterized};
use crate::pdc::{gate_product, pdc_forward, AlphaMode, PdcLayer};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, elementwise, flop_count, pointwise_conv, ConvSpec, ConvWeights, ElementwiseOp, Shape, Tensor,
};

/// Kernel size and dilation of the local stage.
pub const LOCAL: (usize, usize) = (5, 1);
/// Kernel size and dilation of the long-range stage.
pub const LONG: (usize, usize) = (7, 3);

fn local_spec(c: usize) -> ConvSpec {
    ConvSpec::depthwise(LOCAL.0, LOCAL.1, c)
}

fn long_spec(c: usize) -> ConvSpec {
    ConvSpec::depthwise(LONG.0, LONG.1, c)
}

/// Depthwise 5×5 → depthwise 7×7 dilation 3 → pointwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ClkLayer<T> {
    pub dw_local: ConvWeights<T>,
    pub dw_long: ConvWeights<T>,
    pub pw: ConvWeights<T>,
}

impl<T: Scalar> ClkLayer<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        ClkLayer {
            dw_local: ConvWeights::init(channels, 1, (LOCAL.0, LOCAL.0), false, rng),
            dw_long: ConvWeights::init(channels, 1, (LONG.0, LONG.0), false, rng),
            pw: ConvWeights::init(channels, channels, (1, 1), true, rng),
        }
    }

    /// Center-tap kernels and an identity pointwise map.
    pub fn identity(channels: usize) -> Self {
        ClkLayer {
            dw_local: ConvWeights::identity_depthwise(channels, LOCAL.0),
            dw_long: ConvWeights::identity_depthwise(channels, LONG.0),
            pw: ConvWeights::identity_pointwise(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.dw_local.out_channels()
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::dim("channels", self.channels(), c));
        }
        Ok(())
    }

    /// Cascade mode on `g`.
    pub fn build(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        self.check(c)?;
        let (wl, _) = g.bind_conv(&join(prefix, "local"), &self.dw_local);
        let (wg, _) = g.bind_conv(&join(prefix, "long"), &self.dw_long);
        let (wp, bp) = g.bind_conv(&join(prefix, "pw"), &self.pw);
        let a = g.conv2d(x, wl, None, local_spec(c))?;
        let b = g.conv2d(a, wg, None, long_spec(c))?;
        g.conv2d(b, wp, bp, ConvSpec::pointwise())
    }

    /// Parallel mode on `g`.
    pub fn build_parallel(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        self.check(c)?;
        let (wl, _) = g.bind_conv(&join(prefix, "local"), &self.dw_local);
        let (wg, _) = g.bind_conv(&join(prefix, "long"), &self.dw_long);
        let (wp, bp) = g.bind_conv(&join(prefix, "pw"), &self.pw);
        let a = g.conv2d(x, wl, None, local_spec(c))?;
        let b = g.conv2d(x, wg, None, long_spec(c))?;
        let s = g.add(a, b)?;
        g.conv2d(s, wp, bp, ConvSpec::pointwise())
    }
}

impl<T: Scalar> Parameterized<T> for ClkLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.dw_local.visit(&join(prefix, "local"), f);
        self.dw_long.visit(&join(prefix, "long"), f);
        self.pw.visit(&join(prefix, "pw"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.dw_local.visit_mut(&join(prefix, "local"), f);
        self.dw_long.visit_mut(&join(prefix, "long"), f);
        self.pw.visit_mut(&join(prefix, "pw"), f);
    }
}

/// `pw(dw_long(dw_local(x)))`.
pub fn clk_forward<T: Scalar>(input: &Tensor<T>, layer: &ClkLayer<T>) -> Result<Tensor<T>> {
    let c = input.shape().c;
    layer.check(c)?;
    let a = conv2d(input, &layer.dw_local, &local_spec(c))?;
    let b = conv2d(&a, &layer.dw_long, &long_spec(c))?;
    pointwise_conv(&b, &layer.pw)
}

/// `pw(dw_local(x) + dw_long(x))`.
pub fn parallel_forward<T: Scalar>(input: &Tensor<T>, layer: &ClkLayer<T>) -> Result<Tensor<T>> {
    let c = input.shape().c;
    layer.check(c)?;
    let a = conv2d(input, &layer.dw_local, &local_spec(c))?;
    let b = conv2d(input, &layer.dw_long, &long_spec(c))?;
    let s = elementwise(ElementwiseOp::Add, &a, &b)?;
    pointwise_conv(&s, &layer.pw)
}

/// Two chained PDC stages (5×5, then 7×7 dilation 3) and one output gate.
///
/// Only the stages' kernels and α are used; their own gates are not part of
/// this operator and are not exposed as parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CpdcLayer<T> {
    pub stage5: PdcLayer<T>,
    pub stage7: PdcLayer<T>,
    pub gate: ConvWeights<T>,
}

impl<T: Scalar> CpdcLayer<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        CpdcLayer {
            stage5: PdcLayer::new(channels, LOCAL.0, LOCAL.1, rng).expect("valid local spec"),
            stage7: PdcLayer::new(channels, LONG.0, LONG.1, rng).expect("valid long spec"),
            gate: ConvWeights::init(channels, channels, (1, 1), true, rng),
        }
    }

    /// Sets the α mode of both stages.
    pub fn with_alpha_mode(mut self, mode: AlphaMode<T>) -> Self {
        self.stage5.alpha_mode = mode;
        self.stage7.alpha_mode = mode;
        self
    }

    pub fn channels(&self) -> usize {
        self.stage5.channels()
    }

    /// `F_out = PDC7(PDC5(x))` on `g`.
    pub fn build(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let a = self.stage5.build(g, &join(prefix, "stage5"), x)?;
        self.stage7.build(g, &join(prefix, "stage7"), a)
    }

    /// `gate(F_out) ⊗ x` on `g`.
    pub fn build_gated(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let f = self.build(g, prefix, x)?;
        gate_product(g, &join(prefix, "gate"), &self.gate, f, x)
    }
}

impl<T: Scalar> Parameterized<T> for CpdcLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stage5.visit_core(&join(prefix, "stage5"), f);
        self.stage7.visit_core(&join(prefix, "stage7"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stage5.visit_core_mut(&join(prefix, "stage5"), f);
        self.stage7.visit_core_mut(&join(prefix, "stage7"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

/// Ungated `PDC7(PDC5(x))`.
pub fn cpdc_raw<T: Scalar>(input: &Tensor<T>, layer: &CpdcLayer<T>) -> Result<Tensor<T>> {
    let a = pdc_forward(input, &layer.stage5)?;
    pdc_forward(&a, &layer.stage7)
}

/// `pw(PDC7(PDC5(x))) ⊗ x`.
pub fn cpdc_forward<T: Scalar>(input: &Tensor<T>, layer: &CpdcLayer<T>) -> Result<Tensor<T>> {
    let f = cpdc_raw(input, layer)?;
    let p = pointwise_conv(&f, &layer.gate)?;
    elementwise(ElementwiseOp::Mul, &p, input)
}

/// MACs of all three CLK stages over `channels` at `spatial`.
pub fn clk_flops(channels: usize, spatial: (usize, usize)) -> u64 {
    clk_dw_flops(channels, spatial) + flop_count(&ConvSpec::pointwise(), channels, channels, spatial)
}

/// MACs of the two depthwise CLK stages.
pub fn clk_dw_flops(channels: usize, spatial: (usize, usize)) -> u64 {
    flop_count(&local_spec(channels), channels, channels, spatial)
        + flop_count(&long_spec(channels), channels, channels, spatial)
}

/// MACs of a dense-tap `k×k` depthwise conv followed by a pointwise conv.
pub fn large_kernel_flops(k: usize, channels: usize, spatial: (usize, usize)) -> u64 {
    flop_count(&ConvSpec::depthwise(k, 1, channels), channels, channels, spatial)
        + flop_count(&ConvSpec::pointwise(), channels, channels, spatial)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RfMode {
    Single5,
    Single7d3,
    Cascade,
    Parallel,
    /// Ungated CPDC with both α fixed to −1, so every tap reads with weight 1
    /// and the center reads `1 + K²` times.
    Cpdc,
}

impl RfMode {
    pub const ALL: [RfMode; 5] = [
        RfMode::Single5,
        RfMode::Single7d3,
        RfMode::Cascade,
        RfMode::Parallel,
        RfMode::Cpdc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RfMode::Single5 => "single5",
            RfMode::Single7d3 => "single7d3",
            RfMode::Cascade => "cascade",
            RfMode::Parallel => "parallel",
            RfMode::Cpdc => "cpdc",
        }
    }
}

impl fmt::Display for RfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RfMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown receptive-field mode {s:?}")))
    }
}

/// Half-width of every support grid; one pixel wider than the largest
/// composed support so the border row is always empty.
pub const RF_RADIUS: usize = 12;

/// Per-pixel usage counts around one output location.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMap {
    pub mode: RfMode,
    pub radius: usize,
    /// Row-major `(2r+1)²` grid; the center is the probed output location.
    pub counts: Vec<i64>,
}

impl SupportMap {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, y: usize, x: usize) -> i64 {
        self.counts[y * self.side() + x]
    }

    /// Bounding box of nonzero counts as `(y0, x0, y1, x1)`, inclusive.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let s = self.side();
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..s {
            for x in 0..s {
                if self.at(y, x) != 0 {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        b
    }

    /// `(height, width)` of the bounding box of nonzero counts.
    pub fn extent(&self) -> (usize, usize) {
        self.bounds().map_or((0, 0), |(y0, x0, y1, x1)| (y1 - y0 + 1, x1 - x0 + 1))
    }

    /// Zero-count pixels inside the bounding box.
    pub fn holes(&self) -> usize {
        let Some((y0, x0, y1, x1)) = self.bounds() else {
            return 0;
        };
        (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| (y, x)))
            .filter(|&(y, x)| self.at(y, x) == 0)
            .count()
    }

    pub fn support_size(&self) -> usize {
        self.counts.iter().filter(|&&c| c != 0).count()
    }

    /// Whether every nonzero pixel of `other` is nonzero here. Both maps must
    /// share a radius.
    pub fn contains(&self, other: &SupportMap) -> bool {
        self.radius == other.radius && self.counts.iter().zip(&other.counts).all(|(&a, &b)| b == 0 || a != 0)
    }

    /// One character per pixel, `.` for zero and `1`–`9` scaled to the
    /// maximum count.
    pub fn to_ascii(&self) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let s = self.side();
        let mut out = String::with_capacity(s * (s + 1));
        for y in 0..s {
            for x in 0..s {
                let c = self.at(y, x);
                out.push(if c == 0 {
                    '.'
                } else {
                    char::from(b'0' + (1 + (c - 1) * 9 / max).min(9) as u8)
                });
            }
            out.push('\n');
        }
        out
    }

    /// `side × side` i32 array.
    pub fn to_array(&self) -> Result<Array> {
        let vals = self
            .counts
            .iter()
            .map(|&c| i32::try_from(c).map_err(|_| Error::Config(format!("count {c} exceeds i32"))))
            .collect::<Result<Vec<_>>>()?;
        Array::from_i32(vec![self.side(), self.side()], vals)
    }
}

fn probe_layer(pdc_k: usize, dilation: usize) -> PdcLayer<f64> {
    PdcLayer {
        dw: ConvWeights::ones_depthwise(1, pdc_k),
        spec: ConvSpec::depthwise(pdc_k, dilation, 1),
        alpha: Tensor::scalar(0.0),
        alpha_mode: AlphaMode::Fixed(-1.0),
        gate: ConvWeights::identity_pointwise(1),
        mode: Default::default(),
    }
}

/// Empirical support: all-ones kernels on one channel, a unit impulse as the
/// output gradient at the center, and the resulting input gradient as counts.
pub fn receptive_field(mode: RfMode) -> Result<SupportMap> {
    let r = RF_RADIUS;
    let side = 2 * r + 1;
    let shape = Shape::new(1, 1, side, side);
    let clk = ClkLayer::<f64> {
        dw_local: ConvWeights::ones_depthwise(1, LOCAL.0),
        dw_long: ConvWeights::ones_depthwise(1, LONG.0),
        pw: ConvWeights::identity_pointwise(1),
    };
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(shape));
    let y = match mode {
        RfMode::Single5 => {
            let w = g.constant(clk.dw_local.weights.clone());
            g.conv2d(x, w, None, local_spec(1))?
        }
        RfMode::Single7d3 => {
            let w = g.constant(clk.dw_long.weights.clone());
            g.conv2d(x, w, None, long_spec(1))?
        }
        RfMode::Cascade => clk.build(&mut g, "", x)?,
        RfMode::Parallel => clk.build_parallel(&mut g, "", x)?,
        RfMode::Cpdc => {
            let layer = CpdcLayer {
                stage5: probe_layer(LOCAL.0, LOCAL.1),
                stage7: probe_layer(LONG.0, LONG.1),
                gate: ConvWeights::identity_pointwise(1),
            };
            layer.build(&mut g, "", x)?
        }
    };
    let impulse = g.constant(Tensor::from_fn(shape, |_, _, h, w| {
        if h == r && w == r {
            1.0
        } else {
            0.0
        }
    }));
    let picked = g.mul(y, impulse)?;
    let root = g.sum(picked);
    let grads = g.backward(root)?;
    let counts = grads
        .get_or_zeros(&g, x)
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v.abs() < 1e15 {
                Ok(v as i64)
            } else {
                Err(Error::Numeric {
                    op: format!("support probe ({mode}) produced non-integer count {v}"),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SupportMap {
        mode,
        radius: r,
        counts,
    })
}

/// Tap-indicator grid of a `k×k` kernel with dilation `d`, with `center`
/// added to the middle tap.
fn indicator(k: usize, d: usize, center: i64) -> (usize, Vec<i64>) {
    let e = (k - 1) * d + 1;
    let mut g = vec![0; e * e];
    for ky in 0..k {
        for kx in 0..k {
            g[ky * d * e + kx * d] = 1;
        }
    }
    g[(e / 2) * e + e / 2] += center;
    (e, g)
}

/// Full 2-D convolution of two square integer grids.
fn convolve(a: &(usize, Vec<i64>), b: &(usize, Vec<i64>)) -> (usize, Vec<i64>) {
    let (ea, ga) = a;
    let (eb, gb) = b;
    let e = ea + eb - 1;
    let mut out = vec![0; e * e];
    for ay in 0..*ea {
        for ax in 0..*ea {
            let va = ga[ay * ea + ax];
            if va == 0 {
                continue;
            }
            for by in 0..*eb {
                for bx in 0..*eb {
                    out[(ay + by) * e + ax + bx] += va * gb[by * eb + bx];
                }
            }
        }
    }
    (e, out)
}

fn add_centered(a: &(usize, Vec<i64>), b: &(usize, Vec<i64>)) -> (usize, Vec<i64>) {
    let (big, small) = if a.0 >= b.0 { (a, b) } else { (b, a) };
    let mut out = big.1.clone();
    let off = (big.0 - small.0) / 2;
    for y in 0..small.0 {
        for x in 0..small.0 {
            out[(y + off) * big.0 + x + off] += small.1[y * small.0 + x];
        }
    }
    (big.0, out)
}

/// Support predicted from kernel geometry alone.
pub fn analytic_support(mode: RfMode) -> SupportMap {
    let local = indicator(LOCAL.0, LOCAL.1, 0);
    let long = indicator(LONG.0, LONG.1, 0);
    let grid = match mode {
        RfMode::Single5 => local,
        RfMode::Single7d3 => long,
        RfMode::Cascade => convolve(&local, &long),
        RfMode::Parallel => add_centered(&local, &long),
        RfMode::Cpdc => convolve(
            &indicator(LOCAL.0, LOCAL.1, (LOCAL.0 * LOCAL.0) as i64),
            &indicator(LONG.0, LONG.1, (LONG.0 * LONG.0) as i64),
        ),
    };
    let r = RF_RADIUS;
    let side = 2 * r + 1;
    let mut counts = vec![0; side * side];
    let off = r - grid.0 / 2;
    for y in 0..grid.0 {
        for x in 0..grid.0 {
            counts[(y + off) * side + x + off] = grid.1[y * grid.0 + x];
        }
    }
    SupportMap { mode, radius: r, counts }
}
