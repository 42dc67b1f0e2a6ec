use rand::Rng;
use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) * d / 2` per side, so stride-1 outputs keep
    /// the input size.
    Same,
    /// Explicit `(rows, cols)` zero padding per side.
    Explicit(usize, usize),
}

/// Kernel geometry shared by every convolution-like operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl ConvSpec {
    /// Dense `k x k` convolution, stride 1, same padding.
    pub fn dense(k: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            dilation: 1,
            stride: 1,
            padding: Padding::Same,
            groups: 1,
        }
    }

    /// Depthwise `k x k` convolution with dilation `d` over `channels`.
    pub fn depthwise(k: usize, dilation: usize, channels: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            dilation,
            stride: 1,
            padding: Padding::Same,
            groups: channels,
        }
    }

    pub fn pointwise() -> Self {
        Self::dense(1)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    /// `(k - 1) * d + 1` along each axis.
    pub fn extent(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation + 1,
            (self.kernel.1 - 1) * self.dilation + 1,
        )
    }

    pub fn pad(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => (
                (self.kernel.0 - 1) * self.dilation / 2,
                (self.kernel.1 - 1) * self.dilation / 2,
            ),
            Padding::Explicit(ph, pw) => (ph, pw),
        }
    }

    pub fn is_depthwise(&self, channels: usize) -> bool {
        self.groups == channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.groups == 1 && self.kernel == (1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd and positive, got {kh}x{kw}"
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.extent();
        let (ph, pw) = self.pad();
        let span = |len: usize, pad: usize, ext: usize, axis: &'static str| {
            let padded = len + 2 * pad;
            if padded < ext {
                Err(Error::dim(axis, ext, padded))
            } else {
                Ok((padded - ext) / self.stride + 1)
            }
        };
        Ok((span(h, ph, eh, "height")?, span(w, pw, ew, "width")?))
    }
}

/// Kernel tensor of shape `(out, in / groups, kh, kw)` and an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub weights: Tensor<T>,
    /// Shape `1 x out x 1 x 1`.
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(weights: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            Shape::new(1, weights.shape().n, 1, 1).expect_eq(&b.shape())?;
            if !b.is_finite() {
                return Err(Error::Numeric {
                    op: "conv bias".into(),
                });
            }
        }
        if !weights.is_finite() {
            return Err(Error::Numeric {
                op: "conv weights".into(),
            });
        }
        Ok(ConvWeights { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    /// Depthwise kernel with a single 1 at the center tap.
    pub fn identity_depthwise(channels: usize, k: usize) -> Self {
        let shape = Shape::new(channels, 1, k, k);
        let mid = k / 2;
        let w = Tensor::from_fn(shape, |_, _, h, w| {
            if h == mid && w == mid {
                T::one()
            } else {
                T::zero()
            }
        });
        ConvWeights {
            weights: w,
            bias: None,
        }
    }

    pub fn ones_depthwise(channels: usize, k: usize) -> Self {
        ConvWeights {
            weights: Tensor::ones(Shape::new(channels, 1, k, k)),
            bias: None,
        }
    }

    /// `c x c` identity matrix as a 1x1 kernel, zero bias.
    pub fn identity_pointwise(channels: usize) -> Self {
        let w = Tensor::from_fn(Shape::new(channels, channels, 1, 1), |o, i, _, _| {
            if o == i {
                T::one()
            } else {
                T::zero()
            }
        });
        ConvWeights {
            weights: w,
            bias: Some(Tensor::zeros(Shape::new(1, channels, 1, 1))),
        }
    }

    pub fn zeros_pointwise(cin: usize, cout: usize) -> Self {
        ConvWeights {
            weights: Tensor::zeros(Shape::new(cout, cin, 1, 1)),
            bias: Some(Tensor::zeros(Shape::new(1, cout, 1, 1))),
        }
    }

    /// Centered uniform init scaled by fan-in: `U(-b, b)` with
    /// `b = sqrt(3 / fan_in)`, zero bias when `with_bias`.
    pub fn init<R: Rng + ?Sized>(
        cout: usize,
        cin_per_group: usize,
        kernel: (usize, usize),
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin_per_group * kernel.0 * kernel.1;
        let bound = (3.0 / fan_in as f64).sqrt();
        let weights = Tensor::uniform(
            Shape::new(cout, cin_per_group, kernel.0, kernel.1),
            -bound,
            bound,
            rng,
        );
        ConvWeights {
            weights,
            bias: with_bias.then(|| Tensor::zeros(Shape::new(1, cout, 1, 1))),
        }
    }

    /// Per-output-channel sum of kernel taps.
    pub fn tap_sums(&self) -> Vec<T> {
        let s = self.weights.shape();
        let per = s.c * s.h * s.w;
        self.weights
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().sum())
            .collect()
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: Shape,
    output: Shape,
    kh: usize,
    kw: usize,
    dilation: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn resolve(input: Shape, wshape: Shape, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let groups = spec.groups;
        if input.c % groups != 0 {
            return Err(Error::Config(format!(
                "input channels {} not divisible by groups {groups}",
                input.c
            )));
        }
        if wshape.n % groups != 0 {
            return Err(Error::Config(format!(
                "output channels {} not divisible by groups {groups}",
                wshape.n
            )));
        }
        if wshape.c != input.c / groups {
            return Err(Error::dim("channels", input.c / groups, wshape.c));
        }
        if wshape.h != spec.kernel.0 {
            return Err(Error::dim("kernel height", spec.kernel.0, wshape.h));
        }
        if wshape.w != spec.kernel.1 {
            return Err(Error::dim("kernel width", spec.kernel.1, wshape.w));
        }
        let (oh, ow) = spec.output_size(input.h, input.w)?;
        let (pad_h, pad_w) = spec.pad();
        Ok(Geometry {
            input,
            output: Shape::new(input.n, wshape.n, oh, ow),
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            dilation: spec.dilation,
            stride: spec.stride,
            pad_h,
            pad_w,
            cin_g: wshape.c,
            cout_g: wshape.n / groups,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o * stride + tap * dilation - pad` lies inside `[0, in_len)`.
    #[inline]
    fn valid(&self, tap: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let off = (tap * self.dilation) as isize - pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = in_len as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let hi = hi.min(out_len as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    /// Dense 1×1, stride 1, no padding: every output plane is a linear
    /// combination of whole input planes.
    fn is_plane_map(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.stride == 1
            && self.pad_h == 0
            && self.pad_w == 0
            && self.cout_g == self.output.c
    }

    /// Dense (`groups == 1`) spatial kernels go through [`im2col`].
    fn is_lowered(&self) -> bool {
        self.cout_g == self.output.c && !self.is_plane_map()
    }

    #[inline]
    fn in_coord(&self, o: usize, tap: usize, pad: usize) -> usize {
        o * self.stride + tap * self.dilation - pad
    }
}

/// Lowered patches of sample `n`: row `(ic, ky, kx)` holds, for every output
/// pixel, the input value that tap reads (zero when it falls in the padding).
fn im2col<T: Scalar>(x: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let in_plane = g.input.plane();
    let p = g.output.plane();
    let mut col = vec![T::zero(); g.cin_g * g.kh * g.kw * p];
    let mut rows = col.chunks_mut(p);
    for ic in 0..g.cin_g {
        let src = &x[(n * g.input.c + ic) * in_plane..][..in_plane];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid(ky, g.pad_h, g.input.h, g.output.h);
            for kx in 0..g.kw {
                let dst = rows.next().expect("row count matches taps");
                let (ox0, ox1) = g.valid(kx, g.pad_w, g.input.w, g.output.w);
                if ox1 == ox0 {
                    continue;
                }
                let ix0 = g.in_coord(ox0, kx, g.pad_w);
                for oy in oy0..oy1 {
                    let row = &src[g.in_coord(oy, ky, g.pad_h) * g.input.w..][..g.input.w];
                    let d = &mut dst[oy * g.output.w..][ox0..ox1];
                    for (d, &v) in d.iter_mut().zip(row[ix0..].iter().step_by(g.stride)) {
                        *d = v;
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates lowered patches back into the planes
/// of one sample.
fn col2im<T: Scalar>(col: &[T], dst: &mut [T], g: &Geometry) {
    let in_plane = g.input.plane();
    let p = g.output.plane();
    let mut rows = col.chunks(p);
    for ic in 0..g.cin_g {
        let plane = &mut dst[ic * in_plane..][..in_plane];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid(ky, g.pad_h, g.input.h, g.output.h);
            for kx in 0..g.kw {
                let src = rows.next().expect("row count matches taps");
                let (ox0, ox1) = g.valid(kx, g.pad_w, g.input.w, g.output.w);
                if ox1 == ox0 {
                    continue;
                }
                let ix0 = g.in_coord(ox0, kx, g.pad_w);
                for oy in oy0..oy1 {
                    let row = &mut plane[g.in_coord(oy, ky, g.pad_h) * g.input.w..][..g.input.w];
                    let s = &src[oy * g.output.w..][ox0..ox1];
                    for (d, &v) in row[ix0..].iter_mut().step_by(g.stride).zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&Tensor<T>>, g: &Geometry) -> Vec<T> {
    let p = g.output.plane();
    let k = g.cin_g * g.kh * g.kw;
    let cols: Vec<Vec<T>> = (0..g.input.n).into_par_iter().map(|n| im2col(x, n, g)).collect();
    let mut out = vec![T::zero(); g.output.numel()];
    out.par_chunks_mut(p).enumerate().for_each(|(idx, dst)| {
        let (n, oc) = (idx / g.output.c, idx % g.output.c);
        if let Some(b) = bias {
            dst.fill(b.data()[oc]);
        }
        let col = &cols[n];
        for (kk, &wv) in w[oc * k..][..k].iter().enumerate() {
            for (d, &v) in dst.iter_mut().zip(&col[kk * p..][..p]) {
                *d += wv * v;
            }
        }
    });
    out
}

fn dense_backward_input<T: Scalar>(gy: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let p = g.output.plane();
    let k = g.cin_g * g.kh * g.kw;
    let sample = g.input.c * g.input.plane();
    let mut gin = vec![T::zero(); g.input.numel()];
    gin.par_chunks_mut(sample).enumerate().for_each(|(n, dst)| {
        let mut col = vec![T::zero(); k * p];
        for oc in 0..g.output.c {
            let src = &gy[(n * g.output.c + oc) * p..][..p];
            for (kk, &wv) in w[oc * k..][..k].iter().enumerate() {
                for (d, &v) in col[kk * p..][..p].iter_mut().zip(src) {
                    *d += wv * v;
                }
            }
        }
        col2im(&col, dst, g);
    });
    gin
}

fn dense_backward_weights<T: Scalar>(gy: &[T], x: &[T], g: &Geometry) -> Vec<T> {
    let p = g.output.plane();
    let k = g.cin_g * g.kh * g.kw;
    let cols: Vec<Vec<T>> = (0..g.input.n).into_par_iter().map(|n| im2col(x, n, g)).collect();
    let mut gw = vec![T::zero(); g.output.c * k];
    gw.par_chunks_mut(k).enumerate().for_each(|(oc, dst)| {
        for (n, col) in cols.iter().enumerate() {
            let src = &gy[(n * g.output.c + oc) * p..][..p];
            for (kk, d) in dst.iter_mut().enumerate() {
                *d += dot(src, &col[kk * p..][..p]);
            }
        }
    });
    gw
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Stride-1 kernels run on zero-padded planes with row stride
/// `wp = w + 2·pad_w`. Output pixel `(oy, ox)` lives at `oy·wp + ox` and tap
/// `(ky, kx)` reads the padded plane at that index plus
/// `ky·d·wp + kx·d`, so each tap is a single contiguous multiply-add over
/// `oh·wp` elements. Columns `ox >= ow` of the strided layout are scratch.
struct Strided {
    wp: usize,
    /// Padded plane length, including the tail read by the last tap.
    len: usize,
    span: usize,
}

impl Strided {
    fn new(g: &Geometry) -> Self {
        let wp = g.input.w + 2 * g.pad_w;
        let hp = g.input.h + 2 * g.pad_h;
        Strided {
            wp,
            len: hp * wp + (g.kw - 1) * g.dilation,
            span: g.output.h * wp,
        }
    }

    fn offset(&self, g: &Geometry, ky: usize, kx: usize) -> usize {
        (ky * self.wp + kx) * g.dilation
    }
}

fn pad_plane<T: Scalar>(src: &[T], g: &Geometry, st: &Strided) -> Vec<T> {
    let mut out = vec![T::zero(); st.len];
    for (y, row) in src.chunks(g.input.w).enumerate() {
        out[(y + g.pad_h) * st.wp + g.pad_w..][..g.input.w].copy_from_slice(row);
    }
    out
}

/// `gy` plane in strided layout, scratch columns zero.
fn stride_plane<T: Scalar>(src: &[T], g: &Geometry, st: &Strided) -> Vec<T> {
    let mut out = vec![T::zero(); st.span];
    for (y, row) in src.chunks(g.output.w).enumerate() {
        out[y * st.wp..][..g.output.w].copy_from_slice(row);
    }
    out
}

/// Whether tap `(ky, kx)` touches at least one in-image pixel.
fn tap_live(g: &Geometry, ky: usize, kx: usize) -> bool {
    let (a, b) = g.valid(ky, g.pad_h, g.input.h, g.output.h);
    let (c, d) = g.valid(kx, g.pad_w, g.input.w, g.output.w);
    b > a && d > c
}

fn strided_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&Tensor<T>>, g: &Geometry) -> Vec<T> {
    let st = Strided::new(g);
    let in_plane = g.input.plane();
    let plane = g.output.plane();
    let mut out = vec![T::zero(); g.output.numel()];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, oc) = (idx / g.output.c, idx % g.output.c);
        let group = oc / g.cout_g;
        let b = bias.map_or(T::zero(), |b| b.data()[oc]);
        let mut acc = vec![b; st.span];
        for icg in 0..g.cin_g {
            let ic = group * g.cin_g + icg;
            let xp = pad_plane(&x[(n * g.input.c + ic) * in_plane..][..in_plane], g, &st);
            let wbase = (oc * g.cin_g + icg) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if !tap_live(g, ky, kx) {
                        continue;
                    }
                    let wv = w[wbase + ky * g.kw + kx];
                    let src = &xp[st.offset(g, ky, kx)..][..st.span];
                    for (d, &v) in acc.iter_mut().zip(src) {
                        *d += wv * v;
                    }
                }
            }
        }
        for (oy, row) in dst.chunks_mut(g.output.w).enumerate() {
            row.copy_from_slice(&acc[oy * st.wp..][..g.output.w]);
        }
    });
    out
}

fn strided_backward_input<T: Scalar>(gy: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let st = Strided::new(g);
    let in_plane = g.input.plane();
    let out_plane = g.output.plane();
    let mut gin = vec![T::zero(); g.input.numel()];
    gin.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dst)| {
        let (n, ic) = (idx / g.input.c, idx % g.input.c);
        let group = ic / g.cin_g;
        let icg = ic % g.cin_g;
        let mut acc = vec![T::zero(); st.len];
        for oc in group * g.cout_g..(group + 1) * g.cout_g {
            let gp = stride_plane(&gy[(n * g.output.c + oc) * out_plane..][..out_plane], g, &st);
            let wbase = (oc * g.cin_g + icg) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if !tap_live(g, ky, kx) {
                        continue;
                    }
                    let wv = w[wbase + ky * g.kw + kx];
                    let d = &mut acc[st.offset(g, ky, kx)..][..st.span];
                    for (d, &v) in d.iter_mut().zip(&gp) {
                        *d += wv * v;
                    }
                }
            }
        }
        for (y, row) in dst.chunks_mut(g.input.w).enumerate() {
            row.copy_from_slice(&acc[(y + g.pad_h) * st.wp + g.pad_w..][..g.input.w]);
        }
    });
    gin
}

fn strided_backward_weights<T: Scalar>(gy: &[T], x: &[T], g: &Geometry, weight_shape: Shape) -> Vec<T> {
    let st = Strided::new(g);
    let in_plane = g.input.plane();
    let out_plane = g.output.plane();
    let taps = g.kh * g.kw;
    let mut gw = vec![T::zero(); weight_shape.numel()];
    gw.par_chunks_mut(g.cin_g * taps).enumerate().for_each(|(oc, dst)| {
        let group = oc / g.cout_g;
        for n in 0..g.input.n {
            let gp = stride_plane(&gy[(n * g.output.c + oc) * out_plane..][..out_plane], g, &st);
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let xp = pad_plane(&x[(n * g.input.c + ic) * in_plane..][..in_plane], g, &st);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if tap_live(g, ky, kx) {
                            dst[icg * taps + ky * g.kw + kx] += dot(&gp, &xp[st.offset(g, ky, kx)..][..st.span]);
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Zero-padded 2-D convolution (cross-correlation, as in every deep learning
/// framework). Each output is `bias + sum_{taps} w * x(p0 + pn)`, accumulated
/// input-channel-major then kernel-row-major.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &ConvWeights<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::resolve(input.shape(), weights.weights.shape(), spec)?;
    if g.is_lowered() {
        let out = dense_forward(input.data(), weights.weights.data(), weights.bias.as_ref(), &g);
        return Tensor::new(g.output, out);
    }
    if g.stride == 1 && !g.is_plane_map() {
        let out = strided_forward(input.data(), weights.weights.data(), weights.bias.as_ref(), &g);
        return Tensor::new(g.output, out);
    }
    let out_shape = g.output;
    let plane = out_shape.plane();
    let mut out = vec![T::zero(); out_shape.numel()];
    let w = weights.weights.data();
    let x = input.data();
    let in_plane = g.input.plane();

    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / out_shape.c;
            let oc = idx % out_shape.c;
            if let Some(b) = &weights.bias {
                dst.fill(b.data()[oc]);
            }
            let group = oc / g.cout_g;
            if g.is_plane_map() {
                for ic in 0..g.cin_g {
                    let wv = w[oc * g.cin_g + ic];
                    let src = &x[(n * g.input.c + ic) * in_plane..][..in_plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
                return;
            }
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let src = &x[(n * g.input.c + ic) * in_plane..][..in_plane];
                let wbase = (oc * g.cin_g + icg) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.pad_h, g.input.h, out_shape.h);
                    for kx in 0..g.kw {
                        let wv = w[wbase + ky * g.kw + kx];
                        let (ox0, ox1) = g.valid(kx, g.pad_w, g.input.w, out_shape.w);
                        if ox1 == ox0 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = g.in_coord(oy, ky, g.pad_h);
                            let row = &src[iy * g.input.w..][..g.input.w];
                            let drow = &mut dst[oy * out_shape.w..][..out_shape.w];
                            if g.stride == 1 {
                                let ix0 = g.in_coord(ox0, kx, g.pad_w);
                                let len = ox1 - ox0;
                                for (d, &s) in
                                    drow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + len])
                                {
                                    *d += wv * s;
                                }
                            } else {
                                let ix0 = g.in_coord(ox0, kx, g.pad_w);
                                for (d, &s) in drow[ox0..ox1].iter_mut().zip(row[ix0..].iter().step_by(g.stride)) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(out_shape, out)
}

/// 1x1 convolution with `groups = 1`: a per-pixel linear map across channels.
pub fn pointwise_conv<T: Scalar>(input: &Tensor<T>, weights: &ConvWeights<T>) -> Result<Tensor<T>> {
    let ws = weights.weights.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::Config(format!(
            "pointwise convolution needs a 1x1 kernel, got {}x{}",
            ws.h, ws.w
        )));
    }
    conv2d(input, weights, &ConvSpec::pointwise())
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    let g = Geometry::resolve(input_shape, weights.shape(), spec)?;
    g.output.expect_eq(&grad_out.shape())?;
    if g.is_lowered() {
        return Tensor::new(input_shape, dense_backward_input(grad_out.data(), weights.data(), &g));
    }
    if g.stride == 1 && !g.is_plane_map() {
        return Tensor::new(input_shape, strided_backward_input(grad_out.data(), weights.data(), &g));
    }
    let in_plane = input_shape.plane();
    let out_plane = g.output.plane();
    let gy = grad_out.data();
    let w = weights.data();
    let mut gin = vec![T::zero(); input_shape.numel()];

    gin.par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / input_shape.c;
            let ic = idx % input_shape.c;
            let group = ic / g.cin_g;
            let icg = ic % g.cin_g;
            if g.is_plane_map() {
                for oc in 0..g.cout_g {
                    let wv = w[oc * g.cin_g + ic];
                    let src = &gy[(n * g.output.c + oc) * out_plane..][..out_plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
                return;
            }
            for oc in group * g.cout_g..(group + 1) * g.cout_g {
                let src = &gy[(n * g.output.c + oc) * out_plane..][..out_plane];
                let wbase = (oc * g.cin_g + icg) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.pad_h, input_shape.h, g.output.h);
                    for kx in 0..g.kw {
                        let wv = w[wbase + ky * g.kw + kx];
                        let (ox0, ox1) = g.valid(kx, g.pad_w, input_shape.w, g.output.w);
                        if ox1 == ox0 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = g.in_coord(oy, ky, g.pad_h);
                            let srow = &src[oy * g.output.w..][..g.output.w];
                            let drow = &mut dst[iy * input_shape.w..][..input_shape.w];
                            if g.stride == 1 {
                                let ix0 = g.in_coord(ox0, kx, g.pad_w);
                                let len = ox1 - ox0;
                                for (d, &s) in
                                    drow[ix0..ix0 + len].iter_mut().zip(&srow[ox0..ox1])
                                {
                                    *d += wv * s;
                                }
                            } else {
                                let ix0 = g.in_coord(ox0, kx, g.pad_w);
                                for (d, &s) in drow[ix0..].iter_mut().step_by(g.stride).zip(&srow[ox0..ox1]) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(input_shape, gin)
}

/// Gradient of `conv2d` with respect to its kernel tensor.
pub fn conv2d_backward_weights<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight_shape: Shape,
) -> Result<Tensor<T>> {
    let g = Geometry::resolve(input.shape(), weight_shape, spec)?;
    g.output.expect_eq(&grad_out.shape())?;
    if g.is_lowered() {
        return Tensor::new(weight_shape, dense_backward_weights(grad_out.data(), input.data(), &g));
    }
    if g.stride == 1 && !g.is_plane_map() {
        let gw = strided_backward_weights(grad_out.data(), input.data(), &g, weight_shape);
        return Tensor::new(weight_shape, gw);
    }
    let in_plane = g.input.plane();
    let out_plane = g.output.plane();
    let gy = grad_out.data();
    let x = input.data();
    let taps = g.kh * g.kw;
    let mut gw = vec![T::zero(); weight_shape.numel()];

    gw.par_chunks_mut(g.cin_g * taps)
        .enumerate()
        .for_each(|(oc, dst)| {
            let group = oc / g.cout_g;
            if g.is_plane_map() {
                for (ic, d) in dst.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for n in 0..g.input.n {
                        let src = &x[(n * g.input.c + ic) * in_plane..][..in_plane];
                        let gsrc = &gy[(n * g.output.c + oc) * out_plane..][..out_plane];
                        acc += dot(gsrc, src);
                    }
                    *d = acc;
                }
                return;
            }
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.pad_h, g.input.h, g.output.h);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid(kx, g.pad_w, g.input.w, g.output.w);
                        let mut acc = T::zero();
                        if ox1 > ox0 {
                            for n in 0..g.input.n {
                                let src = &x[(n * g.input.c + ic) * in_plane..][..in_plane];
                                let gsrc = &gy[(n * g.output.c + oc) * out_plane..][..out_plane];
                                for oy in oy0..oy1 {
                                    let iy = g.in_coord(oy, ky, g.pad_h);
                                    let row = &src[iy * g.input.w..][..g.input.w];
                                    let grow = &gsrc[oy * g.output.w..][..g.output.w];
                                    if g.stride == 1 {
                                        let ix0 = g.in_coord(ox0, kx, g.pad_w);
                                        let len = ox1 - ox0;
                                        for (&a, &b) in
                                            grow[ox0..ox1].iter().zip(&row[ix0..ix0 + len])
                                        {
                                            acc += a * b;
                                        }
                                    } else {
                                        let ix0 = g.in_coord(ox0, kx, g.pad_w);
                                        for (&a, &b) in grow[ox0..ox1].iter().zip(row[ix0..].iter().step_by(g.stride)) {
                                            acc += a * b;
                                        }
                                    }
                                }
                            }
                        }
                        dst[(icg * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        });
    Tensor::new(weight_shape, gw)
}

/// Gradient of `conv2d` with respect to its bias: per-channel sum.
pub fn conv2d_backward_bias<T: Scalar>(grad_out: &Tensor<T>) -> Vec<T> {
    let s = grad_out.shape();
    (0..s.c)
        .map(|c| {
            (0..s.n)
                .map(|n| grad_out.plane(n, c).iter().copied().sum::<T>())
                .sum()
        })
        .collect()
}

/// Multiply-accumulate count of a stride-1 convolution over an `h x w` map:
/// `h * w * cout * (cin / groups) * kh * kw`.
pub fn flop_count(spec: &ConvSpec, channels_in: usize, channels_out: usize, spatial: (usize, usize)) -> u64 {
    let (h, w) = spatial;
    let per_group = channels_in / spec.groups.max(1);
    h as u64
        * w as u64
        * channels_out as u64
        * per_group as u64
        * spec.kernel.0 as u64
        * spec.kernel.1 as u64
}
