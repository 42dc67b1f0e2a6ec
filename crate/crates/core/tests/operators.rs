mod common;

use common::{naive_conv, naive_pdc};
use pdconv::clk::{clk_forward, cpdc_raw, ClkLayer, CpdcLayer};
use pdconv::fusion::{ecf_fuse, EcfLayer};
use pdconv::pdc::{pdc_forward, AlphaMode, PdcLayer, PdcMode};
use pdconv::tensor::{conv2d, elementwise, ElementwiseOp, Operand};
use pdconv::{ConvSpec, ConvWeights, Padding, Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

#[derive(Clone, Debug)]
struct Case {
    n: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    dilation: usize,
    stride: usize,
    padding: Padding,
    h: usize,
    w: usize,
    bias: bool,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = Case> {
    (
        (1usize..=2, 1usize..=3, 1usize..=3, 1usize..=3),
        (prop::sample::select(vec![1usize, 3, 5]), 1usize..=3, 1usize..=2),
        prop_oneof![Just(Padding::Same), (0usize..=3, 0usize..=3).prop_map(|(a, b)| Padding::Explicit(a, b))],
        (1usize..=14, 1usize..=14, any::<bool>(), any::<u64>()),
    )
        .prop_map(|((n, groups, cin_g, cout_g), (k, dilation, stride), padding, (h, w, bias, seed))| Case {
            n,
            groups,
            cin_g,
            cout_g,
            k,
            dilation,
            stride,
            padding,
            h,
            w,
            bias,
            seed,
        })
}

impl Case {
    fn spec(&self) -> ConvSpec {
        ConvSpec {
            kernel: (self.k, self.k),
            dilation: self.dilation,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    fn build(&self) -> Option<(Tensor<f64>, ConvWeights<f64>)> {
        self.spec().output_size(self.h, self.w).ok()?;
        let (cin, cout) = (self.groups * self.cin_g, self.groups * self.cout_g);
        let x = rand_tensor(Shape::new(self.n, cin, self.h, self.w), self.seed);
        let w = ConvWeights::init(cout, self.cin_g, (self.k, self.k), self.bias, &mut rng(self.seed ^ 1));
        Some((x, w))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(192))]

    #[test]
    fn conv_matches_direct_loops(c in conv_case()) {
        let Some((x, w)) = c.build() else { return Ok(()) };
        let y = conv2d(&x, &w, &c.spec()).unwrap();
        let r = naive_conv(&x, &w, &c.spec());
        prop_assert_eq!(y.shape(), r.shape());
        prop_assert!(max_abs(&y, &r) <= 1e-12, "{:?}", c);
    }

    #[test]
    fn conv_is_linear_in_the_input(c in conv_case(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let Some((x, mut w)) = c.build() else { return Ok(()) };
        w.bias = None;
        let z = rand_tensor(x.shape(), c.seed ^ 2);
        let spec = c.spec();
        let mix = x.zip_map(&z, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&mix, &w, &spec).unwrap();
        let (fx, fz) = (conv2d(&x, &w, &spec).unwrap(), conv2d(&z, &w, &spec).unwrap());
        let rhs = fx.zip_map(&fz, |p, q| a * p + b * q).unwrap();
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn pdc_matches_weighted_differences(
        geom in prop::sample::select(vec![(5usize, 1usize), (7, 3), (3, 1), (3, 2)]),
        c in 1usize..=4,
        h in 1usize..=12,
        w in 1usize..=12,
        alpha in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let (k, d) = geom;
        let x = rand_tensor(Shape::new(2, c, h, w), seed);
        for mode in [PdcMode::Rewritten, PdcMode::Definitional] {
            let layer = PdcLayer::new(c, k, d, &mut rng(seed ^ 3)).unwrap()
                .with_alpha_mode(AlphaMode::Fixed(alpha))
                .with_mode(mode);
            let y = pdc_forward(&x, &layer).unwrap();
            let r = naive_pdc(&x, &layer.dw, k, d, alpha);
            prop_assert!(max_abs(&y, &r) <= 1e-12, "{:?}", mode);
        }
    }

    /// The response is affine in α: `f(α) = (1 − α)·f(0) + α·f(1)`.
    #[test]
    fn pdc_is_affine_in_alpha(alpha in -1.0f64..=2.0, seed in any::<u64>()) {
        let x = rand_tensor(Shape::new(1, 3, 9, 9), seed);
        let base = PdcLayer::new(3, 5, 1, &mut rng(seed ^ 4)).unwrap();
        let at = |a: f64| pdc_forward(&x, &base.clone().with_alpha_mode(AlphaMode::Fixed(a))).unwrap();
        let (f0, f1) = (at(0.0), at(1.0));
        let blend = f0.zip_map(&f1, |p, q| (1.0 - alpha) * p + alpha * q).unwrap();
        prop_assert!(max_abs(&at(alpha), &blend) <= 1e-12);
    }

    /// The cascade's response to a unit spike is the composition of its
    /// two kernels, and scales linearly with the spike height.
    #[test]
    fn clk_spike_response_composes_kernels(height in -3.0f64..3.0, seed in any::<u64>()) {
        let mut layer = ClkLayer::<f64>::new(1, &mut rng(seed));
        layer.pw = ConvWeights::identity_pointwise(1);
        let side = 25;
        let c = side / 2;
        let x = Tensor::from_fn(Shape::new(1, 1, side, side), |_, _, y, xx| {
            if (y, xx) == (c, c) { height } else { 0.0 }
        });
        let y = clk_forward(&x, &layer).unwrap();
        for oy in 0..side {
            for ox in 0..side {
                let mut want = 0.0;
                for (i5, j5) in (0..5).flat_map(|i| (0..5).map(move |j| (i, j))) {
                    for (i7, j7) in (0..7).flat_map(|i| (0..7).map(move |j| (i, j))) {
                        let ry = oy as i64 + (i7 * 3) as i64 - 9 + i5 as i64 - 2;
                        let rx = ox as i64 + (j7 * 3) as i64 - 9 + j5 as i64 - 2;
                        if (ry, rx) == (c as i64, c as i64) {
                            want += layer.dw_local.weights.at(0, 0, i5, j5) * layer.dw_long.weights.at(0, 0, i7, j7);
                        }
                    }
                }
                prop_assert!((y.at(0, 0, oy, ox) - height * want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn alpha_zero_is_plain_convolution() {
    let x = rand_tensor(Shape::new(2, 4, 11, 13), 10);
    for (k, d) in [(5, 1), (7, 3)] {
        let layer = PdcLayer::new(4, k, d, &mut rng(11)).unwrap().with_alpha_mode(AlphaMode::Fixed(0.0));
        let y = pdc_forward(&x, &layer).unwrap();
        let r = conv2d(&x, &layer.dw, &layer.spec).unwrap();
        assert!(max_abs(&y, &r) <= 1e-7);
    }
}

#[test]
fn alpha_one_annihilates_constant_interior() {
    let x = Tensor::full(Shape::new(1, 2, 30, 30), 0.7);
    for (k, d) in [(5usize, 1usize), (7, 3)] {
        let layer = PdcLayer::<f64>::new(2, k, d, &mut rng(12)).unwrap().with_alpha_mode(AlphaMode::Fixed(1.0));
        let y = pdc_forward(&x, &layer).unwrap();
        let r = (k - 1) * d / 2;
        for c in 0..2 {
            for i in r..30 - r {
                for j in r..30 - r {
                    assert!(y.at(0, c, i, j).abs() <= 1e-6, "{k}x{k} d{d} at ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn cpdc_with_zero_alpha_is_the_plain_cascade() {
    let cp = CpdcLayer::<f64>::new(3, &mut rng(13)).with_alpha_mode(AlphaMode::Fixed(0.0));
    let clk = ClkLayer {
        dw_local: cp.stage5.dw.clone(),
        dw_long: cp.stage7.dw.clone(),
        pw: ConvWeights::identity_pointwise(3),
    };
    let x = rand_tensor(Shape::new(1, 3, 20, 20), 14);
    assert!(max_abs(&cpdc_raw(&x, &cp).unwrap(), &clk_forward(&x, &clk).unwrap()) <= 1e-12);
}

#[test]
fn ecf_matches_elementwise_formula() {
    let c = 3;
    let layer = EcfLayer::<f64>::new(c, &mut rng(15)).with_coefficients(0.3, -1.2);
    let s = Shape::new(2, c, 5, 4);
    let [fr, fd, hr, hd] = [16, 17, 18, 19].map(|k| rand_tensor(s, k));
    let y = ecf_fuse(&fr, &fd, &hr, &hd, &layer).unwrap();
    let gate = |g: &ConvWeights<f64>, hat: &Tensor<f64>| naive_conv(hat, g, &ConvSpec::pointwise());
    let (gr, gd) = (gate(&layer.gate_rgb, &hr), gate(&layer.gate_depth, &hd));
    for i in 0..s.numel() {
        let want = 0.3 * (gr.data()[i] * hr.data()[i] + fr.data()[i]) - 1.2 * (gd.data()[i] * hd.data()[i] + fd.data()[i]);
        assert!((y.data()[i] - want).abs() <= 1e-12);
    }
}

#[test]
fn scalar_broadcast_operand() {
    let x = rand_tensor(Shape::new(1, 2, 3, 3), 20);
    let y = elementwise(ElementwiseOp::Scale, &x, Operand::Scalar(-2.5)).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert_eq!(*b, -2.5 * a);
    }
}

#[test]
fn f32_and_f64_agree() {
    let x = rand_tensor(Shape::new(1, 4, 16, 16), 21);
    let l64 = PdcLayer::<f64>::new(4, 7, 3, &mut rng(22)).unwrap().with_alpha_mode(AlphaMode::Fixed(0.4));
    let l32 = PdcLayer::<f32>::new(4, 7, 3, &mut rng(22)).unwrap().with_alpha_mode(AlphaMode::Fixed(0.4));
    let y64 = pdc_forward(&x, &l64).unwrap();
    let y32 = pdc_forward(&x.cast::<f32>(), &l32).unwrap().cast::<f64>();
    assert!(max_abs(&y64, &y32) <= 1e-5);
}
