//! Named gradient checks covering every differentiable op and composite.
//!
//! Each case builds a small random f64 instance from `seed`, reduces its
//! output to a scalar by an inner product with a fixed random probe, and
//! compares the analytic gradient of every input against central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{gradcheck_with, GradReport, Graph, Var};
use crate::clk::{ClkLayer, CpdcLayer};
use crate::error::{Error, Result};
use crate::fusion::EcfLayer;
use crate::network::{stack, GenConfig, NetConfig, ToyPdcNet};
use crate::params::Parameterized;
use crate::pdc::PdcLayer;
use crate::tensor::{ConvSpec, Shape, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Fraction of network parameter coordinates probed by the `net` case.
pub const NET_FRACTION: f64 = 0.01;

pub const OPS: [&str; 22] = [
    "conv2d",
    "depthwise",
    "pointwise",
    "add",
    "sub",
    "mul",
    "scale",
    "scale_by",
    "sigmoid",
    "silu",
    "standardize",
    "channel_affine",
    "upsample_bilinear",
    "concat_channels",
    "mean",
    "cross_entropy",
    "pdc",
    "clk",
    "parallel",
    "cpdc",
    "ecf",
    "net",
];

type Inputs = Vec<(String, Tensor<f64>)>;

fn data(rng: &mut ChaCha8Rng, specs: &[(&str, Shape)]) -> Inputs {
    specs
        .iter()
        .map(|(n, s)| (n.to_string(), Tensor::uniform(*s, -1.0, 1.0, rng)))
        .collect()
}

/// `Σ y ⊗ r` for a probe `r` that depends only on `seed` and the shape of `y`.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Checks `build` with the first `n_data` inputs passed positionally and the
/// rest preset under their names.
fn check<F>(seed: u64, inputs: Inputs, n_data: usize, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    gradcheck_with(
        |g, v| {
            for (n, &var) in names.iter().zip(v).skip(n_data) {
                g.preset(n.clone(), var);
            }
            let y = build(g, &v[..n_data])?;
            probe(g, y, seed)
        },
        &inputs,
        STEP,
        |_, _| true,
    )
}

fn unary<F>(seed: u64, shape: Shape, op: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ins = data(&mut rng, &[("x", shape)]);
    check(seed, ins, 1, |g, v| op(g, v[0]))
}

fn binary<F>(seed: u64, a: Shape, b: Shape, op: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ins = data(&mut rng, &[("a", a), ("b", b)]);
    check(seed, ins, 2, |g, v| op(g, v[0], v[1]))
}

/// Runs the case named `op`.
pub fn run(op: &str, seed: u64) -> Result<GradReport> {
    let s = Shape::new(2, 3, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        "conv2d" => {
            let ins = data(
                &mut rng,
                &[
                    ("x", Shape::new(2, 3, 6, 5)),
                    ("weight", Shape::new(4, 3, 3, 3)),
                    ("bias", Shape::new(1, 4, 1, 1)),
                ],
            );
            check(seed, ins, 3, |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::dense(3)))
        }
        "depthwise" => {
            let ins = data(
                &mut rng,
                &[("x", Shape::new(1, 2, 9, 8)), ("weight", Shape::new(2, 1, 7, 7))],
            );
            check(seed, ins, 2, |g, v| g.conv2d(v[0], v[1], None, ConvSpec::depthwise(7, 3, 2)))
        }
        "pointwise" => {
            let ins = data(
                &mut rng,
                &[
                    ("x", s),
                    ("weight", Shape::new(2, 3, 1, 1)),
                    ("bias", Shape::new(1, 2, 1, 1)),
                ],
            );
            check(seed, ins, 3, |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::pointwise()))
        }
        "add" => binary(seed, s, s, |g, a, b| g.add(a, b)),
        "sub" => binary(seed, s, s, |g, a, b| g.sub(a, b)),
        "mul" => binary(seed, s, s, |g, a, b| g.mul(a, b)),
        "scale" => unary(seed, s, |g, x| g.scale(x, -1.75)),
        "scale_by" => binary(seed, s, Shape::scalar(), |g, a, k| g.scale_by(a, k)),
        "sigmoid" => unary(seed, s, |g, x| g.sigmoid(x)),
        "silu" => unary(seed, s, |g, x| g.silu(x)),
        "standardize" => unary(seed, s, |g, x| g.standardize(x, 1e-5)),
        "channel_affine" => {
            let c = Shape::new(1, 3, 1, 1);
            let ins = data(&mut rng, &[("x", s), ("gamma", c), ("beta", c)]);
            check(seed, ins, 3, |g, v| g.channel_affine(v[0], v[1], v[2]))
        }
        "upsample_bilinear" => unary(seed, s, |g, x| g.upsample_bilinear(x, 9, 7)),
        "concat_channels" => binary(seed, s, Shape::new(2, 2, 4, 5), |g, a, b| g.concat_channels(a, b)),
        "mean" => unary(seed, s, |g, x| {
            let m = g.mean(x);
            g.scale(m, 3.0)
        }),
        "cross_entropy" => {
            let labels: Vec<usize> = (0..2 * 4 * 5).map(|i| (i * 7 + i / 3) % 3).collect();
            unary(seed, s, move |g, x| g.cross_entropy(x, &labels))
        }
        "pdc" => {
            let mut l = PdcLayer::<f64>::new(2, 5, 1, &mut rng)?;
            l.alpha.data_mut()[0] = 0.3;
            let mut ins = data(&mut rng, &[("x", Shape::new(1, 2, 6, 6))]);
            ins.extend(l.named_params("pdc"));
            check(seed, ins, 1, |g, v| l.build_gated(g, "pdc", v[0]))
        }
        "clk" | "parallel" => {
            let l = ClkLayer::<f64>::new(2, &mut rng);
            let mut ins = data(&mut rng, &[("x", Shape::new(1, 2, 8, 7))]);
            ins.extend(l.named_params("clk"));
            let parallel = op == "parallel";
            check(seed, ins, 1, |g, v| {
                if parallel {
                    l.build_parallel(g, "clk", v[0])
                } else {
                    l.build(g, "clk", v[0])
                }
            })
        }
        "cpdc" => {
            let mut l = CpdcLayer::<f64>::new(2, &mut rng);
            l.stage5.alpha.data_mut()[0] = 0.4;
            l.stage7.alpha.data_mut()[0] = -0.7;
            let mut ins = data(&mut rng, &[("x", Shape::new(1, 2, 7, 7))]);
            ins.extend(l.named_params("cpdc"));
            check(seed, ins, 1, |g, v| l.build_gated(g, "cpdc", v[0]))
        }
        "ecf" => {
            let mut l = EcfLayer::<f64>::new(3, &mut rng);
            l.eta.data_mut()[0] = 0.8;
            l.lambda.data_mut()[0] = -0.3;
            let f = Shape::new(1, 3, 5, 4);
            let mut ins = data(&mut rng, &[("f_rgb", f), ("f_depth", f), ("hat_rgb", f), ("hat_depth", f)]);
            ins.extend(l.named_params("ecf"));
            check(seed, ins, 4, |g, v| l.build(g, "ecf", v[0], v[1], v[2], v[3]))
        }
        "net" => net_case(seed),
        _ => Err(Error::Config(format!(
            "unknown op {op:?}; expected one of {}",
            OPS.join(", ")
        ))),
    }
}

/// Cross-entropy of the default full network on one 32×32 scene, probed at
/// [`NET_FRACTION`] of the parameter coordinates. Scalar parameters (every α,
/// η and λ) are always probed, and every tensor gets at least one coordinate.
fn net_case(seed: u64) -> Result<GradReport> {
    let net = ToyPdcNet::<f64>::new(NetConfig::default(), seed)?;
    let cfg = GenConfig {
        height: 32,
        width: 32,
        ..GenConfig::default()
    };
    let scene = crate::network::gen_scene(seed, &cfg)?;
    let batch = stack::<f64>(&[&scene])?;
    let (rgb, depth, labels) = (batch.rgb, batch.depth, batch.labels.data);

    let params = net.named_params("");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<Vec<bool>> = params
        .iter()
        .map(|(_, t)| {
            let n = t.numel();
            let k = ((n as f64 * NET_FRACTION).round() as usize).clamp(1, n);
            let mut mask = vec![false; n];
            for i in sample(&mut rng, n, k) {
                mask[i] = true;
            }
            mask
        })
        .collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    gradcheck_with(
        |g, v| {
            for (n, &var) in names.iter().zip(v) {
                g.preset(n.clone(), var);
            }
            let r = g.constant(rgb.clone());
            let d = g.constant(depth.clone());
            let logits = net.build(g, r, d)?;
            // Mean cross-entropy, kept per pixel so differences are taken termwise.
            let map = g.cross_entropy_map(logits, &labels)?;
            g.scale(map, 1.0 / labels.len() as f64)
        },
        &params,
        STEP,
        |k, i| chosen[k][i],
    )
}

/// Runs every case in [`OPS`] order.
pub fn run_all(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    OPS.iter().map(|&op| Ok((op, run(op, seed)?))).collect()
}
