//! Toy two-branch RGB-D segmentation network.
//!
//! Each branch is a stride-2 stem followed by three stages of residual
//! depthwise-separable blocks (stride-2 transitions between stages). After
//! every stage the RGB branch applies its context module (CPDC for the full
//! model) and the depth branch its own (PDC); the raw module outputs are fused
//! by an [`EcfLayer`] whose result becomes the next RGB stage input. The depth
//! branch continues from its unfused features. The decoder projects the
//! stage-1 and stage-3 fusions, upsamples the latter, concatenates, classifies
//! with a 1×1 conv and upsamples bilinearly to the input size.

pub mod benchmark;
pub mod data;
pub mod metrics;
pub mod train;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::clk::CpdcLayer;
use crate::error::{Error, Result};
use crate::fusion::EcfLayer;
use crate::io::{Array, Checkpoint};
use crate::params::{join, Parameterized};
use crate::pdc::{AlphaMode, PdcLayer};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, ConvWeights, Shape, Tensor};

pub use data::{gen_scene, stack, Batch, GenConfig, SegSample};
pub use metrics::{cross_entropy, metrics, predict, softmax, ConfusionMatrix, LabelGrid, Metrics};

const NORM_EPS: f64 = 1e-5;
const BLOCKS_PER_STAGE: usize = 2;

/// Placement of the context modules; mirrors the rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// PDC on depth, CPDC on RGB.
    Full,
    /// Same structure as `Full` with every α held at 0, i.e. plain
    /// depthwise convolutions.
    VanillaBaseline,
    /// CPDC on depth, PDC on RGB.
    Swap,
    /// PDC on depth, vanilla cascade on RGB.
    PdcOnly,
    /// Vanilla 5×5 on depth, CPDC on RGB.
    CpdcOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::VanillaBaseline,
        Variant::Swap,
        Variant::PdcOnly,
        Variant::CpdcOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::VanillaBaseline => "vanilla-baseline",
            Variant::Swap => "swap",
            Variant::PdcOnly => "pdc-only",
            Variant::CpdcOnly => "cpdc-only",
        }
    }

    fn code(self) -> i32 {
        Variant::ALL.iter().position(|&v| v == self).expect("listed") as i32
    }

    fn from_code(c: i32) -> Option<Self> {
        usize::try_from(c).ok().and_then(|i| Variant::ALL.get(i).copied())
    }

    /// `(rgb, depth)` module kinds.
    fn kinds(self) -> (ModuleKind, ModuleKind) {
        use ModuleKind::*;
        match self {
            Variant::Full => (Cpdc, Pdc),
            Variant::VanillaBaseline => (VanillaCascade, VanillaSingle),
            Variant::Swap => (Pdc, Cpdc),
            Variant::PdcOnly => (VanillaCascade, Pdc),
            Variant::CpdcOnly => (Cpdc, VanillaSingle),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ModuleKind {
    Pdc,
    Cpdc,
    /// PDC structure with α fixed at 0.
    VanillaSingle,
    /// CPDC structure with both α fixed at 0.
    VanillaCascade,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub channels: [usize; 3],
    pub classes: usize,
    pub variant: Variant,
    /// `None` trains α; `Some(a)` fixes every non-vanilla α to `a`.
    pub fixed_alpha: Option<f64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: [16, 32, 64],
            classes: 5,
            variant: Variant::Full,
            fixed_alpha: None,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0 || c > 512) {
            return Err(Error::Config(format!("stage channels must be in 1..=512, got {:?}", self.channels)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if let Some(a) = self.fixed_alpha {
            if !a.is_finite() {
                return Err(Error::Config(format!("fixed alpha must be finite, got {a}")));
            }
        }
        Ok(())
    }
}

/// `silu(affine(standardize(conv(x))))`.
#[derive(Clone, Debug, PartialEq)]
struct NormConv<T> {
    conv: ConvWeights<T>,
    spec: ConvSpec,
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

impl<T: Scalar> NormConv<T> {
    fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        NormConv {
            conv: ConvWeights::init(cout, cin, (3, 3), false, rng),
            spec: ConvSpec::dense(3).with_stride(2),
            gamma: Tensor::ones(Shape::new(1, cout, 1, 1)),
            beta: Tensor::zeros(Shape::new(1, cout, 1, 1)),
        }
    }

    fn build(&self, g: &mut Graph<T>, p: &str, x: Var) -> Result<Var> {
        let (w, _) = g.bind_conv(&join(p, "conv"), &self.conv);
        let y = g.conv2d(x, w, None, self.spec)?;
        let y = g.standardize(y, T::lit(NORM_EPS))?;
        let ga = g.bind(&join(p, "gamma"), &self.gamma);
        let be = g.bind(&join(p, "beta"), &self.beta);
        let y = g.channel_affine(y, ga, be)?;
        g.silu(y)
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv.visit(&join(p, "conv"), f);
        f(join(p, "gamma"), &self.gamma);
        f(join(p, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(p, "conv"), f);
        f(join(p, "gamma"), &mut self.gamma);
        f(join(p, "beta"), &mut self.beta);
    }
}

/// `silu(x + affine(standardize(pw(dw3(x)))))`. The pointwise conv has no
/// bias: standardization would cancel it.
#[derive(Clone, Debug, PartialEq)]
struct ResBlock<T> {
    dw: ConvWeights<T>,
    pw: ConvWeights<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        ResBlock {
            dw: ConvWeights::init(c, 1, (3, 3), false, rng),
            pw: ConvWeights::init(c, c, (1, 1), false, rng),
            gamma: Tensor::ones(Shape::new(1, c, 1, 1)),
            beta: Tensor::zeros(Shape::new(1, c, 1, 1)),
        }
    }

    fn build(&self, g: &mut Graph<T>, p: &str, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        let (dw, _) = g.bind_conv(&join(p, "dw"), &self.dw);
        let (pw, _) = g.bind_conv(&join(p, "pw"), &self.pw);
        let h = g.conv2d(x, dw, None, ConvSpec::depthwise(3, 1, c))?;
        let h = g.conv2d(h, pw, None, ConvSpec::pointwise())?;
        let h = g.standardize(h, T::lit(NORM_EPS))?;
        let ga = g.bind(&join(p, "gamma"), &self.gamma);
        let be = g.bind(&join(p, "beta"), &self.beta);
        let h = g.channel_affine(h, ga, be)?;
        let y = g.add(x, h)?;
        g.silu(y)
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.dw.visit(&join(p, "dw"), f);
        self.pw.visit(&join(p, "pw"), f);
        f(join(p, "gamma"), &self.gamma);
        f(join(p, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.dw.visit_mut(&join(p, "dw"), f);
        self.pw.visit_mut(&join(p, "pw"), f);
        f(join(p, "gamma"), &mut self.gamma);
        f(join(p, "beta"), &mut self.beta);
    }
}

/// Context module applied after a stage. Its raw (ungated) output feeds ECF.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextModule<T> {
    Pdc(PdcLayer<T>),
    Cpdc(CpdcLayer<T>),
}

impl<T: Scalar> ContextModule<T> {
    fn new<R: Rng>(kind: ModuleKind, c: usize, fixed_alpha: Option<f64>, rng: &mut R) -> Self {
        let mode = match (kind, fixed_alpha) {
            (ModuleKind::VanillaSingle | ModuleKind::VanillaCascade, _) => AlphaMode::Fixed(T::zero()),
            (_, Some(a)) => AlphaMode::Fixed(T::lit(a)),
            (_, None) => AlphaMode::Learnable,
        };
        match kind {
            ModuleKind::Pdc | ModuleKind::VanillaSingle => {
                ContextModule::Pdc(PdcLayer::default_for(c, rng).with_alpha_mode(mode))
            }
            ModuleKind::Cpdc | ModuleKind::VanillaCascade => {
                ContextModule::Cpdc(CpdcLayer::new(c, rng).with_alpha_mode(mode))
            }
        }
    }

    fn build(&self, g: &mut Graph<T>, p: &str, x: Var) -> Result<Var> {
        match self {
            ContextModule::Pdc(l) => l.build(g, p, x),
            ContextModule::Cpdc(l) => l.build(g, p, x),
        }
    }

    /// Kernels and α only; the module's own output gate is unused here.
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            ContextModule::Pdc(l) => l.visit_core(p, f),
            ContextModule::Cpdc(l) => {
                l.stage5.visit_core(&join(p, "stage5"), f);
                l.stage7.visit_core(&join(p, "stage7"), f);
            }
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            ContextModule::Pdc(l) => l.visit_core_mut(p, f),
            ContextModule::Cpdc(l) => {
                l.stage5.visit_core_mut(&join(p, "stage5"), f);
                l.stage7.visit_core_mut(&join(p, "stage7"), f);
            }
        }
    }

    /// `(parameter name, effective α)` of every PDC stage, under prefix `p`.
    fn named_alphas(&self, p: &str) -> Vec<(String, f64)> {
        let eff = |l: &PdcLayer<T>| crate::pdc::alpha_effective(l).as_f64();
        match self {
            ContextModule::Pdc(l) => vec![(join(p, "alpha"), eff(l))],
            ContextModule::Cpdc(l) => vec![
                (join(p, "stage5.alpha"), eff(&l.stage5)),
                (join(p, "stage7.alpha"), eff(&l.stage7)),
            ],
        }
    }

    /// Effective α of every PDC stage in this module.
    pub fn alphas(&self) -> Vec<T> {
        match self {
            ContextModule::Pdc(l) => vec![crate::pdc::alpha_effective(l)],
            ContextModule::Cpdc(l) => vec![
                crate::pdc::alpha_effective(&l.stage5),
                crate::pdc::alpha_effective(&l.stage7),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Branch<T> {
    stem: NormConv<T>,
    /// Transition conv into each stage after the first.
    down: Vec<NormConv<T>>,
    blocks: Vec<Vec<ResBlock<T>>>,
    modules: Vec<ContextModule<T>>,
}

impl<T: Scalar> Branch<T> {
    fn new<R: Rng>(cin: usize, cfg: &NetConfig, kind: ModuleKind, rng: &mut R) -> Self {
        let ch = cfg.channels;
        Branch {
            stem: NormConv::new(cin, ch[0], rng),
            down: (1..3).map(|i| NormConv::new(ch[i - 1], ch[i], rng)).collect(),
            blocks: ch
                .iter()
                .map(|&c| (0..BLOCKS_PER_STAGE).map(|_| ResBlock::new(c, rng)).collect())
                .collect(),
            modules: ch
                .iter()
                .map(|&c| ContextModule::new(kind, c, cfg.fixed_alpha, rng))
                .collect(),
        }
    }

    /// Stage `i` body: transition (if any) then residual blocks.
    fn stage(&self, g: &mut Graph<T>, p: &str, i: usize, x: Var) -> Result<Var> {
        let mut x = if i == 0 {
            self.stem.build(g, &join(p, "stem"), x)?
        } else {
            self.down[i - 1].build(g, &format!("{p}.s{}.down", i + 1), x)?
        };
        for (j, b) in self.blocks[i].iter().enumerate() {
            x = b.build(g, &format!("{p}.s{}.b{}", i + 1, j + 1), x)?;
        }
        Ok(x)
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit(&join(p, "stem"), f);
        for i in 0..3 {
            if i > 0 {
                self.down[i - 1].visit(&format!("{p}.s{}.down", i + 1), f);
            }
            for (j, b) in self.blocks[i].iter().enumerate() {
                b.visit(&format!("{p}.s{}.b{}", i + 1, j + 1), f);
            }
            self.modules[i].visit(&format!("{p}.s{}.ctx", i + 1), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(p, "stem"), f);
        for i in 0..3 {
            if i > 0 {
                self.down[i - 1].visit_mut(&format!("{p}.s{}.down", i + 1), f);
            }
            for (j, b) in self.blocks[i].iter_mut().enumerate() {
                b.visit_mut(&format!("{p}.s{}.b{}", i + 1, j + 1), f);
            }
            self.modules[i].visit_mut(&format!("{p}.s{}.ctx", i + 1), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyPdcNet<T> {
    pub config: NetConfig,
    rgb: Branch<T>,
    depth: Branch<T>,
    pub ecf: Vec<EcfLayer<T>>,
    dec_low: ConvWeights<T>,
    dec_high: ConvWeights<T>,
    pub classifier: ConvWeights<T>,
}

/// Gradients keyed by parameter name.
pub type NamedGrads<T> = HashMap<String, Tensor<T>>;

impl<T: Scalar> ToyPdcNet<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rk, dk) = config.variant.kinds();
        let ch = config.channels;
        let rgb = Branch::new(3, &config, rk, &mut rng);
        let depth = Branch::new(1, &config, dk, &mut rng);
        let ecf = ch.iter().map(|&c| EcfLayer::new(c, &mut rng)).collect();
        let d = ch[0];
        Ok(ToyPdcNet {
            rgb,
            depth,
            ecf,
            dec_low: ConvWeights::init(d, ch[0], (1, 1), true, &mut rng),
            dec_high: ConvWeights::init(d, ch[2], (1, 1), true, &mut rng),
            classifier: ConvWeights::init(config.classes, 2 * d, (1, 1), true, &mut rng),
            config,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Context modules as `(rgb, depth)` per stage.
    pub fn context_modules(&self) -> impl Iterator<Item = (&ContextModule<T>, &ContextModule<T>)> {
        self.rgb.modules.iter().zip(&self.depth.modules)
    }

    /// Effective α of every context-module stage keyed by parameter name,
    /// RGB stages first.
    pub fn effective_alphas(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (branch, name) in [(&self.rgb, "rgb"), (&self.depth, "depth")] {
            for (i, m) in branch.modules.iter().enumerate() {
                out.extend(m.named_alphas(&format!("{name}.s{}.ctx", i + 1)));
            }
        }
        out
    }

    /// Logits `N × M × H × W` recorded on `g`.
    pub fn build(&self, g: &mut Graph<T>, rgb: Var, depth: Var) -> Result<Var> {
        let rs = g.shape(rgb);
        let ds = g.shape(depth);
        if rs.c != 3 {
            return Err(Error::dim("channels", 3, rs.c));
        }
        if ds.c != 1 {
            return Err(Error::dim("channels", 1, ds.c));
        }
        Shape::new(rs.n, 1, rs.h, rs.w).expect_eq(&ds)?;

        let mut r = rgb;
        let mut d = depth;
        let mut fused = Vec::with_capacity(3);
        for i in 0..3 {
            let fr = self.rgb.stage(g, "rgb", i, r)?;
            let fd = self.depth.stage(g, "depth", i, d)?;
            let hr = self.rgb.modules[i].build(g, &format!("rgb.s{}.ctx", i + 1), fr)?;
            let hd = self.depth.modules[i].build(g, &format!("depth.s{}.ctx", i + 1), fd)?;
            let f = self.ecf[i].build(g, &format!("ecf{}", i + 1), fr, fd, hr, hd)?;
            fused.push(f);
            r = f;
            d = fd;
        }

        let (lw, lb) = g.bind_conv("dec.low", &self.dec_low);
        let (hw, hb) = g.bind_conv("dec.high", &self.dec_high);
        let (cw, cb) = g.bind_conv("dec.cls", &self.classifier);
        let low = g.conv2d(fused[0], lw, lb, ConvSpec::pointwise())?;
        let low = g.silu(low)?;
        let high = g.conv2d(fused[2], hw, hb, ConvSpec::pointwise())?;
        let high = g.silu(high)?;
        let ls = g.shape(low);
        let high = g.upsample_bilinear(high, ls.h, ls.w)?;
        let cat = g.concat_channels(low, high)?;
        let logits = g.conv2d(cat, cw, cb, ConvSpec::pointwise())?;
        g.upsample_bilinear(logits, rs.h, rs.w)
    }

    /// Inference logits.
    pub fn forward(&self, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let r = g.constant(rgb.clone());
        let d = g.constant(depth.clone());
        let y = self.build(&mut g, r, d)?;
        Ok(g.into_value(y))
    }

    /// Mean cross-entropy on `batch` and its gradient for every parameter the
    /// forward pass uses.
    pub fn loss_and_grads(&self, batch: &Batch<T>) -> Result<(T, NamedGrads<T>)> {
        let mut g = Graph::with_params();
        let r = g.constant(batch.rgb.clone());
        let d = g.constant(batch.depth.clone());
        let logits = self.build(&mut g, r, d)?;
        let loss = g.cross_entropy(logits, &batch.labels.data)?;
        let grads = g.backward(loss)?;
        let mut out: NamedGrads<T> = HashMap::new();
        for (name, v) in g.params() {
            let gv = grads.get_or_zeros(&g, *v);
            match out.get_mut(name) {
                Some(acc) => acc.add_assign_unchecked(&gv),
                None => {
                    out.insert(name.clone(), gv);
                }
            }
        }
        Ok((g.value(loss).item()?, out))
    }

    /// Serialises the configuration and every parameter.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let c = &self.config;
        let mut ck = Checkpoint::default();
        ck.push(
            META_CONFIG,
            Array::from_i32(
                vec![6],
                vec![
                    NET_FORMAT,
                    c.channels[0] as i32,
                    c.channels[1] as i32,
                    c.channels[2] as i32,
                    c.classes as i32,
                    c.variant.code(),
                ],
            )?,
        );
        if let Some(a) = c.fixed_alpha {
            ck.push(META_ALPHA, Array::from_tensor_dims(&Tensor::scalar(a), vec![1]));
        }
        self.visit("", &mut |n, t| ck.push(n, Array::from_tensor(t)));
        Ok(ck)
    }

    /// Rebuilds a network from [`ToyPdcNet::to_checkpoint`] output. Unknown
    /// names, missing names and shape mismatches are errors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "checkpoint",
            reason,
        };
        let meta = ck
            .get(META_CONFIG)
            .and_then(|a| a.as_i32())
            .ok_or_else(|| bad(format!("missing i32 entry {META_CONFIG}")))?;
        if meta.len() != 6 || meta[0] != NET_FORMAT {
            return Err(bad(format!("unsupported {META_CONFIG} {meta:?}")));
        }
        let dim = |v: i32| usize::try_from(v).map_err(|_| bad(format!("negative size {v}")));
        let variant = Variant::from_code(meta[5]).ok_or_else(|| bad(format!("unknown variant code {}", meta[5])))?;
        let fixed_alpha = match ck.get(META_ALPHA) {
            Some(a) => Some(a.to_tensor::<f64>()?.item()?),
            None => None,
        };
        let config = NetConfig {
            channels: [dim(meta[1])?, dim(meta[2])?, dim(meta[3])?],
            classes: dim(meta[4])?,
            variant,
            fixed_alpha,
        };
        let mut net = ToyPdcNet::new(config, 0)?;
        net.load_params(ck)?;
        Ok(net)
    }

    /// Overwrites every parameter from `ck`.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut expected = std::collections::HashSet::new();
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            let res = match ck.get(&name) {
                None => Err(Error::Format {
                    kind: "checkpoint",
                    reason: format!("missing parameter {name}"),
                }),
                Some(a) => a.to_tensor::<T>().and_then(|v| {
                    v.shape().expect_eq(&t.shape()).map_err(|e| Error::Format {
                        kind: "checkpoint",
                        reason: format!("{name}: {e}"),
                    })?;
                    *t = v;
                    Ok(())
                }),
            };
            if let Err(e) = res {
                err = Some(e);
            }
            expected.insert(name);
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (name, _) in &ck.entries {
            if !name.starts_with("meta.") && !expected.contains(name) {
                return Err(Error::Format {
                    kind: "checkpoint",
                    reason: format!("unknown parameter {name}"),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const META_CONFIG: &str = "meta.config";
const META_ALPHA: &str = "meta.fixed_alpha";
const NET_FORMAT: i32 = 1;

impl<T: Scalar> Parameterized<T> for ToyPdcNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.depth.visit(&join(prefix, "depth"), f);
        for (i, e) in self.ecf.iter().enumerate() {
            e.visit(&join(prefix, &format!("ecf{}", i + 1)), f);
        }
        self.dec_low.visit(&join(prefix, "dec.low"), f);
        self.dec_high.visit(&join(prefix, "dec.high"), f);
        self.classifier.visit(&join(prefix, "dec.cls"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
        self.depth.visit_mut(&join(prefix, "depth"), f);
        for (i, e) in self.ecf.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("ecf{}", i + 1)), f);
        }
        self.dec_low.visit_mut(&join(prefix, "dec.low"), f);
        self.dec_high.visit_mut(&join(prefix, "dec.high"), f);
        self.classifier.visit_mut(&join(prefix, "dec.cls"), f);
    }
}

/// Confusion matrix of `net` over `samples`, evaluated `batch` at a time.
pub fn evaluate<T: Scalar>(net: &ToyPdcNet<T>, samples: &[SegSample], batch: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.classes());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let b = stack::<T>(&refs)?;
        let logits = net.forward(&b.rgb, &b.depth)?;
        cm.add(&predict(&logits), &b.labels)?;
    }
    Ok(cm)
}
