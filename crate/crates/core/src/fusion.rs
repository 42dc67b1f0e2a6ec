//! Cross-modal fusion of per-stage RGB and depth features:
//!
//! ```text
//! out = η·(gate_rgb(F̂_rgb) ⊗ F̂_rgb ⊕ F_rgb) + λ·(gate_d(F̂_d) ⊗ F̂_d ⊕ F_d)
//! ```
//!
//! `F̂` are the raw (ungated) CPDC / PDC features of each branch.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{join, Parameterized};
use crate::pdc::gate_product;
use crate::scalar::Scalar;
use crate::tensor::{elementwise, pointwise_conv, ConvWeights, ElementwiseOp, Operand, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EcfLayer<T> {
    /// Unconstrained, one element.
    pub eta: Tensor<T>,
    /// Unconstrained, one element.
    pub lambda: Tensor<T>,
    pub gate_rgb: ConvWeights<T>,
    pub gate_depth: ConvWeights<T>,
}

impl<T: Scalar> EcfLayer<T> {
    /// Random gates, `η = λ = 0.5`.
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        EcfLayer {
            eta: Tensor::scalar(T::lit(0.5)),
            lambda: Tensor::scalar(T::lit(0.5)),
            gate_rgb: ConvWeights::init(channels, channels, (1, 1), true, rng),
            gate_depth: ConvWeights::init(channels, channels, (1, 1), true, rng),
        }
    }

    pub fn with_coefficients(mut self, eta: T, lambda: T) -> Self {
        self.eta = Tensor::scalar(eta);
        self.lambda = Tensor::scalar(lambda);
        self
    }

    /// Fusion on `g`; all four features must share one shape.
    pub fn build(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        f_rgb: Var,
        f_depth: Var,
        hat_rgb: Var,
        hat_depth: Var,
    ) -> Result<Var> {
        let s = g.shape(f_rgb);
        for v in [f_depth, hat_rgb, hat_depth] {
            s.expect_eq(&g.shape(v))?;
        }
        let eta = g.bind(&join(prefix, "eta"), &self.eta);
        let lambda = g.bind(&join(prefix, "lambda"), &self.lambda);
        let a = gate_product(g, &join(prefix, "gate_rgb"), &self.gate_rgb, hat_rgb, hat_rgb)?;
        let a = g.add(a, f_rgb)?;
        let a = g.scale_by(a, eta)?;
        let b = gate_product(g, &join(prefix, "gate_depth"), &self.gate_depth, hat_depth, hat_depth)?;
        let b = g.add(b, f_depth)?;
        let b = g.scale_by(b, lambda)?;
        g.add(a, b)
    }
}

impl<T: Scalar> Parameterized<T> for EcfLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "eta"), &self.eta);
        f(join(prefix, "lambda"), &self.lambda);
        self.gate_rgb.visit(&join(prefix, "gate_rgb"), f);
        self.gate_depth.visit(&join(prefix, "gate_depth"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "eta"), &mut self.eta);
        f(join(prefix, "lambda"), &mut self.lambda);
        self.gate_rgb.visit_mut(&join(prefix, "gate_rgb"), f);
        self.gate_depth.visit_mut(&join(prefix, "gate_depth"), f);
    }
}

fn branch<T: Scalar>(gate: &ConvWeights<T>, hat: &Tensor<T>, f: &Tensor<T>, coef: T) -> Result<Tensor<T>> {
    let p = pointwise_conv(hat, gate)?;
    let p = elementwise(ElementwiseOp::Mul, &p, hat)?;
    let p = elementwise(ElementwiseOp::Add, &p, f)?;
    elementwise(ElementwiseOp::Scale, &p, Operand::Scalar(coef))
}

/// Fused feature; see the module docs.
pub fn ecf_fuse<T: Scalar>(
    f_rgb: &Tensor<T>,
    f_depth: &Tensor<T>,
    hat_rgb: &Tensor<T>,
    hat_depth: &Tensor<T>,
    layer: &EcfLayer<T>,
) -> Result<Tensor<T>> {
    let s = f_rgb.shape();
    for t in [f_depth, hat_rgb, hat_depth] {
        s.expect_eq(&t.shape())?;
    }
    let a = branch(&layer.gate_rgb, hat_rgb, f_rgb, layer.eta.item()?)?;
    let b = branch(&layer.gate_depth, hat_depth, f_depth, layer.lambda.item()?)?;
    elementwise(ElementwiseOp::Add, &a, &b)
}
