use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    /// `a ⊗ b`
    Mul,
    /// `a ⊕ b`
    Add,
    Sub,
    Div,
    /// `a * s`; with a tensor operand this is the same as `Mul`.
    Scale,
}

/// Right-hand side of an elementwise op. No broadcasting beyond scalars.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

fn apply<T: Scalar>(op: ElementwiseOp, a: T, b: T) -> T {
    match op {
        ElementwiseOp::Mul | ElementwiseOp::Scale => a * b,
        ElementwiseOp::Add => a + b,
        ElementwiseOp::Sub => a - b,
        ElementwiseOp::Div => a / b,
    }
}

pub fn elementwise<'a, T: Scalar>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    b: impl Into<Operand<'a, T>>,
) -> Result<Tensor<T>> {
    match b.into() {
        Operand::Tensor(b) => a.zip_map(b, |x, y| apply(op, x, y)),
        Operand::Scalar(s) => Ok(a.map(|x| apply(op, x, s))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(Shape::new(2, 3, 4, 5), -2.0, 2.0, &mut rng);
        let ones = Tensor::ones(a.shape());
        assert_eq!(elementwise(ElementwiseOp::Mul, &a, &ones).unwrap(), a);
        let neg = elementwise(ElementwiseOp::Scale, &a, Operand::Scalar(-1.0)).unwrap();
        let z = elementwise(ElementwiseOp::Add, &a, &neg).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_div_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::uniform(Shape::new(1, 2, 6, 6), -3.0, 3.0, &mut rng);
        let b = Tensor::<f32>::uniform(Shape::new(1, 2, 6, 6), 0.5, 2.0, &mut rng);
        let p = elementwise(ElementwiseOp::Mul, &a, &b).unwrap();
        let back = elementwise(ElementwiseOp::Div, &p, &b).unwrap();
        assert!(back.max_rel_diff(&a).unwrap() <= 1e-6);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = Tensor::<f32>::ones(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::ones(Shape::new(1, 2, 3, 4));
        assert!(matches!(
            elementwise(ElementwiseOp::Sub, &a, &b),
            Err(Error::Dimension { axis: "width", .. })
        ));
    }
}
