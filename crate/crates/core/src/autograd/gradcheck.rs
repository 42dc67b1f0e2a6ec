//! Central-difference gradient checker.

use std::fmt;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::tensor::Tensor;

/// Worst disagreement for one input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub step: f64,
    pub dtype: DType,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "param={} max_rel_err={:.3e} coords={} step={:e} dtype={}",
                e.name,
                e.max_rel_err,
                e.checked,
                self.step,
                self.dtype.name()
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar built by `f` against
/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[(String, Tensor<f64>)], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, step, |_, _| true)
}

/// As [`gradcheck`], restricted to the `(input, coordinate)` pairs for which
/// `select` returns true.
///
/// `f` may return a tensor of any shape; the objective is then the sum of its
/// elements and the central difference is taken term by term before summing,
/// which keeps the round-off of large objective values out of the estimate.
pub fn gradcheck_with<F, S>(
    f: F,
    inputs: &[(String, Tensor<f64>)],
    step: f64,
    select: S,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> bool,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    for (name, t) in inputs {
        if !t.is_finite() {
            return Err(Error::Numeric {
                op: format!("input {name}"),
            });
        }
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let objective = g.sum(root);
    let grads = g.backward(objective)?;

    let eval = |values: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.into_value(root))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, vars[k]);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in 0..t.numel() {
            if !select(k, i) {
                continue;
            }
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let diff: f64 = plus.data().iter().zip(minus.data()).map(|(p, m)| p - m).sum();
            let numeric = diff / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numeric {
                    op: format!("finite difference of {name}[{i}]"),
                });
            }
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            checked += 1;
        }
        entries.push(GradEntry {
            name: name.clone(),
            max_rel_err: worst,
            checked,
        });
    }
    Ok(GradReport {
        entries,
        step,
        dtype: DType::F64,
    })
}
