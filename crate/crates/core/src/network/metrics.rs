//! Cross-entropy, softmax and confusion-matrix metrics.

use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Integer class map indexed `(n, y, x)` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<usize>,
}

impl LabelGrid {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::dim("labels", n * h * w, data.len()));
        }
        Ok(LabelGrid { n, h, w, data })
    }

    /// First entry `>= classes`, as an error carrying its coordinate.
    pub fn check(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&l| l >= classes) {
            None => Ok(()),
            Some(i) => Err(Error::Label {
                label: self.data[i] as i64,
                classes,
                n: i / (self.h * self.w),
                y: (i / self.w) % self.h,
                x: i % self.w,
            }),
        }
    }

    fn same_shape(&self, other: &LabelGrid) -> Result<()> {
        Shape::new(self.n, 1, self.h, self.w).expect_eq(&Shape::new(other.n, 1, other.h, other.w))
    }
}

/// Channel-wise softmax at every pixel.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = logits.clone();
    let d = out.data_mut();
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let mx = (0..s.c).map(|c| d[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for c in 0..s.c {
                let e = (d[idx(c)] - mx).exp();
                d[idx(c)] = e;
                denom += e;
            }
            for c in 0..s.c {
                d[idx(c)] /= denom;
            }
        }
    }
    out
}

/// Per-pixel argmax over channels; ties go to the lowest class.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> LabelGrid {
    let s = logits.shape();
    let plane = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if d[(n * s.c + c) * plane + p] > d[(n * s.c + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    LabelGrid {
        n: s.n,
        h: s.h,
        w: s.w,
        data: out,
    }
}

/// Mean over all pixels of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &LabelGrid) -> Result<T> {
    let s = logits.shape();
    Shape::new(s.n, 1, s.h, s.w).expect_eq(&Shape::new(labels.n, 1, labels.h, labels.w))?;
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.cross_entropy(z, &labels.data)?;
    g.value(l).item()
}

/// `counts[i * m + j]`: pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, preds: &LabelGrid, truth: &LabelGrid) -> Result<()> {
        preds.same_shape(truth)?;
        truth.check(self.classes)?;
        preds.check(self.classes)?;
        for (&p, &t) in preds.data.iter().zip(&truth.data) {
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `Σ p_ii / g`; zero for an empty matrix.
    pub fn pixel_acc(&self) -> f64 {
        let g = self.total();
        if g == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|i| self.get(i, i)).sum();
        diag as f64 / g as f64
    }

    /// `p_ii / (g_i + Σ_j p_ji − p_ii)`, or `None` when class `i` appears in
    /// neither truth nor prediction.
    pub fn iou(&self, i: usize) -> Option<f64> {
        let g_i: u64 = (0..self.classes).map(|j| self.get(i, j)).sum();
        let pred_i: u64 = (0..self.classes).map(|j| self.get(j, i)).sum();
        let union = g_i + pred_i - self.get(i, i);
        (union > 0).then(|| self.get(i, i) as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|i| self.iou(i)).collect()
    }

    /// Mean IoU over classes that appear in truth or prediction.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl From<&ConfusionMatrix> for Metrics {
    fn from(cm: &ConfusionMatrix) -> Self {
        Metrics {
            pixel_acc: cm.pixel_acc(),
            miou: cm.miou(),
            per_class_iou: cm.per_class_iou(),
        }
    }
}

/// Pixel accuracy, mIoU and the confusion matrix of one prediction.
pub fn metrics(preds: &LabelGrid, truth: &LabelGrid, classes: usize) -> Result<(f64, f64, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(preds, truth)?;
    Ok((cm.pixel_acc(), cm.miou(), cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, v: &[usize]) -> LabelGrid {
        LabelGrid::new(1, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn worked_example() {
        let truth = grid(2, 2, &[0, 0, 1, 1]);
        let preds = grid(2, 2, &[0, 1, 1, 1]);
        let (pa, miou, cm) = metrics(&preds, &truth, 2).unwrap();
        assert_eq!(pa, 0.75);
        assert_eq!(cm.iou(0), Some(0.5));
        assert!((cm.iou(1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((miou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let t = grid(1, 3, &[0, 1, 1]);
        let (_, miou, cm) = metrics(&t, &t, 4).unwrap();
        assert_eq!(miou, 1.0);
        assert_eq!(cm.iou(3), None);
    }

    #[test]
    fn constant_prediction() {
        let truth = grid(1, 4, &[0, 1, 2, 3]);
        let preds = grid(1, 4, &[2, 2, 2, 2]);
        assert_eq!(metrics(&preds, &truth, 4).unwrap().0, 0.25);
    }

    #[test]
    fn label_error_coordinates() {
        let truth = LabelGrid::new(2, 2, 3, vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 5, 0]).unwrap();
        let e = metrics(&truth.clone(), &truth, 3).unwrap_err();
        assert!(matches!(e, Error::Label { label: 5, n: 1, y: 1, x: 1, .. }), "{e}");
    }

    #[test]
    fn cross_entropy_cases() {
        let z = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 3));
        let l = LabelGrid::new(1, 2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        assert!((cross_entropy(&z, &l).unwrap() - 4f64.ln()).abs() < 1e-12);
        let z = Tensor::from_fn(Shape::new(1, 4, 2, 3), |_, c, h, w| {
            if c == l.data[h * 3 + w] {
                1000.0
            } else {
                0.0
            }
        });
        assert!(cross_entropy::<f64>(&z, &l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| (n + 3 * c) as f64 - (h * w) as f64 * 7.0);
        let p = softmax(&z);
        for n in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let s: f64 = (0..3).map(|c| p.at(n, c, h, w)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
