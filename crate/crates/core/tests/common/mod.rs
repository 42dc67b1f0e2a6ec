//! Reference implementations written without any library kernels, used as
//! oracles by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use pdconv::{ConvSpec, ConvWeights, Padding, Shape, Tensor};

/// Direct-loop convolution over f64, one scalar read per tap.
pub fn naive_conv(x: &Tensor<f64>, w: &ConvWeights<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.weights.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (d, s) = (spec.dilation as isize, spec.stride);
    let (ph, pw) = match spec.padding {
        Padding::Same => ((kh - 1) * spec.dilation / 2, (kw - 1) * spec.dilation / 2),
        Padding::Explicit(a, b) => (a, b),
    };
    let oh = (xs.h + 2 * ph - (kh - 1) * spec.dilation - 1) / s + 1;
    let ow = (xs.w + 2 * pw - (kw - 1) * spec.dilation - 1) / s + 1;
    let cin_g = xs.c / spec.groups;
    let cout_g = ws.n / spec.groups;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, oc, oy, ox| {
        let group = oc / cout_g;
        let mut acc = w.bias.as_ref().map_or(0.0, |b| b.data()[oc]);
        for ic in 0..cin_g {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * s) as isize + ky as isize * d - ph as isize;
                    let ix = (ox * s) as isize + kx as isize * d - pw as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.weights.at(oc, ic, ky, kx) * x.at(n, group * cin_g + ic, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Depthwise pixel-difference response `Σ w·(x(p) − α·x(p0))` with zero
/// padding, written as the plain sum of weighted differences.
pub fn naive_pdc(x: &Tensor<f64>, w: &ConvWeights<f64>, k: usize, d: usize, alpha: f64) -> Tensor<f64> {
    let s = x.shape();
    let half = ((k - 1) * d / 2) as isize;
    Tensor::from_fn(s, |n, c, y, xx| {
        let p0 = x.at(n, c, y, xx);
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                let iy = y as isize + (ky * d) as isize - half;
                let ix = xx as isize + (kx * d) as isize - half;
                let v = if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                    x.at(n, c, iy as usize, ix as usize)
                } else {
                    0.0
                };
                acc += w.weights.at(c, 0, ky, kx) * (v - alpha * p0);
            }
        }
        acc
    })
}

/// Pixel accuracy and mIoU by counting pixels class by class, without a
/// confusion matrix. Classes absent from both maps are skipped.
pub fn brute_metrics(pred: &[usize], truth: &[usize], classes: usize) -> (f64, f64) {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let acc = correct as f64 / truth.len() as f64;
    let mut ious = Vec::new();
    for c in 0..classes {
        let inter = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
        let union = pred.iter().zip(truth).filter(|&(&p, &t)| p == c || t == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    (acc, miou)
}

/// Weighted tap offsets of a `k×k` kernel with dilation `d` and unit
/// weights, with `center` added to the zero offset.
pub fn taps(k: usize, d: usize, center: i64) -> HashMap<(i64, i64), i64> {
    let half = ((k - 1) * d / 2) as i64;
    let mut out = HashMap::new();
    for ky in 0..k as i64 {
        for kx in 0..k as i64 {
            *out.entry((ky * d as i64 - half, kx * d as i64 - half)).or_insert(0) += 1;
        }
    }
    *out.entry((0, 0)).or_insert(0) += center;
    out.retain(|_, v| *v != 0);
    out
}

/// Multiset sum: every pair of offsets, weights multiplied.
pub fn compose(a: &HashMap<(i64, i64), i64>, b: &HashMap<(i64, i64), i64>) -> HashMap<(i64, i64), i64> {
    let mut out = HashMap::new();
    for (&(ay, ax), &va) in a {
        for (&(by, bx), &vb) in b {
            *out.entry((ay + by, ax + bx)).or_insert(0) += va * vb;
        }
    }
    out
}

pub fn union_sum(a: &HashMap<(i64, i64), i64>, b: &HashMap<(i64, i64), i64>) -> HashMap<(i64, i64), i64> {
    let mut out = a.clone();
    for (&k, &v) in b {
        *out.entry(k).or_insert(0) += v;
    }
    out
}

/// Lays an offset map onto a `(2r+1)²` row-major grid centered at `(r, r)`.
pub fn to_grid(map: &HashMap<(i64, i64), i64>, r: usize) -> Vec<i64> {
    let side = 2 * r + 1;
    let mut g = vec![0; side * side];
    for (&(dy, dx), &v) in map {
        g[(dy + r as i64) as usize * side + (dx + r as i64) as usize] = v;
    }
    g
}
