//! Synthetic RGB-D scenes and their on-disk dataset layout.
//!
//! Every scene holds a "bed" (class 1) and a "pillow" (class 2) resting on it.
//! Both share one RGB color, so only depth separates them. Classes 3 and up
//! are flat decals lying on the background depth plane, so only color
//! separates them from the background (class 0).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::LabelGrid;
use crate::error::{Error, Result};
use crate::io::{read_pdt, write_atomic, write_pdt, Array};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const RGB_NOISE: f64 = 0.02;
pub const DEFAULT_DEPTH_NOISE: f64 = 0.02;
pub const MAX_CLASSES: usize = 8;
/// Smallest pillow, in pixels.
pub const MIN_PILLOW_AREA: usize = 64;

/// Smallest bed side; leaves a 9x9 pillow inside a 2 px rim.
const MIN_BED_SIDE: usize = 13;

/// Decal colors for classes 3, 4, ...
const DECAL_PALETTE: [[f64; 3]; MAX_CLASSES - 3] = [
    [0.20, 0.35, 0.80],
    [0.20, 0.70, 0.30],
    [0.80, 0.20, 0.60],
    [0.80, 0.80, 0.20],
    [0.20, 0.75, 0.75],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Inclusive range of decal shapes per scene.
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub depth_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 48,
            width: 48,
            classes: 5,
            min_shapes: 2,
            max_shapes: 3,
            depth_noise: DEFAULT_DEPTH_NOISE,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 24 || self.width < 24 {
            return bad(format!(
                "scenes must be at least 24x24 to fit a bed, a pillow and decals, got {}x{}",
                self.height, self.width
            ));
        }
        if !(3..=MAX_CLASSES).contains(&self.classes) {
            return bad(format!("classes must be in 3..={MAX_CLASSES}, got {}", self.classes));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > 8 {
            return bad(format!(
                "shape count range {}..={} must be ordered and at most 8",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.classes > 3 && self.max_shapes == 0 {
            return bad("decal classes exist but max_shapes is 0".into());
        }
        if !(0.0..=0.2).contains(&self.depth_noise) {
            return bad(format!("depth_noise must be in [0, 0.2], got {}", self.depth_noise));
        }
        Ok(())
    }
}

/// One scene: `rgb` is `1×3×H×W`, `depth` is `1×1×H×W`, both in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub rgb: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub labels: LabelGrid,
}

impl SegSample {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let (h, w) = (self.labels.h, self.labels.w);
        Shape::new(1, 3, h, w).expect_eq(&self.rgb.shape())?;
        Shape::new(1, 1, h, w).expect_eq(&self.depth.shape())?;
        self.labels.check(classes)
    }
}

#[derive(Clone, Copy, Debug)]
struct Region {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    ellipse: bool,
}

impl Region {
    fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.h || x >= self.x0 + self.w {
            return false;
        }
        if !self.ellipse {
            return true;
        }
        let dy = (y as f64 + 0.5 - self.y0 as f64) / self.h as f64 - 0.5;
        let dx = (x as f64 + 0.5 - self.x0 as f64) / self.w as f64 - 0.5;
        dy * dy + dx * dx <= 0.25
    }

    fn area(&self) -> usize {
        (self.y0..self.y0 + self.h)
            .flat_map(|y| (self.x0..self.x0 + self.w).map(move |x| (y, x)))
            .filter(|&(y, x)| self.contains(y, x))
            .count()
    }

    /// Bounding boxes overlap after growing `self` by `margin`.
    fn overlaps(&self, o: &Region, margin: usize) -> bool {
        self.y0 < o.y0 + o.h + margin
            && o.y0 < self.y0 + self.h + margin
            && self.x0 < o.x0 + o.w + margin
            && o.x0 < self.x0 + self.w + margin
    }
}

fn span<R: Rng>(rng: &mut R, total: usize, lo: f64, hi: f64) -> usize {
    let a = ((total as f64 * lo).round() as usize).max(4);
    let b = ((total as f64 * hi).round() as usize).max(a);
    rng.gen_range(a..=b)
}

fn place<R: Rng>(rng: &mut R, h: usize, w: usize, rh: usize, rw: usize, ellipse: bool) -> Region {
    Region {
        y0: rng.gen_range(0..=h - rh),
        x0: rng.gen_range(0..=w - rw),
        h: rh,
        w: rw,
        ellipse,
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic scene for `seed`.
pub fn gen_scene(seed: u64, cfg: &GenConfig) -> Result<SegSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let bed = {
        let (bh, bw) = (
            span(&mut rng, h, 0.35, 0.55).max(MIN_BED_SIDE),
            span(&mut rng, w, 0.35, 0.55).max(MIN_BED_SIDE),
        );
        place(&mut rng, h, w, bh, bw, false)
    };
    let mut pillow = None;
    for _ in 0..200 {
        let ph = ((bed.h as f64 * rng.gen_range(0.45..0.75)) as usize).min(bed.h - 4);
        let pw = ((bed.w as f64 * rng.gen_range(0.45..0.75)) as usize).min(bed.w - 4);
        let ellipse = rng.gen_bool(0.5);
        let r = Region {
            y0: bed.y0 + rng.gen_range(2..=bed.h - ph - 2),
            x0: bed.x0 + rng.gen_range(2..=bed.w - pw - 2),
            h: ph,
            w: pw,
            ellipse,
        };
        if r.area() >= MIN_PILLOW_AREA {
            pillow = Some(r);
            break;
        }
    }
    // The inset rectangle of a bed at least MIN_BED_SIDE wide is 9x9 or larger.
    let pillow = pillow.unwrap_or(Region {
        y0: bed.y0 + 2,
        x0: bed.x0 + 2,
        h: bed.h - 4,
        w: bed.w - 4,
        ellipse: false,
    });

    let decal_classes = cfg.classes - 3;
    let mut decals = Vec::new();
    if decal_classes > 0 {
        let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
        let offset = rng.gen_range(0..decal_classes);
        for j in 0..count {
            let class = 3 + (offset + j) % decal_classes;
            let mut placed = None;
            for _ in 0..500 {
                let (dh, dw) = (span(&mut rng, h, 0.15, 0.3), span(&mut rng, w, 0.15, 0.3));
                let ellipse = rng.gen_bool(0.5);
                let r = place(&mut rng, h, w, dh, dw, ellipse);
                if !r.overlaps(&bed, 1) {
                    placed = Some(r);
                    break;
                }
            }
            let r = placed.ok_or_else(|| Error::Config(format!("cannot place decal {j} beside the bed in {h}x{w}")))?;
            decals.push((class, r));
        }
    }

    let mut labels = vec![0usize; h * w];
    for (class, r) in &decals {
        for y in 0..h {
            for x in 0..w {
                if r.contains(y, x) {
                    labels[y * w + x] = *class;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if pillow.contains(y, x) {
                labels[y * w + x] = 2;
            } else if bed.contains(y, x) {
                labels[y * w + x] = 1;
            }
        }
    }

    let grey = rng.gen_range(0.35..0.6);
    let bed_rgb = [rng.gen_range(0.6..0.85), rng.gen_range(0.35..0.6), rng.gen_range(0.15..0.35)];
    let mut colors = vec![[grey; 3], bed_rgb, bed_rgb];
    for base in DECAL_PALETTE.iter().take(decal_classes) {
        colors.push(base.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.15, 0.85)));
    }

    let d0 = rng.gen_range(0.8..0.9);
    let (gx, gy) = (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
    let plane = |y: usize, x: usize| d0 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
    let bed_depth = plane(bed.y0 + bed.h / 2, bed.x0 + bed.w / 2) - rng.gen_range(0.15..0.25);
    let pillow_depth = bed_depth - rng.gen_range(0.25..0.4);

    let rgb_noise = Normal::new(0.0, RGB_NOISE).expect("positive sigma");
    let depth_noise = Normal::new(0.0, cfg.depth_noise).expect("non-negative sigma");
    let mut rgb = vec![0f32; 3 * h * w];
    let mut depth = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let class = labels[i];
            for c in 0..3 {
                let v = colors[class][c] + rgb_noise.sample(&mut rng);
                rgb[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
            }
            let d = match class {
                1 => bed_depth,
                2 => pillow_depth,
                _ => plane(y, x),
            };
            depth[i] = (d + depth_noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let (lo, hi) = depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let depth: Vec<f32> = depth
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range) as f32 } else { 0.0 })
        .collect();

    Ok(SegSample {
        rgb: Tensor::new(Shape::new(1, 3, h, w), rgb)?,
        depth: Tensor::new(Shape::new(1, 1, h, w), depth)?,
        labels: LabelGrid::new(1, h, w, labels)?,
    })
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub labels: LabelGrid,
}

/// Stacks samples along the batch axis, casting to `T`.
pub fn stack<T: Scalar>(samples: &[&SegSample]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.labels.h, first.labels.w);
    let n = samples.len();
    let mut rgb = Vec::with_capacity(n * 3 * h * w);
    let mut depth = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        Shape::new(1, 3, h, w).expect_eq(&s.rgb.shape())?;
        Shape::new(1, 1, h, w).expect_eq(&s.depth.shape())?;
        rgb.extend(s.rgb.data().iter().map(|&v| T::lit(v as f64)));
        depth.extend(s.depth.data().iter().map(|&v| T::lit(v as f64)));
        labels.extend_from_slice(&s.labels.data);
    }
    Ok(Batch {
        rgb: Tensor::new(Shape::new(n, 3, h, w), rgb)?,
        depth: Tensor::new(Shape::new(n, 1, h, w), depth)?,
        labels: LabelGrid::new(n, h, w, labels)?,
    })
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "M")]
    pub classes: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_depth_noise")]
    pub depth_noise: f64,
}

fn default_depth_noise() -> f64 {
    DEFAULT_DEPTH_NOISE
}

fn scene_path(dir: &Path, i: usize, kind: &str) -> PathBuf {
    dir.join(format!("scene_{i:05}.{kind}.pdt"))
}

/// Generates `count` scenes into `dir` and writes `manifest.json` last.
pub fn write_dataset(dir: &Path, cfg: &GenConfig, count: usize, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..count {
        let s = gen_scene(scene_seed(seed, i), cfg)?;
        write_pdt(scene_path(dir, i, "rgb"), &Array::from_tensor_dims(&s.rgb, vec![3, s.labels.h, s.labels.w]))?;
        write_pdt(scene_path(dir, i, "depth"), &Array::from_tensor_dims(&s.depth, vec![1, s.labels.h, s.labels.w]))?;
        let labels = s.labels.data.iter().map(|&l| l as i32).collect();
        write_pdt(scene_path(dir, i, "label"), &Array::from_i32(vec![s.labels.h, s.labels.w], labels)?)?;
    }
    let m = Manifest {
        version: MANIFEST_VERSION,
        classes: cfg.classes,
        height: cfg.height,
        width: cfg.width,
        count,
        seed,
        depth_noise: cfg.depth_noise,
    };
    let json = serde_json::to_vec_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("manifest.json");
    write_atomic(&path, &json)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        kind: "manifest",
        reason: e.to_string(),
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format {
            kind: "manifest",
            reason: format!("unsupported version {}", m.version),
        });
    }
    Ok(m)
}

/// Loads every scene listed by `manifest.json`.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SegSample>)> {
    let m = read_manifest(dir)?;
    let (h, w) = (m.height, m.width);
    let mut out = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let rgb = read_pdt(scene_path(dir, i, "rgb"))?.to_tensor::<f32>()?;
        let depth = read_pdt(scene_path(dir, i, "depth"))?.to_tensor::<f32>()?;
        let la = read_pdt(scene_path(dir, i, "label"))?;
        let raw = la.as_i32().ok_or_else(|| Error::Format {
            kind: "label",
            reason: format!("scene {i} labels are not i32"),
        })?;
        let mut labels = Vec::with_capacity(raw.len());
        for (k, &l) in raw.iter().enumerate() {
            if l < 0 || l as usize >= m.classes {
                return Err(Error::Label {
                    label: l as i64,
                    classes: m.classes,
                    n: i,
                    y: k / w,
                    x: k % w,
                });
            }
            labels.push(l as usize);
        }
        let s = SegSample {
            rgb,
            depth,
            labels: LabelGrid::new(1, h, w, labels)?,
        };
        s.validate(m.classes)?;
        out.push(s);
    }
    Ok((m, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_mean(s: &SegSample, class: usize, plane: impl Fn(usize) -> f32) -> f64 {
        let idx: Vec<usize> = (0..s.labels.data.len()).filter(|&i| s.labels.data[i] == class).collect();
        idx.iter().map(|&i| plane(i) as f64).sum::<f64>() / idx.len() as f64
    }

    #[test]
    fn deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(gen_scene(5, &cfg).unwrap(), gen_scene(5, &cfg).unwrap());
        assert_ne!(gen_scene(5, &cfg).unwrap(), gen_scene(6, &cfg).unwrap());
    }

    #[test]
    fn pillow_differs_from_bed_only_in_depth() {
        let cfg = GenConfig::default();
        for seed in 0..30 {
            let s = gen_scene(seed, &cfg).unwrap();
            s.validate(cfg.classes).unwrap();
            let hw = 48 * 48;
            for c in 0..3 {
                let a = class_mean(&s, 1, |i| s.rgb.data()[c * hw + i]);
                let b = class_mean(&s, 2, |i| s.rgb.data()[c * hw + i]);
                assert!((a - b).abs() <= 0.01, "seed {seed} channel {c}: {a} vs {b}");
            }
            let a = class_mean(&s, 1, |i| s.depth.data()[i]);
            let b = class_mean(&s, 2, |i| s.depth.data()[i]);
            assert!(a - b >= 0.2, "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn smallest_scenes_always_generate() {
        for (h, w) in [(24, 24), (24, 40), (32, 32)] {
            let cfg = GenConfig {
                height: h,
                width: w,
                ..GenConfig::default()
            };
            for seed in 0..300 {
                let s = gen_scene(seed, &cfg).unwrap();
                s.validate(cfg.classes).unwrap();
                let pillow = s.labels.data.iter().filter(|&&l| l == 2).count();
                assert!(pillow >= 40, "{h}x{w} seed {seed}: {pillow} pillow pixels");
            }
        }
    }

    #[test]
    fn infeasible_configs() {
        let small = GenConfig {
            height: 12,
            ..GenConfig::default()
        };
        assert!(matches!(gen_scene(0, &small), Err(Error::Config(_))));
        let many = GenConfig {
            classes: 20,
            ..GenConfig::default()
        };
        assert!(matches!(gen_scene(0, &many), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            height: 32,
            width: 32,
            classes: 4,
            ..GenConfig::default()
        };
        let m = write_dataset(dir.path(), &cfg, 3, 9).unwrap();
        let (m2, samples) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s, &gen_scene(scene_seed(9, i), &cfg).unwrap());
        }
    }
}
