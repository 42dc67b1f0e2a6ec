//! The synthetic depth-discriminable benchmark: a fixed train/test split and
//! a single training protocol shared by the variant comparison and the α
//! sweep.

use std::time::Instant;

use serde::Serialize;

use super::data::{gen_scene, scene_seed, GenConfig, SegSample};
use super::train::{train, EpochRecord, TrainConfig};
use super::{evaluate, NetConfig, ToyPdcNet, Variant};
use crate::error::{Error, Result};
use crate::params::Parameterized;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub gen: GenConfig,
    pub train_count: usize,
    pub test_count: usize,
    /// Dataset seed; scenes `0..train_count` train, the next `test_count` test.
    pub data_seed: u64,
    /// `seed` is overwritten per run.
    pub train: TrainConfig,
    pub channels: [usize; 3],
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            gen: GenConfig::default(),
            train_count: 250,
            test_count: 50,
            data_seed: 1,
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            channels: [16, 32, 64],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkData {
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl BenchmarkData {
    pub fn generate(cfg: &BenchmarkConfig) -> Result<Self> {
        let scene = |i| gen_scene(scene_seed(cfg.data_seed, i), &cfg.gen);
        let train = (0..cfg.train_count).map(scene).collect::<Result<_>>()?;
        let test = (cfg.train_count..cfg.train_count + cfg.test_count)
            .map(scene)
            .collect::<Result<_>>()?;
        Ok(BenchmarkData { train, test })
    }
}

/// Outcome of one training run, scored on the test split after the last epoch.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub fixed_alpha: Option<f64>,
    pub seed: u64,
    pub params: usize,
    pub pixel_acc: f64,
    pub miou: f64,
    /// Effective α of every context-module stage after training, RGB first.
    pub alphas: Vec<f64>,
    pub seconds: f64,
    pub log: Vec<EpochRecord>,
}

/// Trains one network from `seed` and scores it on the test split.
pub fn run(
    data: &BenchmarkData,
    cfg: &BenchmarkConfig,
    variant: Variant,
    fixed_alpha: Option<f64>,
    seed: u64,
) -> Result<RunResult> {
    let classes = cfg.gen.classes;
    let mut net = ToyPdcNet::<f32>::new(
        NetConfig {
            channels: cfg.channels,
            classes,
            variant,
            fixed_alpha,
        },
        seed,
    )?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let start = Instant::now();
    let log = train(&mut net, &data.train, &[], &tc, |_| {})?;
    let cm = evaluate(&net, &data.test, tc.batch)?;
    let (rgb, depth): (Vec<_>, Vec<_>) = net.context_modules().map(|(r, d)| (r.alphas(), d.alphas())).unzip();
    let alphas = rgb
        .into_iter()
        .flatten()
        .chain(depth.into_iter().flatten())
        .map(f64::from)
        .collect();
    Ok(RunResult {
        variant,
        fixed_alpha,
        seed,
        params: net.param_count(),
        pixel_acc: cm.pixel_acc(),
        miou: cm.miou(),
        alphas,
        seconds: start.elapsed().as_secs_f64(),
        log,
    })
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() || xs.iter().any(|x| x.is_nan()) {
        return Err(Error::Contract("median needs non-empty, NaN-free input".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}
