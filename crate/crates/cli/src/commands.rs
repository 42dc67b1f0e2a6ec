use std::path::Path;
use std::time::Instant;

use pdconv::clk::{
    analytic_support, clk_flops, clk_forward, cpdc_forward, large_kernel_flops, receptive_field, ClkLayer, CpdcLayer,
    RfMode,
};
use pdconv::io::{write_atomic, write_pdt};
use pdconv::network::data::{read_dataset, read_manifest, write_dataset};
use pdconv::network::train::{train as train_net, EpochRecord};
use pdconv::network::{evaluate, Metrics, SegSample, ToyPdcNet, Variant};
use pdconv::pdc::{equivalence_sweep, pdc_gated, PdcLayer, EQUIVALENCE_TOL_F32, EQUIVALENCE_TOL_F64};
use pdconv::suite;
use pdconv::tensor::{conv2d, flop_count, pointwise_conv, ConvSpec, ConvWeights, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{BenchArgs, CliError, CliResult, EquivalenceArgs, EvalArgs, Exit, GenArgs, GradcheckArgs, RfmapArgs, TrainArgs};

/// Side length the cascade is said to approximate.
const NOMINAL_LARGE_KERNEL: usize = 21;

fn bad_args(message: impl Into<String>) -> CliError {
    CliError::new(Exit::BadArgs, message)
}

fn require_file(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new(Exit::MissingFile, format!("{}: no such file or directory", path.display())))
    }
}

fn parse_variant(name: &str) -> CliResult<Variant> {
    name.parse().map_err(|e: pdconv::Error| bad_args(e.to_string()))
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    if a.dtype != "f64" {
        return Err(bad_args(format!(
            "gradcheck runs at f64 only (got --dtype {}); f32 cannot reach the {:e} tolerance",
            a.dtype,
            suite::TOLERANCE
        )));
    }
    let ops: Vec<&str> = match &a.op {
        Some(op) if suite::OPS.contains(&op.as_str()) => vec![op.as_str()],
        Some(op) => {
            return Err(bad_args(format!("unknown op {op:?}; expected one of {}", suite::OPS.join(", "))));
        }
        None => suite::OPS.to_vec(),
    };
    let mut failed = 0;
    for op in ops {
        let r = suite::run(op, a.seed)?;
        let ok = r.passes(suite::TOLERANCE);
        failed += usize::from(!ok);
        let coords: usize = r.entries.iter().map(|e| e.checked).sum();
        println!(
            "{op:<18} {} max_rel_err={:.3e} tensors={} coords={coords} step={:e} dtype={}",
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_err(),
            r.entries.len(),
            r.step,
            r.dtype.name()
        );
        if a.verbose || !ok {
            for line in r.to_string().lines() {
                println!("    {line}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::new(Exit::Failure, format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

pub fn equivalence(a: &EquivalenceArgs) -> CliResult {
    if a.seeds == 0 {
        return Err(bad_args("--seeds must be positive"));
    }
    let r = equivalence_sweep(a.seeds, a.seed)?;
    println!(
        "instances={} max_dev_f32={:.3e} (tol {:e}) max_dev_f64={:.3e} (tol {:e}) {}",
        r.instances,
        r.max_dev_f32,
        EQUIVALENCE_TOL_F32,
        r.max_dev_f64,
        EQUIVALENCE_TOL_F64,
        if r.passes() { "PASS" } else { "FAIL" }
    );
    if r.passes() {
        Ok(())
    } else {
        Err(CliError::new(Exit::Failure, "definitional and rewritten forms disagree"))
    }
}

pub fn rfmap(a: &RfmapArgs) -> CliResult {
    let modes: Vec<RfMode> = if a.mode == "all" {
        RfMode::ALL.to_vec()
    } else {
        vec![a.mode.parse().map_err(|_| {
            let names: Vec<_> = RfMode::ALL.iter().map(|m| m.name()).collect();
            bad_args(format!("unknown mode {:?}; expected all, {}", a.mode, names.join(", ")))
        })?]
    };
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| pdconv::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let mut mismatched = Vec::new();
    for mode in modes {
        let map = receptive_field(mode)?;
        let exact = map == analytic_support(mode);
        if !exact {
            mismatched.push(mode.name());
        }
        let (h, w) = map.extent();
        print!(
            "mode={mode} extent={h}x{w} support={} holes={} analytic_match={exact}",
            map.support_size(),
            map.holes()
        );
        if matches!(mode, RfMode::Cascade | RfMode::Cpdc) {
            let n = NOMINAL_LARGE_KERNEL;
            print!(" nominal={n}x{n} delta={:+}", h as i64 - n as i64);
        }
        println!();
        if a.ascii {
            print!("{}", map.to_ascii());
        }
        if let Some(dir) = &a.out {
            write_pdt(dir.join(format!("{mode}.pdt")), &map.to_array()?)?;
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            Exit::Failure,
            format!("gradient support differs from the analytic map for {}", mismatched.join(", ")),
        ))
    }
}

fn median_ms(reps: usize, mut f: impl FnMut() -> pdconv::Result<()>) -> pdconv::Result<f64> {
    f()?;
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let s = Instant::now();
        f()?;
        t.push(s.elapsed().as_secs_f64() * 1e3);
    }
    t.sort_by(f64::total_cmp);
    Ok(t[t.len() / 2])
}

pub fn bench(a: &BenchArgs) -> CliResult {
    if a.sizes.is_empty() || a.sizes.contains(&0) || a.channels.is_empty() || a.channels.contains(&0) || a.reps == 0 {
        return Err(bad_args("--sizes, --channels and --reps must be positive"));
    }
    match a.threads {
        Some(0) => Err(bad_args("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::new(Exit::Failure, e.to_string()))?
            .install(|| bench_grid(a)),
        None => bench_grid(a),
    }
}

fn bench_grid(a: &BenchArgs) -> CliResult {
    let threads = rayon::current_num_threads();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    println!("threads={threads} reps={}", a.reps);
    println!("{:<8} {:>6} {:>6} {:>14} {:>10} {:>12}", "op", "size", "C", "MACs", "ms", "MACs/s");
    let mut dominated = true;
    for &s in &a.sizes {
        for &c in &a.channels {
            let x = Tensor::<f32>::uniform(Shape::new(1, c, s, s), -1.0, 1.0, &mut rng);
            let spatial = (s, s);
            let k = NOMINAL_LARGE_KERNEL;
            let big = ConvWeights::<f32>::init(c, 1, (k, k), false, &mut rng);
            let big_spec = ConvSpec::depthwise(k, 1, c);
            let pw = ConvWeights::<f32>::init(c, c, (1, 1), true, &mut rng);
            let clk = ClkLayer::<f32>::new(c, &mut rng);
            let pdc = PdcLayer::<f32>::default_for(c, &mut rng);
            let cpdc = CpdcLayer::<f32>::new(c, &mut rng);
            let pw_macs = flop_count(&ConvSpec::pointwise(), c, c, spatial);
            let rows: [(&str, u64, f64); 4] = [
                (
                    "dw21+pw",
                    large_kernel_flops(k, c, spatial),
                    median_ms(a.reps, || pointwise_conv(&conv2d(&x, &big, &big_spec)?, &pw).map(drop))?,
                ),
                ("clk", clk_flops(c, spatial), median_ms(a.reps, || clk_forward(&x, &clk).map(drop))?),
                (
                    "pdc",
                    flop_count(&pdc.spec, c, c, spatial) + pw_macs,
                    median_ms(a.reps, || pdc_gated(&x, &pdc).map(drop))?,
                ),
                ("cpdc", clk_flops(c, spatial), median_ms(a.reps, || cpdc_forward(&x, &cpdc).map(drop))?),
            ];
            dominated &= rows[1].1 < rows[0].1;
            for (name, macs, ms) in rows {
                println!("{name:<8} {s:>6} {c:>6} {macs:>14} {ms:>10.3} {:>12.3e}", macs as f64 / (ms * 1e-3));
            }
        }
    }
    println!("clk_fewer_macs_than_dw21={dominated}");
    if dominated {
        Ok(())
    } else {
        Err(CliError::new(Exit::Failure, "CLK does not use fewer MACs than the 21x21 kernel"))
    }
}

pub fn gen(a: &GenArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?.generator
        }
        None => Default::default(),
    };
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.classes = a.classes.unwrap_or(cfg.classes);
    cfg.depth_noise = a.depth_noise.unwrap_or(cfg.depth_noise);
    if a.count == 0 {
        return Err(bad_args("--count must be positive"));
    }
    let m = write_dataset(&a.out, &cfg, a.count, a.seed)?;
    println!("{}", serde_json::to_string(&m).expect("manifest serializes"));
    Ok(())
}

fn load_data(dir: &Path) -> CliResult<(usize, Vec<SegSample>)> {
    require_file(&dir.join("manifest.json"))?;
    let (m, samples) = read_dataset(dir)?;
    Ok((m.classes, samples))
}

/// Rewrites the whole log atomically so a crash never leaves a torn line.
fn write_log(path: &Path, records: &[EpochRecord]) -> CliResult {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &a.variant {
        cfg.model.variant = parse_variant(v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (classes, mut train_set) = load_data(&a.data)?;
    let test_set = match &a.test_data {
        Some(dir) => {
            let (m, s) = load_data(dir)?;
            if m != classes {
                return Err(bad_args(format!("test set has {m} classes, training set {classes}")));
            }
            s
        }
        None => {
            let h = cfg.training.holdout;
            if h >= train_set.len() {
                return Err(bad_args(format!(
                    "holdout of {h} leaves no training scenes out of {}",
                    train_set.len()
                )));
            }
            train_set.split_off(train_set.len() - h)
        }
    };
    let net_cfg = cfg.net_config(classes, cfg.model.variant);
    let mut net = ToyPdcNet::<f32>::new(net_cfg, cfg.seed)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));
    let mut records = Vec::new();
    let mut log_err = None;
    let result = train_net(&mut net, &train_set, &test_set, &cfg.train_config(), |r| {
        println!("{}", serde_json::to_string(r).expect("record serializes"));
        records.push(r.clone());
        if log_err.is_none() {
            log_err = write_log(&log_path, &records).err();
        }
    });
    if let Some(e) = log_err {
        return Err(e);
    }
    result?;
    net.save(&a.out)?;
    eprintln!(
        "saved {} ({} variant, {} parameters); log {}",
        a.out.display(),
        cfg.model.variant,
        pdconv::params::Parameterized::param_count(&net),
        log_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StageCoefficients {
    stage: usize,
    eta: f64,
    lambda: f64,
}

#[derive(Serialize)]
struct Params {
    alpha: Vec<(String, f64)>,
    fusion: Vec<StageCoefficients>,
}

#[derive(Serialize)]
struct EvalReport {
    variant: Variant,
    samples: usize,
    #[serde(flatten)]
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<Params>,
}

pub fn eval(a: &EvalArgs) -> CliResult {
    require_file(&a.ckpt)?;
    require_file(&a.data.join("manifest.json"))?;
    if a.batch == 0 {
        return Err(bad_args("--batch must be positive"));
    }
    let net = ToyPdcNet::<f32>::load(&a.ckpt)?;
    let variant = net.config.variant;
    if let Some(v) = &a.variant {
        let want = parse_variant(v)?;
        if want != variant {
            return Err(bad_args(format!(
                "checkpoint {} holds a {variant} network, not {want}",
                a.ckpt.display()
            )));
        }
    }
    let m = read_manifest(&a.data)?;
    if m.classes != net.classes() {
        return Err(bad_args(format!(
            "dataset has {} classes, checkpoint {}",
            m.classes,
            net.classes()
        )));
    }
    let (_, samples) = read_dataset(&a.data)?;
    let cm = evaluate(&net, &samples, a.batch)?;
    let params = a.dump_params.then(|| Params {
        alpha: net.effective_alphas(),
        fusion: net
            .ecf
            .iter()
            .enumerate()
            .map(|(i, e)| StageCoefficients {
                stage: i + 1,
                eta: f64::from(e.eta.data()[0]),
                lambda: f64::from(e.lambda.data()[0]),
            })
            .collect(),
    });
    let report = EvalReport {
        variant,
        samples: samples.len(),
        metrics: Metrics::from(&cm),
        params,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
