use pdconv::io::{Array, Checkpoint};
use pdconv::network::data::scene_seed;
use pdconv::network::train::{step, Sgd};
use pdconv::network::{gen_scene, stack, GenConfig, NetConfig, SegSample, ToyPdcNet, Variant};
use pdconv::params::Parameterized;
use pdconv::{Error, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> NetConfig {
    NetConfig {
        channels: [4, 6, 8],
        classes: 4,
        variant,
        fixed_alpha: None,
    }
}

fn inputs(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng),
        Tensor::uniform(Shape::new(1, 1, 16, 16), 0.0, 1.0, &mut rng),
    )
}

fn scenes(n: usize) -> Vec<SegSample> {
    let cfg = GenConfig {
        height: 32,
        width: 32,
        classes: 4,
        ..GenConfig::default()
    };
    (0..n).map(|i| gen_scene(scene_seed(9, i), &cfg).unwrap()).collect()
}

#[test]
fn zero_classifier_gives_zero_logits() {
    let mut net = ToyPdcNet::<f32>::new(small(Variant::Full), 1).unwrap();
    net.classifier.weights = Tensor::zeros(net.classifier.weights.shape());
    net.classifier.bias = net.classifier.bias.as_ref().map(|b| Tensor::zeros(b.shape()));
    let (r, d) = inputs(2);
    let y = net.forward(&r, &d).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 4, 16, 16));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bit_exact_across_runs() {
    for v in Variant::ALL {
        let (r, d) = inputs(3);
        let a = ToyPdcNet::<f32>::new(small(v), 4).unwrap().forward(&r, &d).unwrap();
        let b = ToyPdcNet::<f32>::new(small(v), 4).unwrap().forward(&r, &d).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{v}");
        assert!(a.is_finite());
    }
}

#[test]
fn variants_have_matched_parameter_counts() {
    let count = |v| ToyPdcNet::<f32>::new(small(v), 0).unwrap().param_count();
    assert_eq!(count(Variant::Full), count(Variant::VanillaBaseline));
    assert_eq!(count(Variant::Full), count(Variant::Swap));
}

#[test]
fn vanilla_baseline_alphas_are_zero() {
    let net = ToyPdcNet::<f32>::new(small(Variant::VanillaBaseline), 0).unwrap();
    let alphas = net.effective_alphas();
    assert_eq!(alphas.len(), 9);
    assert!(alphas.iter().all(|(_, a)| *a == 0.0));
    let full = ToyPdcNet::<f32>::new(small(Variant::Full), 0).unwrap();
    assert!(full.effective_alphas().iter().all(|(_, a)| *a == 0.5));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let cfg = NetConfig {
            fixed_alpha: (v == Variant::Swap).then_some(0.3),
            ..small(v)
        };
        let net = ToyPdcNet::<f32>::new(cfg, 5).unwrap();
        let path = dir.path().join(format!("{v}.pdck"));
        net.save(&path).unwrap();
        let back = ToyPdcNet::<f32>::load(&path).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.named_params(""), net.named_params(""));
        let (r, d) = inputs(6);
        let (a, b) = (net.forward(&r, &d).unwrap(), back.forward(&r, &d).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn checkpoint_rejects_unknown_missing_and_misshapen_entries() {
    let net = ToyPdcNet::<f32>::new(small(Variant::Full), 7).unwrap();
    let ck = net.to_checkpoint().unwrap();
    let format_err = |ck: &Checkpoint| match ToyPdcNet::<f32>::from_checkpoint(ck) {
        Err(Error::Format { reason, .. }) => reason,
        other => panic!("expected a format error, got {other:?}"),
    };

    let mut extra = ck.clone();
    extra.push("rgb.s1.extra", Array::from_tensor(&Tensor::<f32>::scalar(1.0)));
    assert!(format_err(&extra).contains("unknown parameter rgb.s1.extra"));

    let mut missing = ck.clone();
    missing.entries.retain(|(n, _)| n != "dec.cls.weight");
    assert!(format_err(&missing).contains("missing parameter dec.cls.weight"));

    let mut bent = ck.clone();
    for (n, a) in bent.entries.iter_mut() {
        if n == "ecf1.eta" {
            *a = Array::from_tensor(&Tensor::<f32>::zeros(Shape::new(1, 1, 1, 2)));
        }
    }
    assert!(format_err(&bent).contains("ecf1.eta"));
}

fn loss_trace(steps: usize) -> Vec<u64> {
    let data = scenes(4);
    let refs: Vec<&SegSample> = data.iter().collect();
    let batch = stack::<f32>(&refs).unwrap();
    let mut net = ToyPdcNet::<f32>::new(small(Variant::Full), 8).unwrap();
    let mut opt = Sgd::new(0.9, 1e-4);
    (0..steps)
        .map(|i| step(&mut net, &mut opt, &batch, 1e-2, i).unwrap().to_bits())
        .collect()
}

#[test]
fn loss_trace_is_bit_exact() {
    let a = loss_trace(10);
    assert_eq!(a, loss_trace(10));
    assert!(a.iter().all(|&b| f64::from_bits(b).is_finite()));
}

#[test]
fn nan_input_reports_divergence() {
    let data = scenes(2);
    let refs: Vec<&SegSample> = data.iter().collect();
    let mut batch = stack::<f32>(&refs).unwrap();
    batch.rgb.data_mut()[5] = f32::NAN;
    let mut net = ToyPdcNet::<f32>::new(small(Variant::Full), 8).unwrap();
    let mut opt = Sgd::new(0.9, 0.0);
    assert!(matches!(step(&mut net, &mut opt, &batch, 1e-2, 3), Err(Error::Divergence { iter: 3 })));
}
