mod common;

use common::brute_metrics;
use pdconv::network::data::{gen_scene, GenConfig};
use pdconv::network::metrics::{metrics, softmax, ConfusionMatrix, LabelGrid};
use pdconv::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(v: Vec<usize>, h: usize, w: usize) -> LabelGrid {
    LabelGrid::new(1, h, w, v).unwrap()
}

#[test]
fn fifty_random_maps_match_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in [2usize, 4, 7] {
        for _ in 0..50 {
            let truth: Vec<usize> = (0..256).map(|_| rng.gen_range(0..m)).collect();
            let pred: Vec<usize> = (0..256).map(|_| rng.gen_range(0..m)).collect();
            let (acc, miou, _) = metrics(&grid(pred.clone(), 16, 16), &grid(truth.clone(), 16, 16), m).unwrap();
            let (bacc, bmiou) = brute_metrics(&pred, &truth, m);
            assert_eq!(acc, bacc);
            assert!((miou - bmiou).abs() <= 1e-15, "{miou} vs {bmiou}");
            let (acc, miou, _) = metrics(&grid(truth.clone(), 16, 16), &grid(truth, 16, 16), m).unwrap();
            assert_eq!((acc, miou), (1.0, 1.0));
        }
    }
}

#[test]
fn worked_two_by_two() {
    let (acc, miou, _) = metrics(&grid(vec![0, 1, 1, 1], 2, 2), &grid(vec![0, 0, 1, 1], 2, 2), 2).unwrap();
    assert!((acc - 0.75).abs() <= 1e-9);
    assert!((miou - 7.0 / 12.0).abs() <= 1e-9);
}

proptest! {
    /// Renaming classes by a permutation applied to both maps leaves the
    /// scores unchanged.
    #[test]
    fn scores_are_invariant_under_class_relabeling(
        m in 2usize..=7,
        seed in any::<u64>(),
        len in 1usize..=64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..len).map(|_| rng.gen_range(0..m)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.gen_range(0..m)).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
        let (a0, m0, _) = metrics(&grid(pred.clone(), 1, len), &grid(truth.clone(), 1, len), m).unwrap();
        let (a1, m1, _) = metrics(&grid(relabel(&pred), 1, len), &grid(relabel(&truth), 1, len), m).unwrap();
        prop_assert_eq!(a0, a1);
        prop_assert!((m0 - m1).abs() <= 1e-12);
    }

    #[test]
    fn merged_matrices_equal_one_pass(seed in any::<u64>(), m in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = |n: usize| (0..n).map(|_| rng.gen_range(0..m)).collect::<Vec<usize>>();
        let (p, t) = (labels(40), labels(40));
        let mut parts = ConfusionMatrix::new(m);
        for (pc, tc) in p.chunks(10).zip(t.chunks(10)) {
            let mut one = ConfusionMatrix::new(m);
            one.add(&grid(pc.to_vec(), 1, 10), &grid(tc.to_vec(), 1, 10)).unwrap();
            parts.merge(&one);
        }
        let mut whole = ConfusionMatrix::new(m);
        whole.add(&grid(p, 4, 10), &grid(t, 4, 10)).unwrap();
        prop_assert_eq!(parts, whole);
    }

    #[test]
    fn softmax_sums_to_one_per_pixel(seed in any::<u64>(), c in 1usize..=6, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f64>::uniform(Shape::new(2, c, 3, 4), -scale, scale, &mut rng);
        let p = softmax(&z);
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let s: f64 = (0..c).map(|k| p.at(n, k, y, x)).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                    prop_assert!((0..c).all(|k| p.at(n, k, y, x) >= 0.0));
                }
            }
        }
    }
}

#[test]
fn generated_labels_cover_every_class() {
    let cfg = GenConfig::default();
    let mut hist = vec![0usize; cfg.classes];
    for seed in 0..100 {
        for &l in &gen_scene(seed, &cfg).unwrap().labels.data {
            hist[l] += 1;
        }
    }
    assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
}
