mod common;

use common::{oracles, rng};
use proptest::prelude::*;
use rand::Rng;
use vaemo::captions::{extract_label, majority_vote, VoteOutcome};
use vaemo::data::ArrayContainer;
use vaemo::eval::{aggregate_folds, pcc, uar, war, FoldPredictions};
use vaemo::tokenizer::{
    audio_patches, audio_token_count, video_patches, video_token_count, AudioInput, VideoInput,
};
use vaemo::Tensor;

fn random_labels(r: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(0..k)).collect()
}

#[test]
fn metrics_match_brute_force_on_1000_cases() {
    let mut r = rng(100);
    for case in 0..1000 {
        let k = r.gen_range(2..8);
        let n = r.gen_range(1..200);
        let labels = random_labels(&mut r, n, k);
        let preds = random_labels(&mut r, n, k);
        let u = uar(&preds, &labels).unwrap();
        let w = war(&preds, &labels).unwrap();
        assert!(
            (u - oracles::uar(&preds, &labels)).abs() < 1e-10,
            "case {case}"
        );
        assert!(
            (w - oracles::war(&preds, &labels)).abs() < 1e-10,
            "case {case}"
        );

        let m = r.gen_range(3..120);
        let x: Vec<f64> = (0..m).map(|_| r.gen_range(-5.0..5.0)).collect();
        let slope = r.gen_range(-2.0..2.0);
        let y: Vec<f64> = x
            .iter()
            .map(|v| slope * v + r.gen_range(-3.0..3.0))
            .collect();
        assert!(
            (pcc(&x, &y).unwrap() - oracles::pcc(&x, &y)).abs() < 1e-10,
            "case {case}"
        );
    }
}

#[test]
fn pooled_folds_equal_concatenated_metrics() {
    let mut r = rng(101);
    for _ in 0..200 {
        let k = r.gen_range(2..6);
        let folds: Vec<FoldPredictions> = (0..r.gen_range(1..6))
            .map(|fold| {
                let n = r.gen_range(1..40);
                FoldPredictions {
                    fold,
                    ids: (0..n).map(|i| format!("{fold}-{i}")).collect(),
                    preds: random_labels(&mut r, n, k),
                    labels: random_labels(&mut r, n, k),
                }
            })
            .collect();
        let report = aggregate_folds(&folds, k).unwrap();
        let preds: Vec<usize> = folds.iter().flat_map(|f| f.preds.clone()).collect();
        let labels: Vec<usize> = folds.iter().flat_map(|f| f.labels.clone()).collect();
        assert_eq!(report.uar, oracles::uar(&preds, &labels));
        assert!((report.war - oracles::war(&preds, &labels)).abs() < 1e-12);
        assert_eq!(
            report.folds.iter().map(|f| f.count).sum::<usize>(),
            labels.len()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_counts_follow_the_grid(ta in 1usize..6, f in 1usize..6, tv in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let (ta, f, tv, h, w) = (16 * ta, 16 * f, 2 * tv, 16 * h, 16 * w);
        prop_assert_eq!(audio_token_count(ta, f).unwrap(), (ta / 16) * (f / 16));
        prop_assert_eq!(video_token_count(tv, h, w).unwrap(), (tv / 2) * (h / 16) * (w / 16));
        let a = AudioInput::new(Tensor::zeros(&[ta, f])).unwrap();
        let v = VideoInput::new(Tensor::zeros(&[tv, h, w, 3])).unwrap();
        prop_assert_eq!(audio_patches(&a).unwrap().shape().to_vec(), vec![(ta / 16) * (f / 16), 256]);
        prop_assert_eq!(video_patches(&v).unwrap().shape().to_vec(), vec![(tv / 2) * (h / 16) * (w / 16), 1536]);
    }

    #[test]
    fn indivisible_shapes_are_rejected(ta in 1usize..100, f in 1usize..100) {
        prop_assume!(ta % 16 != 0 || f % 16 != 0);
        prop_assert!(audio_token_count(ta, f).is_err());
    }

    #[test]
    fn container_round_trip_is_identity(
        arrays in prop::collection::vec(
            (prop::collection::vec(1usize..5, 1..4), any::<u64>()), 0..6)
    ) {
        let mut c = ArrayContainer::new();
        let mut originals = Vec::new();
        for (i, (shape, seed)) in arrays.iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut r = rng(*seed);
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(r.gen::<u32>() & 0x7f7f_ffff)).collect();
            let t = Tensor::new(shape.clone(), data).unwrap();
            c.insert(format!("a{i}"), t.clone()).unwrap();
            originals.push(t);
        }
        let back = ArrayContainer::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
        for (i, t) in originals.iter().enumerate() {
            let name = format!("a{}", i);
            prop_assert!(back.get(&name).unwrap().bit_eq(t));
        }
    }

    #[test]
    fn uar_equals_war_on_uniform_labels(k in 2usize..6, per in 1usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat(c).take(per)).collect();
        let preds = random_labels(&mut r, labels.len(), k);
        let (u, w) = (uar(&preds, &labels).unwrap(), war(&preds, &labels).unwrap());
        prop_assert!((u - w).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&w));
    }

    #[test]
    fn pcc_is_affine_invariant(seed in any::<u64>(), a in 0.1f64..10.0, b in -10.0f64..10.0) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..30).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + r.gen_range(-1.0..1.0)).collect();
        let p = pcc(&x, &y).unwrap();
        let ya: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        prop_assert!((-1.0..=1.0).contains(&p));
        prop_assert!((pcc(&x, &ya).unwrap() - p).abs() < 1e-9);
    }

    #[test]
    fn vote_label_is_permutation_invariant(seed in any::<u64>(), n in 1usize..7) {
        let mut r = rng(seed);
        let mut cands: Vec<String> = (0..n).map(|_| oracles::random_caption(&mut r)).collect();
        let label = |c: &[String]| match majority_vote(c, extract_label).1 {
            VoteOutcome::Winner { label, .. } => Some(label),
            VoteOutcome::Inconsistent { .. } => None,
        };
        let before = label(&cands);
        cands.reverse();
        cands.rotate_left(seed as usize % n);
        prop_assert_eq!(label(&cands), before);
    }
}
