//! Metric implementations against brute-force oracles and rank-invariance
//! properties.

mod common;

use common::{pro_oracle, random_instance, roc_oracle};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtadl_core::metrics::{pr_auc, pro_score, roc_auc, BinaryMask, Heatmap};

#[test]
fn pro_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for case in 0..50 {
        let (hm, mask) = random_instance(&mut rng, 40);
        let ours = pro_score(&[hm.clone()], &[mask.clone()], 0.3, 256)
            .unwrap()
            .capped_auc;
        let oracle = pro_oracle(&[hm], &[mask], 0.3);
        assert!(
            (ours - oracle).abs() <= 1e-6,
            "case {case}: {ours} vs {oracle}"
        );
    }
}

#[test]
fn pro_matches_oracle_across_multiple_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut heatmaps = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..5 {
        let (hm, mask) = random_instance(&mut rng, 60);
        heatmaps.push(hm);
        masks.push(mask);
    }
    let ours = pro_score(&heatmaps, &masks, 0.3, 256).unwrap().capped_auc;
    let oracle = pro_oracle(&heatmaps, &masks, 0.3);
    assert!((ours - oracle).abs() <= 1e-6, "{ours} vs {oracle}");
}

#[test]
fn pro_exact_for_few_distinct_values() {
    // with at most 256 distinct pooled scores the sweep uses every value
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (hm, mask) = random_instance(&mut rng, 12);
        let ours = pro_score(&[hm.clone()], &[mask.clone()], 0.3, 256)
            .unwrap()
            .capped_auc;
        let oracle = pro_oracle(&[hm], &[mask], 0.3);
        assert_eq!(ours, oracle);
    }
}

#[test]
fn pro_invariant_under_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4321);
    for _ in 0..10 {
        let (hm, mask) = random_instance(&mut rng, 64);
        let base = pro_score(&[hm.clone()], &[mask.clone()], 0.3, 256)
            .unwrap()
            .capped_auc;
        for transform in [|v: f64| 3.0 * v + 2.0, |v: f64| v.exp(), |v: f64| v.atan()] {
            let mapped = Heatmap {
                values: hm.values.iter().map(|&v| transform(v)).collect(),
                ..hm.clone()
            };
            let got = pro_score(&[mapped], &[mask.clone()], 0.3, 256)
                .unwrap()
                .capped_auc;
            assert!((got - base).abs() <= 1e-9, "{got} vs {base}");
        }
    }
}

#[test]
fn constant_heatmap_matches_oracle() {
    let mask = BinaryMask::new(4, 4, (0..16).map(|i| i == 5).collect()).unwrap();
    let hm = Heatmap {
        values: vec![0.7; 16],
        height: 4,
        width: 4,
        grid_rows: 4,
        grid_cols: 4,
    };
    let ours = pro_score(&[hm.clone()], &[mask.clone()], 0.3, 256)
        .unwrap()
        .capped_auc;
    let oracle = pro_oracle(&[hm], &[mask], 0.3);
    assert!((ours - oracle).abs() <= 1e-12, "{ours} vs {oracle}");
    // all-or-nothing prediction: the curve is the chord from (0,0) to (1,1)
    assert!((ours - 0.15).abs() <= 1e-12);
}

#[test]
fn roc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(4..40usize);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) * 0.25).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let ours = roc_auc(&scores, &labels).unwrap();
        let oracle = roc_oracle(&scores, &labels);
        assert!((ours - oracle).abs() <= 1e-12, "{ours} vs {oracle}");
    }
}

#[test]
fn roc_invariant_under_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
    let base = roc_auc(&scores, &labels).unwrap();
    let mapped: Vec<f64> = scores.iter().map(|&v| (2.0 * v).tanh() * 5.0 + 1.0).collect();
    let got = roc_auc(&mapped, &labels).unwrap();
    assert_eq!(base, got);
}

#[test]
fn pr_auc_sane_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(4..30usize);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let ap = pr_auc(&scores, &labels).unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }
}
