mod common;

use common::random_field;
use hahog::depth::{HeightField, Point};
use hahog::features::FeatureConfig;
use hahog::training::{
    augment, auto_verdict, extract_samples, ingest_hard_mined, AugmentConfig, DatasetStore, Judgment, Label, NegativePolicy, Provenance, Sample,
};
use hahog::detector::Candidate;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn center(s: &Sample) -> Point {
    Point::new(s.origin.x + 33, s.origin.y + 33)
}

fn nearest(p: Point, anns: &[Point]) -> f64 {
    anns.iter().map(|a| a.dist(p)).fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn extracted_windows_respect_distance_rules(
        anns in prop::collection::vec((0i32..200, 0i32..160), 0..6),
        seed in any::<u64>(),
    ) {
        let field = random_field(seed, 200, 160, 0.01);
        let anns: Vec<Point> = anns.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let features = FeatureConfig::default();
        let policy = NegativePolicy::for_features(&features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = extract_samples(&field, "f", &anns, &features, &policy, &mut rng).unwrap();
        let mut centered = 0;
        for s in &ex.samples {
            prop_assert_eq!((s.patch.width, s.patch.height), (66, 66));
            prop_assert_eq!(&s.patch, &field.crop(s.origin.x as usize, s.origin.y as usize, 66, 66).unwrap());
            prop_assert_eq!(s.provenance, Provenance::Synthetic);
            let c = center(s);
            match s.label {
                Label::Positive => {
                    let ok = anns.iter().any(|a| (a.x - c.x).abs() <= 3 && (a.y - c.y).abs() <= 3);
                    prop_assert!(ok);
                    if anns.contains(&c) {
                        centered += 1;
                    }
                }
                Label::Negative => prop_assert!(nearest(c, &anns) >= 6.0),
            }
        }
        prop_assert!(centered + ex.skipped_positives >= anns.len());
        let negatives = ex.samples.iter().filter(|s| s.label == Label::Negative).count();
        let quota = if anns.is_empty() { 8 } else { 3 * anns.len() };
        prop_assert!(negatives <= quota);
        let near_quota = if anns.is_empty() { 0 } else { (quota as f64 * 0.5).round() as usize };
        let raised = |s: &Sample| {
            let c = center(s);
            field.is_valid(c.x as usize, c.y as usize) && field.at(c.x as usize, c.y as usize) >= 500.0
        };
        let near_flat = ex
            .samples
            .iter()
            .filter(|s| s.label == Label::Negative && nearest(center(s), &anns) < 66.0 && !raised(s))
            .count();
        prop_assert!(near_flat <= near_quota);
        let on_raised = ex.samples.iter().filter(|s| s.label == Label::Negative && raised(s)).count();
        let any_raised = (33..=field.height - 33)
            .any(|y| (33..=field.width - 33).any(|x| field.is_valid(x, y) && field.at(x, y) >= 500.0));
        if anns.is_empty() && any_raised {
            prop_assert!(on_raised >= 4);
        }
    }

    #[test]
    fn rotations_permute_valid_pixels(seed in any::<u64>()) {
        let patch = random_field(seed, 66, 66, 0.05);
        let s = Sample { patch: patch.clone(), label: Label::Positive, provenance: Provenance::Synthetic, frame_id: "f".into(), origin: Point::new(0, 0) };
        let out = augment(&s, &AugmentConfig { rotations: true, noise_sigma_mm: 0.0 }, seed).unwrap();
        prop_assert_eq!(out.len(), 4);
        for (k, o) in out.iter().enumerate() {
            for y in 0..66 {
                for x in 0..66 {
                    // k quarter turns of the source
                    let (mut sx, mut sy) = (x, y);
                    for _ in 0..k {
                        (sx, sy) = (65 - sy, sx);
                    }
                    prop_assert_eq!(o.patch.is_valid(x, y), patch.is_valid(sx, sy));
                    if patch.is_valid(sx, sy) {
                        prop_assert_eq!(o.patch.at(x, y), patch.at(sx, sy));
                    }
                }
            }
        }
        let noisy = augment(&s, &AugmentConfig::default(), seed).unwrap();
        for o in &noisy {
            prop_assert_eq!(o.patch.valid_count(), patch.valid_count());
            prop_assert!(o.patch.h.iter().all(|&h| h >= 0.0));
        }
    }
}

#[test]
fn store_counts_match_files_after_ingests() {
    let dir = tempfile::tempdir().unwrap();
    let field = HeightField::from_fn(200, 200, |x, y| Some(((x + 3 * y) % 40) as f32));
    let features = FeatureConfig::default();
    let dets = vec![
        Candidate { x: 50, y: 50, alpha: 0.95 },
        Candidate { x: 120, y: 120, alpha: 0.93 },
        Candidate { x: 2, y: 2, alpha: 0.91 },
    ];
    let anns = [Point::new(52, 50), Point::new(150, 60)];
    let verdict = auto_verdict(&dets, &anns, 6.0);
    assert_eq!(verdict.judgments.iter().filter(|j| j.judgment == Judgment::FalsePositive).count(), 2);
    assert_eq!(verdict.added, vec![Point::new(150, 60)]);
    {
        let mut store = DatasetStore::open(dir.path()).unwrap();
        for round in 0..3 {
            let s = ingest_hard_mined(&mut store, &field, &format!("f{round}"), &dets, &verdict, &features).unwrap();
            assert_eq!((s.positives, s.negatives, s.skipped), (2, 1, 1));
        }
        let stats = store.stats();
        assert_eq!((stats.positive, stats.negative, stats.hard_mined), (6, 3, 9));
        assert_eq!(store.recount().unwrap(), (6, 3));
    }
    let reopened = DatasetStore::open(dir.path()).unwrap();
    assert_eq!(reopened.len(), 9);
    assert_eq!(reopened.recount().unwrap(), (6, 3));
    let loaded = reopened.load_all().unwrap();
    assert_eq!(loaded[0].patch, field.crop(50 - 33, 50 - 33, 66, 66).unwrap());
    assert!(!dir.path().join("manifest.tmp").exists());
}
