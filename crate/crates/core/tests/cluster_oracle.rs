mod common;

use common::random_field;
use hahog::cluster::{complete_linkage, detect_clusters, foreground, ClusterConfig};
use hahog::depth::{to_height_field, Point};
use hahog::synth::{generate_scene, Range, SceneConfig};
use hahog_oracles::complete_linkage_brute;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3000))]

    #[test]
    fn linkage_matches_brute_force(pts in prop::collection::vec((0i32..40, 0i32..40), 0..=10), cutoff in 1.0f64..30.0) {
        let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let fast = complete_linkage(&points, cutoff);
        let brute: Vec<Vec<Point>> = complete_linkage_brute(&pts, cutoff)
            .into_iter()
            .map(|c| c.into_iter().map(|i| points[i]).collect())
            .collect();
        // clusters hold points in index order; compare as index sets
        let idx = |c: &Vec<Point>| {
            let mut v: Vec<usize> = Vec::new();
            for p in c {
                let i = (0..points.len()).find(|&i| points[i] == *p && !v.contains(&i)).unwrap();
                v.push(i);
            }
            v.sort_unstable();
            v
        };
        let mut a: Vec<Vec<usize>> = fast.iter().map(idx).collect();
        let mut b: Vec<Vec<usize>> = brute.iter().map(idx).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clusters_partition_points(pts in prop::collection::vec((0i32..200, 0i32..200), 0..150), cutoff in 1.0f64..60.0) {
        let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let clusters = complete_linkage(&points, cutoff);
        let mut all: Vec<Point> = clusters.iter().flatten().copied().collect();
        let mut want = points.clone();
        all.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(all, want);
        for c in &clusters {
            for a in c {
                for b in c {
                    prop_assert!(a.dist(*b) <= cutoff);
                }
            }
        }
    }
}

#[test]
fn foreground_matches_pixel_filter() {
    for seed in 0..5 {
        let f = random_field(seed, 90, 70, 0.05);
        for step in [1, 3, 4] {
            let got = foreground(&f, 1000.0, step);
            let mut want = Vec::new();
            for y in 0..f.height {
                for x in 0..f.width {
                    if x % step == 0 && y % step == 0 && f.valid[y * f.width + x] && f.h[y * f.width + x] >= 1000.0 {
                        want.push(Point::new(x as i32, y as i32));
                    }
                }
            }
            assert_eq!(got, want);
        }
    }
}

#[test]
fn close_pairs_are_merged() {
    let cfg = SceneConfig {
        count_min: 8,
        count_max: 8,
        spacing_mm: Range::new(300.0, 340.0),
        walls_per_scene: 0.0,
        hand_probability: 0.0,
        ..SceneConfig::default()
    };
    let (mut found, mut people) = (0, 0);
    for seed in 0..20 {
        let s = generate_scene(&cfg, seed).unwrap();
        let f = to_height_field(&s.frame, &cfg.calibration);
        found += detect_clusters(&f, &ClusterConfig::default()).unwrap().len();
        people += s.annotations.points.len();
    }
    println!("close pairs: {found} clusters for {people} people");
    assert!(found < people);
}
