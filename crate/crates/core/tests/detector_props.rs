mod common;

use common::{raster, synthetic_field};
use hahog::detector::{nms, score_windows, threshold_candidates, Candidate, ScoreMap};
use hahog::features::{FeatureConfig, FeatureMethod};
use hahog::mlp::Mlp;
use hahog_oracles::{height_hist, mlp_forward, nms_outcomes, window_hog, DenseLayer};
use proptest::prelude::*;

fn cands() -> impl Strategy<Value = Vec<Candidate>> {
    prop::collection::vec((0i32..60, 0i32..60, 0u8..6), 0..25).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, a)| Candidate {
                x,
                y,
                alpha: 0.9 + f64::from(a) / 100.0,
            })
            .collect()
    })
}

fn key(c: &[Candidate]) -> Vec<(i32, i32, u64)> {
    c.iter().map(|c| (c.x, c.y, c.alpha.to_bits())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn nms_invariants(c in cands(), radius in 1.0f64..30.0, rot in 0usize..25) {
        let out = nms(&c, radius);
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(a.position().dist(b.position()) >= radius);
            }
        }
        prop_assert_eq!(key(&nms(&out, radius)), key(&out));
        let mut shuffled = c.clone();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
        }
        prop_assert_eq!(key(&nms(&shuffled, radius)), key(&out));
    }

    #[test]
    fn nms_is_a_pairwise_outcome(c in prop::collection::vec((0i32..40, 0i32..40, 0u8..4), 0..=6), radius in 1.0f64..30.0) {
        let c: Vec<Candidate> = c.into_iter().map(|(x, y, a)| Candidate { x, y, alpha: 0.9 + f64::from(a) / 100.0 }).collect();
        let plain: Vec<(i32, i32, f64)> = c.iter().map(|c| (c.x, c.y, c.alpha)).collect();
        let outcomes = nms_outcomes(&plain, radius);
        let mut greedy: Vec<(i32, i32, u64)> = key(&nms(&c, radius));
        greedy.sort_unstable();
        let as_keys = |idx: &Vec<usize>| {
            let mut k: Vec<(i32, i32, u64)> = idx.iter().map(|&i| (c[i].x, c[i].y, c[i].alpha.to_bits())).collect();
            k.sort_unstable();
            k
        };
        prop_assert!(outcomes.iter().any(|o| as_keys(o) == greedy));
        if outcomes.len() == 1 {
            prop_assert_eq!(as_keys(outcomes.iter().next().unwrap()), greedy);
        }
    }

    #[test]
    fn raising_threshold_never_adds(scores in prop::collection::vec(0.0f32..1.0, 1..40), t in 0.01f64..0.99, dt in 0.0f64..0.5) {
        let n = scores.len();
        let m = ScoreMap { features: FeatureConfig::default(), cols: n, rows: 1, scores };
        let lo = threshold_candidates(&m, t);
        let hi = threshold_candidates(&m, (t + dt).min(0.999));
        prop_assert!(hi.len() <= lo.len());
        prop_assert!(hi.iter().all(|h| lo.contains(h)));
    }
}

fn check_scores_against_oracle(method: FeatureMethod) {
    let cfg = FeatureConfig::default().with_method(method);
    let model = Mlp::for_features(cfg, 11).unwrap();
    let layers: Vec<DenseLayer> = model
        .layers
        .iter()
        .map(|l| DenseLayer {
            weights: l.weights.iter().map(|&w| w as f32 as f64).collect::<Vec<_>>().chunks(l.inputs).map(|r| r.to_vec()).collect(),
            biases: l.biases.iter().map(|&b| b as f32 as f64).collect(),
        })
        .collect();
    let f = synthetic_field(21);
    let r = raster(&f);
    let scores = score_windows(&f, &model.to_inference(), &cfg).unwrap();
    assert_eq!((scores.cols, scores.rows), (75, 60));
    for (origin, _, alpha) in scores.entries().step_by(7) {
        let (x0, y0) = (origin.0 * 6, origin.1 * 6);
        let mut d = window_hog(&r, x0, y0, 11, 6, 8);
        if method == FeatureMethod::Hahog {
            d.extend(height_hist(&r, x0, y0, 66, 16, 2200.0));
        }
        let want = mlp_forward(&layers, &d);
        assert!((alpha as f64 - want).abs() < 1e-5, "{origin:?}: {alpha} vs {want}");
    }
}

#[test]
fn window_scores_match_oracle_composition() {
    check_scores_against_oracle(FeatureMethod::Hahog);
    check_scores_against_oracle(FeatureMethod::Hog);
}

#[test]
fn scoring_ignores_frame_identity() {
    let cfg = FeatureConfig::default();
    let model = Mlp::for_features(cfg, 2).unwrap().to_inference();
    let f = synthetic_field(4);
    assert_eq!(score_windows(&f, &model, &cfg).unwrap(), score_windows(&f.clone(), &model, &cfg).unwrap());
}
