use hahog::features::FeatureConfig;
use hahog::mlp::{decode_model, encode_model, grad_check, load_model, save_model, train, Mlp, TrainConfig, TrainingSet};
use hahog_oracles::{mlp_forward, DenseLayer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Feature config whose descriptor has exactly `dim` values.
fn config_of_len(dim: usize) -> FeatureConfig {
    FeatureConfig {
        window_cells: 1,
        n_bins: 4,
        n_height_bins: dim - 4,
        ..FeatureConfig::default()
    }
}

fn oracle_layers(m: &Mlp) -> Vec<DenseLayer> {
    m.layers
        .iter()
        .map(|l| DenseLayer {
            weights: l.weights.chunks(l.inputs).map(|r| r.to_vec()).collect(),
            biases: l.biases.clone(),
        })
        .collect()
}

/// Smallest |pre-activation| over the hidden layers for input `x`.
fn kink_margin(m: &Mlp, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    for l in &m.layers[..m.layers.len() - 1] {
        let z: Vec<f64> = (0..l.biases.len())
            .map(|o| l.biases[o] + (0..l.inputs).map(|i| l.weights[o * l.inputs + i] * a[i]).sum::<f64>())
            .collect();
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        a = z.iter().map(|v| v.max(0.0)).collect();
    }
    margin
}

fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let m = Mlp::new(&[12, 9, 5, 1], config_of_len(12), seed).unwrap();
        let x = random_input(&mut rng, 12);
        let a = m.forward_slice(&x).unwrap();
        assert!((a - mlp_forward(&oracle_layers(&m), &x)).abs() < 1e-12);
    }
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let m = Mlp::for_features(FeatureConfig::default(), 3).unwrap();
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.feature_config, m.feature_config);
    assert_eq!(back.layer_dims(), vec![984, 64, 16, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inf = back.to_inference();
    for _ in 0..100 {
        let x: Vec<f64> = (0..984).map(|_| rng.random_range(0.0..0.3)).collect();
        let a = m.forward_slice(&x).unwrap();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        assert!((a - back.forward_slice(&x).unwrap()).abs() < 1e-6);
        assert!((a - inf.forward(&xf).unwrap() as f64).abs() < 1e-6);
    }
    assert_eq!(encode_model(&back), std::fs::read(&path).unwrap());
}

#[test]
fn shape_mismatch_rejected() {
    let m = Mlp::new(&[10, 3, 1], config_of_len(10), 1).unwrap();
    let mut bytes = encode_model(&m);
    // header declares 10 inputs, config now yields 984
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let from = "\"window_cells\":1";
    let pos = text.find(from).unwrap();
    bytes[pos + from.len() - 1] = b'9';
    assert!(decode_model(&bytes).is_err());
}

#[test]
fn training_bytes_are_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut set = TrainingSet::new(8);
    for i in 0..200 {
        let label = i % 2 == 0;
        let mut x = random_input(&mut rng, 8);
        x[0] += if label { 1.0 } else { -1.0 };
        set.push(&x, label).unwrap();
    }
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let m = Mlp::new(&[8, 6, 1], config_of_len(8), 2).unwrap();
        encode_model(&train(m, &set, &cfg).unwrap().0)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gradients_match_finite_differences(
        dims in prop::collection::vec(2usize..=64, 1..=3),
        seed in any::<u64>(),
        label in any::<bool>(),
    ) {
        let input = dims[0].max(5);
        let mut all = vec![input];
        all.extend(&dims[1..]);
        all.push(1);
        let m = Mlp::new(&all, config_of_len(input), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = random_input(&mut rng, input);
        // finite differences are meaningless across a ReLU kink
        prop_assume!(kink_margin(&m, &x) > 1e-3);
        let err = grad_check(&m, &x, if label { 1.0 } else { 0.0 }).unwrap();
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn output_strictly_inside_unit_interval(scale in 1.0f64..1e6, seed in any::<u64>()) {
        let m = Mlp::new(&[6, 4, 1], config_of_len(6), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = random_input(&mut rng, 6).iter().map(|v| v * scale).collect();
        let a = m.forward_slice(&x).unwrap();
        prop_assert!(a > 0.0 && a < 1.0);
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let b = m.to_inference().forward(&xf).unwrap();
        prop_assert!(b > 0.0 && b < 1.0);
    }
}
