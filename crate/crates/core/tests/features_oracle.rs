mod common;

use common::{random_field, raster, synthetic_field};
use hahog::features::{
    compute_gradient, orientation_bin, patch_descriptor, rot90_permutation, FeatureConfig, FeatureMethod, FrameFeatures,
};
use hahog_oracles::{angle_bin, height_hist, pixel_gradient, window_hog};
use proptest::prelude::*;

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "component {i}: {x} vs {y}");
    }
}

fn oracle_descriptor(r: &hahog_oracles::Raster, origin: (usize, usize), cfg: &FeatureConfig) -> Vec<f64> {
    let (x0, y0) = (origin.0 * cfg.cell_size, origin.1 * cfg.cell_size);
    let mut d = window_hog(r, x0, y0, cfg.window_cells, cfg.cell_size, cfg.n_bins);
    if cfg.method == FeatureMethod::Hahog {
        d.extend(height_hist(r, x0, y0, cfg.window_px(), cfg.n_height_bins, cfg.h_max_mm));
    }
    d
}

#[test]
fn gradient_matches_pixel_oracle() {
    let f = random_field(1, 40, 31, 0.05);
    let g = compute_gradient(&f).unwrap();
    let r = raster(&f);
    for y in 0..f.height {
        for x in 0..f.width {
            let (gx, gy) = pixel_gradient(&r, x, y);
            let i = y * f.width + x;
            assert_eq!((g.gx[i], g.gy[i]), (gx, gy), "pixel ({x}, {y})");
        }
    }
}

#[test]
fn shared_cells_match_per_window_oracle() {
    let cfg = FeatureConfig::default();
    for f in [synthetic_field(5), random_field(2, 150, 130, 0.02)].iter() {
        let ff = FrameFeatures::new(f, &cfg).unwrap();
        let r = raster(f);
        for origin in ff.window_origins() {
            let d = ff.descriptor(origin).unwrap();
            assert_close(&d.values, &oracle_descriptor(&r, origin, &cfg), 1e-9);
        }
    }
}

#[test]
fn plain_hog_is_hahog_without_height_part() {
    let cfg = FeatureConfig::default();
    let hog = cfg.with_method(FeatureMethod::Hog);
    let f = synthetic_field(9);
    let a = FrameFeatures::new(&f, &cfg).unwrap();
    let b = FrameFeatures::new(&f, &hog).unwrap();
    for origin in a.window_origins().into_iter().step_by(37) {
        let da = a.descriptor(origin).unwrap().values;
        let db = b.descriptor(origin).unwrap().values;
        assert_eq!(db.len(), da.len() - cfg.n_height_bins);
        assert_eq!(&da[..db.len()], &db[..]);
    }
}

#[test]
fn patch_descriptor_matches_standalone_oracle() {
    let cfg = FeatureConfig::default();
    for seed in 0..20 {
        let p = random_field(100 + seed, 66, 66, 0.03);
        let d = patch_descriptor(&p, &cfg).unwrap();
        assert_close(&d.values, &oracle_descriptor(&raster(&p), (0, 0), &cfg), 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn orientation_bin_matches_angle_oracle(gx in -1e4f64..1e4, gy in -1e4f64..1e4, k in 1usize..5) {
        prop_assume!(gx != 0.0 || gy != 0.0);
        let n = 4 * k;
        prop_assert_eq!(orientation_bin(gx, gy, n), angle_bin(gx, gy, n));
    }

    #[test]
    fn orientation_bin_exact_on_lattice(gx in -50i32..50, gy in -50i32..50) {
        prop_assume!(gx != 0 || gy != 0);
        prop_assert_eq!(orientation_bin(gx as f64 / 2.0, gy as f64 / 2.0, 8), angle_bin(gx as f64, gy as f64, 8));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cells_and_height_histograms_are_normalized(seed in any::<u64>(), invalid in 0.0f64..0.3) {
        let cfg = FeatureConfig::default();
        let f = random_field(seed, 80, 72, invalid);
        let ff = FrameFeatures::new(&f, &cfg).unwrap();
        for c in ff.grid.histograms.chunks(cfg.n_bins) {
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
        }
        for origin in ff.window_origins() {
            let d = ff.descriptor(origin).unwrap().values;
            let s: f64 = d[cfg.hog_len()..].iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_permutes_descriptor(seed in any::<u64>(), invalid in 0.0f64..0.1) {
        let cfg = FeatureConfig::default();
        let p = random_field(seed, 66, 66, invalid);
        let base = patch_descriptor(&p, &cfg).unwrap().values;
        let turned = patch_descriptor(&p.rot90(), &cfg).unwrap().values;
        let perm = rot90_permutation(&cfg);
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((turned[i] - base[src]).abs() < 1e-6);
        }
        prop_assert_eq!(&turned[cfg.hog_len()..], &base[cfg.hog_len()..]);
    }
}
