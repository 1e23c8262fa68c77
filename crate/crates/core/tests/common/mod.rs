#![allow(dead_code)]

use hahog::depth::{to_height_field, HeightField};
use hahog::synth::{generate_scene, SceneConfig};
use hahog_oracles::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn raster(f: &HeightField) -> Raster {
    Raster {
        width: f.width,
        height: f.height,
        heights: f.h.clone(),
        valid: f.valid.clone(),
    }
}

/// Smooth bumps over noise with scattered invalid pixels.
pub fn random_field(seed: u64, w: usize, h: usize, invalid: f64) -> HeightField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(5.0..25.0),
                rng.random_range(300.0..2000.0),
            )
        })
        .collect();
    HeightField::from_fn(w, h, |x, y| {
        if rng.random_bool(invalid) {
            return None;
        }
        let mut v: f64 = rng.random_range(0.0..20.0);
        for &(bx, by, r, top) in &bumps {
            let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
            v = v.max(top * (-d2 / (r * r)).exp());
        }
        Some(v.round() as f32)
    })
}

pub fn synthetic_field(seed: u64) -> HeightField {
    let cfg = SceneConfig::default();
    to_height_field(&generate_scene(&cfg, seed).unwrap().frame, &cfg.calibration)
}
