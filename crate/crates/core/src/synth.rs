//! Seeded generator of overhead depth scenes with known head positions.
//!
//! A pedestrian is a head cap over an elliptical shoulder cap; walls and
//! raised hands are added as distractors. Positions grow outward from
//! already placed pedestrians so every nearest-neighbour distance lands in
//! the configured spacing range.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth::{save_frame, write_annotations, AnnotationSet, Calibration, DepthFrame, Point};
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 1000;
const DISTRACTOR_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub calibration: Calibration,
    /// Allowed distance from each pedestrian to its nearest neighbour.
    pub spacing_mm: Range,
    pub count_min: usize,
    pub count_max: usize,
    /// Keep-out band along the frame edges for head positions.
    pub border_mm: f64,
    pub apex_height_mm: Range,
    pub head_radius_mm: Range,
    /// Vertical semi-axis of the head cap as a multiple of its radius.
    pub head_aspect: f64,
    /// Shoulder ellipse semi-axes across and along the walking direction.
    pub shoulder_width_mm: Range,
    pub shoulder_depth_mm: Range,
    /// Drop from head apex to shoulder top.
    pub shoulder_drop_mm: Range,
    pub shoulder_thickness_mm: f64,
    pub floor_noise_mm: f64,
    pub invalid_probability: f64,
    /// Expected number of wall segments per scene.
    pub walls_per_scene: f64,
    pub wall_length_mm: Range,
    pub wall_thickness_mm: Range,
    pub wall_height_mm: Range,
    /// Wall segments keep at least this far from every head.
    pub wall_clearance_mm: f64,
    /// Probability that a pedestrian raises a hand.
    pub hand_probability: f64,
    pub hand_radius_mm: Range,
    /// Hand distance from its pedestrian's head.
    pub hand_offset_mm: Range,
    /// Hand top above the pedestrian's head apex.
    pub hand_rise_mm: Range,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 512,
            height: 424,
            calibration: Calibration::default(),
            spacing_mm: Range::new(290.0, 1000.0),
            count_min: 2,
            count_max: 16,
            border_mm: 400.0,
            apex_height_mm: Range::new(1200.0, 1900.0),
            head_radius_mm: Range::new(90.0, 110.0),
            head_aspect: 1.2,
            shoulder_width_mm: Range::new(200.0, 240.0),
            shoulder_depth_mm: Range::new(110.0, 140.0),
            shoulder_drop_mm: Range::new(220.0, 300.0),
            shoulder_thickness_mm: 150.0,
            floor_noise_mm: 10.0,
            invalid_probability: 0.002,
            walls_per_scene: 0.6,
            wall_length_mm: Range::new(600.0, 2000.0),
            wall_thickness_mm: Range::new(100.0, 200.0),
            wall_height_mm: Range::new(1000.0, 2200.0),
            wall_clearance_mm: 450.0,
            hand_probability: 0.2,
            hand_radius_mm: Range::new(40.0, 55.0),
            hand_offset_mm: Range::new(150.0, 350.0),
            hand_rise_mm: Range::new(50.0, 250.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        let ranges = [
            ("spacing", self.spacing_mm),
            ("apex height", self.apex_height_mm),
            ("head radius", self.head_radius_mm),
            ("shoulder width", self.shoulder_width_mm),
            ("shoulder depth", self.shoulder_depth_mm),
            ("shoulder drop", self.shoulder_drop_mm),
            ("wall length", self.wall_length_mm),
            ("wall thickness", self.wall_thickness_mm),
            ("wall height", self.wall_height_mm),
            ("hand radius", self.hand_radius_mm),
            ("hand offset", self.hand_offset_mm),
            ("hand rise", self.hand_rise_mm),
        ];
        for (name, r) in ranges {
            if !r.is_valid() || r.min <= 0.0 {
                return Err(Error::Config(format!("{name} range {r:?} must be positive and ordered")));
            }
        }
        if self.width == 0 || self.height == 0 || self.count_min > self.count_max {
            return Err(Error::Config("frame size and pedestrian count range must be non-degenerate".into()));
        }
        let probs = [self.invalid_probability, self.hand_probability];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let nonneg = [
            self.floor_noise_mm,
            self.walls_per_scene,
            self.border_mm,
            self.head_aspect,
            self.shoulder_thickness_mm,
            self.wall_clearance_mm,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("noise, rates and margins must be non-negative".into()));
        }
        let border_px = self.calibration.mm_to_px(self.border_mm);
        if 2.0 * border_px >= self.width.min(self.height) as f64 {
            return Err(Error::Config("border leaves no room for pedestrians".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub position: Point,
    pub apex_mm: f64,
    pub head_radius_mm: f64,
    pub shoulder_width_mm: f64,
    pub shoulder_depth_mm: f64,
    pub shoulder_top_mm: f64,
    /// Angle of the shoulder line, radians.
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distractor {
    Wall {
        from: [f64; 2],
        to: [f64; 2],
        thickness_mm: f64,
        height_mm: f64,
    },
    Hand {
        center: [f64; 2],
        radius_mm: f64,
        top_mm: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub frame: DepthFrame,
    pub annotations: AnnotationSet,
    pub pedestrians: Vec<Pedestrian>,
    pub distractors: Vec<Distractor>,
}

impl SyntheticScene {
    pub fn has_distractors(&self) -> bool {
        !self.distractors.is_empty()
    }
}

/// Random stream for scene `index` of a corpus seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn frame_id(index: usize) -> String {
    format!("frame_{index:04}")
}

/// Places head positions, in pixels. Each new head steps from a random
/// placed head by a distance inside the spacing range and must keep the
/// minimum spacing from all others.
fn place_heads(cfg: &SceneConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let scale = cfg.calibration.scale_mm_per_px;
    let border = cfg.calibration.mm_to_px(cfg.border_mm);
    let (lo_x, hi_x) = (border, cfg.width as f64 - 1.0 - border);
    let (lo_y, hi_y) = (border, cfg.height as f64 - 1.0 - border);
    let min2 = (cfg.spacing_mm.min / scale).powi(2);
    let inside = |x: f64, y: f64| x >= lo_x && x <= hi_x && y >= lo_y && y <= hi_y;
    let mut heads: Vec<Point> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (x, y) = if k == 0 {
                (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y))
            } else {
                let parent = heads[rng.random_range(0..heads.len())];
                let d = cfg.spacing_mm.sample(rng) / scale;
                let a = rng.random_range(0.0..TAU);
                (f64::from(parent.x) + d * a.cos(), f64::from(parent.y) + d * a.sin())
            };
            if !inside(x, y) {
                continue;
            }
            let p = Point::new(x.round() as i32, y.round() as i32);
            let far_enough = heads.iter().all(|q| q.dist2(p) as f64 >= min2);
            // rounding can stretch the parent step past the range
            let near_enough = k == 0
                || heads
                    .iter()
                    .any(|q| q.dist(p) * scale <= cfg.spacing_mm.max);
            if far_enough && near_enough {
                heads.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place pedestrian {} of {n} within {PLACEMENT_ATTEMPTS} attempts",
                k + 1
            )));
        }
    }
    Ok(heads)
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// Draws `h = top - c + c * sqrt(1 - q)` over an elliptical footprint,
/// keeping the per-pixel maximum.
struct Canvas {
    width: usize,
    height: usize,
    h: Vec<f64>,
}

impl Canvas {
    fn stamp(&mut self, bbox: (f64, f64, f64, f64), mut f: impl FnMut(f64, f64) -> Option<f64>) {
        let (x0, y0, x1, y1) = bbox;
        let xs = x0.floor().max(0.0) as usize;
        let ys = y0.floor().max(0.0) as usize;
        let xe = (x1.ceil().max(0.0) as usize).min(self.width.saturating_sub(1));
        let ye = (y1.ceil().max(0.0) as usize).min(self.height.saturating_sub(1));
        for y in ys..=ye {
            for x in xs..=xe {
                if let Some(v) = f(x as f64, y as f64) {
                    let cell = &mut self.h[y * self.width + x];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
}

fn cap(q: f64, top: f64, thickness: f64) -> Option<f64> {
    (q < 1.0).then(|| top - thickness + thickness * (1.0 - q).sqrt())
}

fn render_pedestrian(canvas: &mut Canvas, p: &Pedestrian, cfg: &SceneConfig) {
    let s = cfg.calibration.scale_mm_per_px;
    let (cx, cy) = (f64::from(p.position.x), f64::from(p.position.y));
    let (a, b) = (p.shoulder_width_mm / s, p.shoulder_depth_mm / s);
    let (cos, sin) = (p.orientation.cos(), p.orientation.sin());
    let top = p.shoulder_top_mm;
    let thick = cfg.shoulder_thickness_mm;
    canvas.stamp((cx - a, cy - a, cx + a, cy + a), |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        cap((u / a).powi(2) + (v / b).powi(2), top, thick)
    });
    let r = p.head_radius_mm / s;
    let c = cfg.head_aspect * p.head_radius_mm;
    canvas.stamp((cx - r, cy - r, cx + r, cy + r), |x, y| {
        cap(((x - cx).powi(2) + (y - cy).powi(2)) / (r * r), p.apex_mm, c)
    });
}

fn render_distractor(canvas: &mut Canvas, d: &Distractor, cfg: &SceneConfig) {
    let s = cfg.calibration.scale_mm_per_px;
    match *d {
        Distractor::Wall {
            from,
            to,
            thickness_mm,
            height_mm,
        } => {
            let half = thickness_mm / s / 2.0;
            let bbox = (
                from[0].min(to[0]) - half,
                from[1].min(to[1]) - half,
                from[0].max(to[0]) + half,
                from[1].max(to[1]) + half,
            );
            canvas.stamp(bbox, |x, y| (seg_dist([x, y], from, to) <= half).then_some(height_mm));
        }
        Distractor::Hand {
            center,
            radius_mm,
            top_mm,
        } => {
            let r = radius_mm / s;
            canvas.stamp((center[0] - r, center[1] - r, center[0] + r, center[1] + r), |x, y| {
                cap(((x - center[0]).powi(2) + (y - center[1]).powi(2)) / (r * r), top_mm, radius_mm)
            });
        }
    }
}

fn sample_walls(cfg: &SceneConfig, heads: &[Point], rng: &mut ChaCha8Rng) -> Vec<Distractor> {
    let s = cfg.calibration.scale_mm_per_px;
    let whole = cfg.walls_per_scene.floor() as usize;
    let n = whole + usize::from(rng.random_bool((cfg.walls_per_scene - whole as f64).clamp(0.0, 1.0)));
    let mut walls = Vec::new();
    for _ in 0..n {
        for _ in 0..DISTRACTOR_ATTEMPTS {
            let len = cfg.wall_length_mm.sample(rng) / s;
            let thickness_mm = cfg.wall_thickness_mm.sample(rng);
            let height_mm = cfg.wall_height_mm.sample(rng);
            let mid = [
                rng.random_range(0.0..cfg.width as f64),
                rng.random_range(0.0..cfg.height as f64),
            ];
            let a = rng.random_range(0.0..PI);
            let (dx, dy) = (len / 2.0 * a.cos(), len / 2.0 * a.sin());
            let from = [mid[0] - dx, mid[1] - dy];
            let to = [mid[0] + dx, mid[1] + dy];
            let clear = heads.iter().all(|h| {
                seg_dist([f64::from(h.x), f64::from(h.y)], from, to) * s - thickness_mm / 2.0 >= cfg.wall_clearance_mm
            });
            if clear {
                walls.push(Distractor::Wall {
                    from,
                    to,
                    thickness_mm,
                    height_mm,
                });
                break;
            }
        }
    }
    walls
}

/// One scene from its own random stream.
pub fn generate_scene_with_rng(cfg: &SceneConfig, frame_id: &str, rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    cfg.validate()?;
    let n = rng.random_range(cfg.count_min..=cfg.count_max);
    let heads = place_heads(cfg, n, rng)?;
    let pedestrians: Vec<Pedestrian> = heads
        .iter()
        .map(|&position| {
            let apex_mm = cfg.apex_height_mm.sample(rng);
            Pedestrian {
                position,
                apex_mm,
                head_radius_mm: cfg.head_radius_mm.sample(rng),
                shoulder_width_mm: cfg.shoulder_width_mm.sample(rng),
                shoulder_depth_mm: cfg.shoulder_depth_mm.sample(rng),
                shoulder_top_mm: apex_mm - cfg.shoulder_drop_mm.sample(rng),
                orientation: rng.random_range(0.0..PI),
            }
        })
        .collect();

    let mut distractors = sample_walls(cfg, &heads, rng);
    let s = cfg.calibration.scale_mm_per_px;
    for p in &pedestrians {
        if rng.random_bool(cfg.hand_probability) {
            let off = cfg.hand_offset_mm.sample(rng) / s;
            let a = rng.random_range(0.0..TAU);
            distractors.push(Distractor::Hand {
                center: [f64::from(p.position.x) + off * a.cos(), f64::from(p.position.y) + off * a.sin()],
                radius_mm: cfg.hand_radius_mm.sample(rng),
                top_mm: p.apex_mm + cfg.hand_rise_mm.sample(rng),
            });
        }
    }

    let (w, h) = (cfg.width, cfg.height);
    let mut canvas = Canvas {
        width: w,
        height: h,
        h: vec![f64::NEG_INFINITY; w * h],
    };
    for p in &pedestrians {
        render_pedestrian(&mut canvas, p, cfg);
    }
    for d in &distractors {
        render_distractor(&mut canvas, d, cfg);
    }

    let sigma = cfg.floor_noise_mm;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let sensor = cfg.calibration.sensor_height_mm;
    let mut depth = Vec::with_capacity(w * h);
    for &v in &canvas.h {
        let height = if v > 0.0 {
            v
        } else if sigma > 0.0 {
            // floor noise, truncated at three standard deviations
            noise.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma)
        } else {
            0.0
        };
        let d = (sensor - height).round().clamp(1.0, f64::from(u16::MAX));
        depth.push(d as u16);
    }
    if cfg.invalid_probability > 0.0 {
        for d in &mut depth {
            if rng.random_bool(cfg.invalid_probability) {
                *d = crate::depth::INVALID_DEPTH;
            }
        }
    }

    let frame = DepthFrame::new(w, h, depth, frame_id)?;
    Ok(SyntheticScene {
        frame,
        annotations: AnnotationSet {
            frame_id: frame_id.to_string(),
            points: heads,
        },
        pedestrians,
        distractors,
    })
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    generate_scene_with_rng(cfg, &frame_id(0), &mut scene_rng(seed, 0))
}

/// `n` scenes; scene `i` uses stream `i` of `seed`, so the result does not
/// depend on how the work is scheduled.
pub fn generate_corpus(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| generate_scene_with_rng(cfg, &frame_id(i), &mut scene_rng(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub frame_id: String,
    pub seed: u64,
    pub stream: u64,
    pub pedestrians: usize,
    pub walls: usize,
    pub hands: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config_hash: String,
    pub config: SceneConfig,
    pub frames: Vec<ManifestFrame>,
}

pub const FRAMES_DIR: &str = "frames";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `frames/<id>.pgm` with sidecars, `annotations.jsonl` and
/// `manifest.json` under `dir`.
pub fn write_corpus(dir: &Path, cfg: &SceneConfig, seed: u64, scenes: &[SyntheticScene]) -> Result<CorpusManifest> {
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    scenes.par_iter().try_for_each(|s| {
        save_frame(
            &s.frame,
            &cfg.calibration,
            &frames_dir.join(format!("{}.pgm", s.frame.frame_id)),
        )
    })?;
    let annotations: Vec<AnnotationSet> = scenes.iter().map(|s| s.annotations.clone()).collect();
    write_annotations(&dir.join(ANNOTATIONS_FILE), &annotations)?;
    let manifest = CorpusManifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        frames: scenes
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestFrame {
                frame_id: s.frame.frame_id.clone(),
                seed,
                stream: i as u64,
                pedestrians: s.pedestrians.len(),
                walls: s.distractors.iter().filter(|d| matches!(d, Distractor::Wall { .. })).count(),
                hands: s.distractors.iter().filter(|d| matches!(d, Distractor::Hand { .. })).count(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_corpus_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}
