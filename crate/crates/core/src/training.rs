//! Labeled window samples, augmentation, the on-disk sample store and the
//! training driver.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{HeightField, Point};
use crate::detector::{detect_field, Candidate, DetectorConfig};
use crate::error::{Error, Result};
use crate::features::{patch_descriptor, FeatureConfig};
use crate::mlp::{evaluate_set, train, Mlp, TrainConfig, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    Annotated,
    HardMined,
}

/// A window-sized height patch with its label and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch: HeightField,
    pub label: Label,
    pub provenance: Provenance,
    pub frame_id: String,
    /// Top-left pixel of the patch in the source frame.
    pub origin: Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativePolicy {
    /// Plain negatives are at least this far from every annotation.
    pub far_px: f64,
    /// Near-miss negatives sit in `[near_min_px, near_max_px)` from their
    /// nearest annotation.
    pub near_min_px: f64,
    pub near_max_px: f64,
    /// Negatives per positive in each frame.
    pub quota_ratio: f64,
    /// Share of the negative quota drawn from the near-miss band.
    pub near_fraction: f64,
    /// Negatives drawn from frames without annotations.
    pub empty_frame_quota: usize,
    /// Extra positives per annotation, offset by at most half a stride.
    pub jittered_positives: usize,
    /// Share of the remaining quota centered on raised structure, at least
    /// `near_min_px` from every annotation.
    pub elevated_fraction: f64,
    pub elevated_min_mm: f32,
}

impl Default for NegativePolicy {
    fn default() -> Self {
        NegativePolicy {
            far_px: 66.0,
            near_min_px: 6.0,
            near_max_px: 66.0,
            quota_ratio: 3.0,
            near_fraction: 0.5,
            empty_frame_quota: 8,
            jittered_positives: 1,
            elevated_fraction: 0.5,
            elevated_min_mm: 500.0,
        }
    }
}

impl NegativePolicy {
    pub fn for_features(cfg: &FeatureConfig) -> Self {
        let side = cfg.window_px() as f64;
        NegativePolicy {
            far_px: side,
            near_min_px: cfg.cell_size as f64,
            near_max_px: side,
            ..NegativePolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.near_min_px > 0.0
            && self.near_min_px < self.near_max_px
            && self.near_max_px <= self.far_px
            && self.quota_ratio >= 0.0
            && (0.0..=1.0).contains(&self.near_fraction)
            && (0.0..=1.0).contains(&self.elevated_fraction);
        if !ok {
            return Err(Error::Config(format!("invalid negative policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub samples: Vec<Sample>,
    /// Annotations too close to the border for a full window.
    pub skipped_positives: usize,
}

fn nearest_distance(p: Point, annotations: &[Point]) -> f64 {
    annotations
        .iter()
        .map(|a| a.dist(p))
        .fold(f64::INFINITY, f64::min)
}

/// Top-left corner of the window centered on `center`, if it fits.
pub fn window_origin_for(center: Point, side: usize, width: usize, height: usize) -> Option<Point> {
    let half = (side / 2) as i32;
    let (x0, y0) = (center.x - half, center.y - half);
    let fits = x0 >= 0 && y0 >= 0 && x0 as usize + side <= width && y0 as usize + side <= height;
    fits.then_some(Point::new(x0, y0))
}

fn crop_window(field: &HeightField, origin: Point, side: usize) -> HeightField {
    field
        .crop(origin.x as usize, origin.y as usize, side, side)
        .expect("origin checked against frame bounds")
}

/// Positives centered on each annotation (plus jittered copies) and
/// negatives that are far from every annotation, off-center near one, or
/// sitting on raised non-head structure. Negative counts follow the policy
/// quota.
pub fn extract_samples(
    field: &HeightField,
    frame_id: &str,
    annotations: &[Point],
    features: &FeatureConfig,
    policy: &NegativePolicy,
    rng: &mut impl Rng,
) -> Result<Extraction> {
    policy.validate()?;
    let side = features.window_px();
    if field.width < side || field.height < side {
        return Err(Error::Dimension(format!(
            "frame {}x{} smaller than one window",
            field.width, field.height
        )));
    }
    for a in annotations {
        if a.x < 0 || a.y < 0 || a.x as usize >= field.width || a.y as usize >= field.height {
            return Err(Error::Bounds(format!("annotation ({}, {}) outside frame {frame_id}", a.x, a.y)));
        }
    }
    let mut out = Extraction::default();
    let sample = |center: Point, label: Label| {
        window_origin_for(center, side, field.width, field.height).map(|origin| Sample {
            patch: crop_window(field, origin, side),
            label,
            provenance: Provenance::Synthetic,
            frame_id: frame_id.to_string(),
            origin,
        })
    };

    let jitter = (features.stride_px() / 2) as i32;
    for &a in annotations {
        match sample(a, Label::Positive) {
            Some(s) => out.samples.push(s),
            None => {
                out.skipped_positives += 1;
                continue;
            }
        }
        for _ in 0..policy.jittered_positives {
            if jitter == 0 {
                break;
            }
            let p = Point::new(
                a.x + rng.random_range(-jitter..=jitter),
                a.y + rng.random_range(-jitter..=jitter),
            );
            if let Some(s) = sample(p, Label::Positive) {
                out.samples.push(s);
            }
        }
    }

    let quota = if annotations.is_empty() {
        policy.empty_frame_quota
    } else {
        (policy.quota_ratio * annotations.len() as f64).round() as usize
    };
    let near_quota = if annotations.is_empty() {
        0
    } else {
        (policy.near_fraction * quota as f64).round() as usize
    };
    let half = (side / 2) as i32;
    let attempts = 50 * quota.max(1);

    let mut near = 0;
    for _ in 0..attempts {
        if near >= near_quota {
            break;
        }
        let a = annotations[rng.random_range(0..annotations.len())];
        let d = rng.random_range(policy.near_min_px..policy.near_max_px);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let c = Point::new(
            (f64::from(a.x) + d * t.cos()).round() as i32,
            (f64::from(a.y) + d * t.sin()).round() as i32,
        );
        let nd = nearest_distance(c, annotations);
        if nd < policy.near_min_px || nd >= policy.near_max_px {
            continue;
        }
        if let Some(s) = sample(c, Label::Negative) {
            out.samples.push(s);
            near += 1;
        }
    }

    let rest = quota - near;
    let elevated_quota = (policy.elevated_fraction * rest as f64).round() as usize;
    let mut elevated = 0;
    if elevated_quota > 0 {
        let mut raised = Vec::new();
        for y in half as usize..=field.height.saturating_sub(side) + half as usize {
            for x in half as usize..=field.width.saturating_sub(side) + half as usize {
                if field.is_valid(x, y) && field.at(x, y) >= policy.elevated_min_mm {
                    let c = Point::new(x as i32, y as i32);
                    if nearest_distance(c, annotations) >= policy.near_min_px {
                        raised.push(c);
                    }
                }
            }
        }
        if !raised.is_empty() {
            for _ in 0..attempts {
                if elevated >= elevated_quota {
                    break;
                }
                let c = raised[rng.random_range(0..raised.len())];
                if let Some(s) = sample(c, Label::Negative) {
                    out.samples.push(s);
                    elevated += 1;
                }
            }
        }
    }

    let far_quota = rest - elevated;
    let mut far = 0;
    for _ in 0..attempts {
        if far >= far_quota {
            break;
        }
        let c = Point::new(
            rng.random_range(half..=(field.width - side) as i32 + half),
            rng.random_range(half..=(field.height - side) as i32 + half),
        );
        if nearest_distance(c, annotations) < policy.far_px {
            continue;
        }
        if let Some(s) = sample(c, Label::Negative) {
            out.samples.push(s);
            far += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Emit all four quarter turns instead of the patch alone.
    pub rotations: bool,
    /// Standard deviation of additive height noise; 0 disables it.
    pub noise_sigma_mm: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotations: true,
            noise_sigma_mm: 15.0,
        }
    }
}

impl AugmentConfig {
    pub fn factor(&self) -> usize {
        if self.rotations {
            4
        } else {
            1
        }
    }
}

/// Quarter turns of the patch (or the patch alone), each with optional
/// Gaussian height noise on valid pixels.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    if sample.patch.width != sample.patch.height {
        return Err(Error::Dimension(format!(
            "augmentation needs a square patch, got {}x{}",
            sample.patch.width, sample.patch.height
        )));
    }
    if !(cfg.noise_sigma_mm >= 0.0 && cfg.noise_sigma_mm.is_finite()) {
        return Err(Error::Config("noise sigma must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (cfg.noise_sigma_mm > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma_mm).expect("valid sigma"));
    let mut out = Vec::with_capacity(cfg.factor());
    let mut patch = sample.patch.clone();
    for turn in 0..cfg.factor() {
        if turn > 0 {
            patch = patch.rot90();
        }
        let mut p = patch.clone();
        if let Some(n) = &noise {
            for (h, &v) in p.h.iter_mut().zip(&p.valid) {
                if v {
                    *h = (f64::from(*h) + n.sample(&mut rng)).max(0.0) as f32;
                }
            }
        }
        out.push(Sample {
            patch: p,
            ..sample.clone()
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Judgment {
    Correct,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionJudgment {
    pub id: usize,
    pub judgment: Judgment,
}

/// Expert review of one frame's detections.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Verdict {
    pub judgments: Vec<DetectionJudgment>,
    /// Pedestrians the detector missed.
    pub added: Vec<Point>,
    pub note: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub positives: usize,
    pub negatives: usize,
    /// Positions too close to the border for a full window.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub label: Label,
    pub provenance: Provenance,
    pub frame_id: String,
    pub origin: Point,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub next_id: u64,
    pub counts: BTreeMap<Label, usize>,
    pub provenance: BTreeMap<Provenance, usize>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub positive: usize,
    pub negative: usize,
    pub synthetic: usize,
    pub annotated: usize,
    pub hard_mined: usize,
}

const PATCH_MAGIC: &[u8; 8] = b"HHPATCH\x01";
const STORE_MANIFEST: &str = "manifest.json";

fn encode_patch(p: &HeightField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * p.h.len());
    out.extend_from_slice(PATCH_MAGIC);
    out.extend_from_slice(&(p.width as u32).to_le_bytes());
    out.extend_from_slice(&(p.height as u32).to_le_bytes());
    for (&h, &v) in p.h.iter().zip(&p.valid) {
        out.extend_from_slice(&(if v { h } else { f32::NAN }).to_le_bytes());
    }
    out
}

fn decode_patch(bytes: &[u8], path: &Path) -> Result<HeightField> {
    let bad = |reason: &str| Error::Data(format!("{}: {reason}", path.display()));
    let rest = bytes.strip_prefix(PATCH_MAGIC.as_slice()).ok_or_else(|| bad("bad patch magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated patch header"));
    }
    let w = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let body = &rest[8..];
    if body.len() != 4 * w * h {
        return Err(bad("patch payload size mismatch"));
    }
    Ok(HeightField::from_fn(w, h, |x, y| {
        let i = 4 * (y * w + x);
        let v = f32::from_le_bytes(body[i..i + 4].try_into().unwrap());
        (!v.is_nan()).then_some(v)
    }))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Directory of raw patch samples, `positive/<id>.bin` and
/// `negative/<id>.bin`, indexed by `manifest.json`. One writer at a time:
/// mutation goes through `&mut self`.
#[derive(Debug)]
pub struct DatasetStore {
    root: PathBuf,
    manifest: StoreManifest,
}

impl DatasetStore {
    pub fn open(root: &Path) -> Result<Self> {
        for label in [Label::Positive, Label::Negative] {
            let d = root.join(label.dir_name());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mpath = root.join(STORE_MANIFEST);
        let manifest = if mpath.exists() {
            let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?
        } else {
            StoreManifest::default()
        };
        Ok(DatasetStore {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn stats(&self) -> StoreStats {
        let c = |l| self.manifest.counts.get(&l).copied().unwrap_or(0);
        let p = |v| self.manifest.provenance.get(&v).copied().unwrap_or(0);
        StoreStats {
            positive: c(Label::Positive),
            negative: c(Label::Negative),
            synthetic: p(Provenance::Synthetic),
            annotated: p(Provenance::Annotated),
            hard_mined: p(Provenance::HardMined),
        }
    }

    fn sample_path(&self, label: Label, id: u64) -> PathBuf {
        self.root.join(label.dir_name()).join(format!("{id:08}.bin"))
    }

    /// Sample files present on disk per label, counted from the directory
    /// listing rather than the manifest.
    pub fn recount(&self) -> Result<(usize, usize)> {
        let count = |label: Label| -> Result<usize> {
            let d = self.root.join(label.dir_name());
            let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
            let mut n = 0;
            for e in entries {
                let e = e.map_err(|e| Error::io(&d, e))?;
                if e.path().extension().is_some_and(|x| x == "bin") {
                    n += 1;
                }
            }
            Ok(n)
        };
        Ok((count(Label::Positive)?, count(Label::Negative)?))
    }

    pub fn flush(&self) -> Result<()> {
        let path = self.root.join(STORE_MANIFEST);
        let text = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        write_atomic(&path, &text)
    }

    /// Writes the samples and then the manifest; returns their ids.
    pub fn add(&mut self, samples: &[Sample]) -> Result<Vec<u64>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::with_capacity(samples.len());
        for s in samples {
            let id = self.manifest.next_id;
            write_atomic(&self.sample_path(s.label, id), &encode_patch(&s.patch))?;
            self.manifest.next_id += 1;
            *self.manifest.counts.entry(s.label).or_default() += 1;
            *self.manifest.provenance.entry(s.provenance).or_default() += 1;
            self.manifest.samples.push(SampleRecord {
                id,
                label: s.label,
                provenance: s.provenance,
                frame_id: s.frame_id.clone(),
                origin: s.origin,
            });
            ids.push(id);
        }
        self.flush()?;
        Ok(ids)
    }

    /// Every stored sample in id order.
    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.manifest
            .samples
            .par_iter()
            .map(|r| {
                let path = self.sample_path(r.label, r.id);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Ok(Sample {
                    patch: decode_patch(&bytes, &path)?,
                    label: r.label,
                    provenance: r.provenance,
                    frame_id: r.frame_id.clone(),
                    origin: r.origin,
                })
            })
            .collect()
    }
}

/// Turns a verdict on `detections` into samples: false positives become
/// negatives at their window, confirmed and added positions positives.
pub fn verdict_samples(
    field: &HeightField,
    frame_id: &str,
    detections: &[Candidate],
    verdict: &Verdict,
    features: &FeatureConfig,
) -> Result<(Vec<Sample>, usize)> {
    if let Some(j) = verdict.judgments.iter().find(|j| j.id >= detections.len()) {
        return Err(Error::UnknownDetection(j.id));
    }
    let side = features.window_px();
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut push = |center: Point, label: Label| match window_origin_for(center, side, field.width, field.height) {
        Some(origin) => samples.push(Sample {
            patch: crop_window(field, origin, side),
            label,
            provenance: Provenance::HardMined,
            frame_id: frame_id.to_string(),
            origin,
        }),
        None => skipped += 1,
    };
    for j in &verdict.judgments {
        let label = match j.judgment {
            Judgment::Correct => Label::Positive,
            Judgment::FalsePositive => Label::Negative,
        };
        push(detections[j.id].position(), label);
    }
    for &p in &verdict.added {
        push(p, Label::Positive);
    }
    Ok((samples, skipped))
}

/// Feeds one reviewed frame back into the store.
pub fn ingest_hard_mined(
    store: &mut DatasetStore,
    field: &HeightField,
    frame_id: &str,
    detections: &[Candidate],
    verdict: &Verdict,
    features: &FeatureConfig,
) -> Result<IngestSummary> {
    let (samples, skipped) = verdict_samples(field, frame_id, detections, verdict, features)?;
    store.add(&samples)?;
    Ok(IngestSummary {
        positives: samples.iter().filter(|s| s.label == Label::Positive).count(),
        negatives: samples.iter().filter(|s| s.label == Label::Negative).count(),
        skipped,
    })
}

/// Verdict a reviewer with perfect ground truth would give: detections
/// within `tolerance_px` of an annotation are correct, the rest false
/// positives, and annotations without such a detection are added.
pub fn auto_verdict(detections: &[Candidate], annotations: &[Point], tolerance_px: f64) -> Verdict {
    let t2 = tolerance_px * tolerance_px;
    let judgments = detections
        .iter()
        .enumerate()
        .map(|(id, d)| {
            let hit = annotations.iter().any(|a| (a.dist2(d.position()) as f64) <= t2);
            DetectionJudgment {
                id,
                judgment: if hit { Judgment::Correct } else { Judgment::FalsePositive },
            }
        })
        .collect();
    let added = annotations
        .iter()
        .filter(|a| !detections.iter().any(|d| (a.dist2(d.position()) as f64) <= t2))
        .copied()
        .collect();
    Verdict {
        judgments,
        added,
        note: String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub features: FeatureConfig,
    pub hidden: Vec<usize>,
    pub optimizer: TrainConfig,
    pub augment: AugmentConfig,
    pub negatives: NegativePolicy,
    /// Share of stored samples held out for reporting.
    pub heldout_fraction: f64,
    pub seed: u64,
    /// Detect-review-retrain rounds run against synthetic ground truth.
    pub mining_rounds: usize,
    /// Detections farther than this from every annotation count as false
    /// positives during automatic mining.
    pub mining_tolerance_px: f64,
    pub detector: DetectorConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let features = FeatureConfig::default();
        TrainingConfig {
            features,
            hidden: vec![64, 16],
            optimizer: TrainConfig::default(),
            augment: AugmentConfig::default(),
            negatives: NegativePolicy::for_features(&features),
            heldout_fraction: 0.1,
            seed: 1,
            mining_rounds: 1,
            mining_tolerance_px: 6.0,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.features.descriptor_len()];
        dims.extend(&self.hidden);
        dims.push(1);
        dims
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub samples: usize,
    pub augmented: usize,
    pub heldout: usize,
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

fn mix(seed: u64, k: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augments and featurizes samples in order. Sample `i` is augmented with
/// a seed derived from `(seed, i)`.
pub fn featurize(samples: &[Sample], cfg: &TrainingConfig, seed: u64) -> Result<TrainingSet> {
    let rows: Vec<Vec<(Vec<f64>, bool)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            augment(s, &cfg.augment, mix(seed, i as u64))?
                .iter()
                .map(|a| Ok((patch_descriptor(&a.patch, &cfg.features)?.values, a.label == Label::Positive)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut set = TrainingSet::new(cfg.features.descriptor_len());
    for (x, y) in rows.into_iter().flatten() {
        set.push(&x, y)?;
    }
    Ok(set)
}

/// Splits, augments and featurizes `samples`, then trains a fresh network.
pub fn train_samples(samples: &[Sample], cfg: &TrainingConfig) -> Result<(Mlp, TrainReport)> {
    cfg.features.validate()?;
    let pos = samples.iter().filter(|s| s.label == Label::Positive).count();
    if pos == 0 || pos == samples.len() {
        return Err(Error::Data(format!(
            "training needs both classes, got {pos} positive and {} negative samples",
            samples.len() - pos
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1)));
    let n_held = ((samples.len() as f64) * cfg.heldout_fraction.clamp(0.0, 0.5)).floor() as usize;
    let (held_idx, train_idx) = order.split_at(n_held);
    let mut train_idx = train_idx.to_vec();
    let mut held_idx = held_idx.to_vec();
    train_idx.sort_unstable();
    held_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let train_set = featurize(&pick(&train_idx), cfg, mix(cfg.seed, 2))?;
    let held_set = featurize(&pick(&held_idx), cfg, mix(cfg.seed, 3))?;

    let model = Mlp::new(&cfg.layer_dims(), cfg.features, mix(cfg.seed, 4))?;
    let (model, history) = train(model, &train_set, &cfg.optimizer)?;
    let (_, train_accuracy) = evaluate_set(&model, &train_set);
    let (heldout_loss, heldout_accuracy) = evaluate_set(&model, &held_set);
    log::info!(
        "trained on {} windows: loss {:.5}, held-out accuracy {:.4}",
        train_set.len(),
        history.last().copied().unwrap_or(f64::NAN),
        heldout_accuracy
    );
    Ok((
        model,
        TrainReport {
            samples: samples.len(),
            augmented: train_set.len() + held_set.len(),
            heldout: held_set.len(),
            loss_history: history,
            train_accuracy,
            heldout_loss,
            heldout_accuracy,
        },
    ))
}

/// Trains on everything in the store.
pub fn run_training(store: &DatasetStore, cfg: &TrainingConfig) -> Result<(Mlp, TrainReport)> {
    train_samples(&store.load_all()?, cfg)
}

/// A frame with ground truth, used for sample extraction and automatic
/// mining.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub frame_id: String,
    pub field: HeightField,
    pub annotations: Vec<Point>,
}

/// Extracts samples from every frame; frame `i` draws from a stream
/// derived from `(seed, i)`.
pub fn extract_corpus(frames: &[LabeledFrame], cfg: &TrainingConfig) -> Result<Extraction> {
    let parts: Vec<Extraction> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1000 + i as u64));
            extract_samples(&f.field, &f.frame_id, &f.annotations, &cfg.features, &cfg.negatives, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut out = Extraction::default();
    for p in parts {
        out.samples.extend(p.samples);
        out.skipped_positives += p.skipped_positives;
    }
    Ok(out)
}

/// Runs the detector over labeled frames and returns the samples an
/// automatic reviewer would mine from them.
pub fn mine_frames(frames: &[LabeledFrame], model: &Mlp, cfg: &TrainingConfig) -> Result<Vec<Sample>> {
    let inference = model.to_inference();
    let parts: Vec<Vec<Sample>> = frames
        .par_iter()
        .map(|f| {
            let dets = detect_field(&f.field, &inference, &cfg.detector)?;
            let mut verdict = auto_verdict(&dets, &f.annotations, cfg.mining_tolerance_px);
            // confirmed detections are already represented by the centered
            // positive of their annotation
            verdict.judgments.retain(|j| j.judgment == Judgment::FalsePositive);
            Ok(verdict_samples(&f.field, &f.frame_id, &dets, &verdict, &cfg.features)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Extraction, training and `mining_rounds` rounds of automatic hard
/// mining on labeled frames. Every sample is recorded in `store` when one
/// is given.
pub fn train_from_frames(
    frames: &[LabeledFrame],
    cfg: &TrainingConfig,
    mut store: Option<&mut DatasetStore>,
) -> Result<(Mlp, TrainReport)> {
    let mut samples = extract_corpus(frames, cfg)?.samples;
    if let Some(s) = store.as_deref_mut() {
        s.add(&samples)?;
    }
    let (mut model, mut report) = train_samples(&samples, cfg)?;
    for round in 0..cfg.mining_rounds {
        let mined = mine_frames(frames, &model, cfg)?;
        log::info!("mining round {}: {} new samples", round + 1, mined.len());
        if mined.is_empty() {
            break;
        }
        if let Some(s) = store.as_deref_mut() {
            s.add(&mined)?;
        }
        samples.extend(mined);
        (model, report) = train_samples(&samples, cfg)?;
    }
    Ok((model, report))
}
