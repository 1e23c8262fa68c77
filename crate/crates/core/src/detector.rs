//! Sliding-window scoring, thresholding and non-maximum suppression.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{to_height_field, Calibration, DepthFrame, HeightField, Point};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FrameFeatures};
use crate::mlp::InferenceMlp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Windows scoring at least this are kept as candidates.
    pub threshold: f64,
    /// Minimum distance between two reported detections, in pixels.
    pub nms_radius_px: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            threshold: 0.9,
            nms_radius_px: 20.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.nms_radius_px > 0.0 && self.nms_radius_px.is_finite()) {
            return Err(Error::Config(format!("nms radius {} must be positive", self.nms_radius_px)));
        }
        Ok(())
    }

    pub fn with_nms_radius_mm(mut self, mm: f64, calib: &Calibration) -> Self {
        self.nms_radius_px = calib.mm_to_px(mm);
        self
    }
}

/// Score of every window on the stride lattice, row-major over window
/// origins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub features: FeatureConfig,
    pub cols: usize,
    pub rows: usize,
    pub scores: Vec<f32>,
}

impl ScoreMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Window origin, in cells, of entry `(col, row)`.
    pub fn origin(&self, col: usize, row: usize) -> (usize, usize) {
        let s = self.features.stride_cells;
        (col * s, row * s)
    }

    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.scores[row * self.cols + col]
    }

    /// `(origin, center, alpha)` for every window.
    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), (usize, usize), f32)> + '_ {
        (0..self.rows).flat_map(move |r| {
            (0..self.cols).map(move |c| {
                let o = self.origin(c, r);
                (o, crate::features::window_center(&self.features, o), self.at(c, r))
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x: i32,
    pub y: i32,
    pub alpha: f64,
}

impl Candidate {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame_id: String,
    pub detections: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

impl DetectionSet {
    pub fn points(&self) -> Vec<Point> {
        self.detections.iter().map(Candidate::position).collect()
    }
}

/// Scores every window of `field`. Cells are computed once for the frame
/// and each row of windows is scored with one batched forward pass.
pub fn score_windows(field: &HeightField, model: &InferenceMlp, features: &FeatureConfig) -> Result<ScoreMap> {
    if model.feature_config != *features {
        return Err(Error::Config(format!(
            "model was trained with {:?}, detector configured with {:?}",
            model.feature_config, features
        )));
    }
    let frame = FrameFeatures::new(field, features)?;
    let (cols, rows) = frame.window_counts();
    let dim = features.descriptor_len();
    if model.input_dim() != dim {
        return Err(Error::Config(format!(
            "model input width {} does not match descriptor length {dim}",
            model.input_dim()
        )));
    }
    let stride = features.stride_cells;
    let mut scores = vec![0f32; cols * rows];
    scores
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each_init(
            || (vec![0f32; cols * dim], (Vec::new(), Vec::new())),
            |(batch, scratch), (r, out)| {
                for c in 0..cols {
                    frame.write_descriptor((c * stride, r * stride), &mut batch[c * dim..(c + 1) * dim]);
                }
                model.forward_batch(batch, cols, scratch, out);
            },
        );
    Ok(ScoreMap {
        features: *features,
        cols,
        rows,
        scores,
    })
}

/// Windows with `alpha >= threshold`, positioned at their center pixel, in
/// row-major window order.
pub fn threshold_candidates(scores: &ScoreMap, threshold: f64) -> Vec<Candidate> {
    scores
        .entries()
        .filter(|&(_, _, a)| a as f64 >= threshold)
        .map(|(_, (x, y), a)| Candidate {
            x: x as i32,
            y: y as i32,
            alpha: a as f64,
        })
        .collect()
}

/// Processing order for suppression: score descending, then `(y, x)`
/// ascending.
pub fn nms_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.alpha
        .total_cmp(&a.alpha)
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
}

/// Greedy suppression: candidates are visited in [`nms_order`] and kept
/// unless a kept candidate lies strictly closer than `radius`.
pub fn nms(candidates: &[Candidate], radius: f64) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(nms_order);
    let r2 = radius * radius;
    let mut kept: Vec<Candidate> = Vec::new();
    for c in sorted {
        let p = c.position();
        if kept.iter().all(|k| (k.position().dist2(p) as f64) >= r2) {
            kept.push(c);
        }
    }
    kept
}

/// Full pipeline on one frame: height conversion, scoring, threshold and
/// suppression.
pub fn detect(frame: &DepthFrame, calib: &Calibration, model: &InferenceMlp, cfg: &DetectorConfig) -> Result<DetectionSet> {
    cfg.validate()?;
    calib.validate()?;
    let field = to_height_field(frame, calib);
    let detections = detect_field(&field, model, cfg)?;
    Ok(DetectionSet {
        frame_id: frame.frame_id.clone(),
        detections,
        method: Some(model.feature_config.method.to_string()),
    })
}

pub fn detect_field(field: &HeightField, model: &InferenceMlp, cfg: &DetectorConfig) -> Result<Vec<Candidate>> {
    let scores = score_windows(field, model, &model.feature_config)?;
    Ok(nms(&threshold_candidates(&scores, cfg.threshold), cfg.nms_radius_px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMethod;
    use crate::mlp::Mlp;

    fn cand(x: i32, y: i32, alpha: f64) -> Candidate {
        Candidate { x, y, alpha }
    }

    fn map(scores: Vec<f32>, cols: usize) -> ScoreMap {
        ScoreMap {
            features: FeatureConfig::default(),
            cols,
            rows: scores.len() / cols,
            scores,
        }
    }

    #[test]
    fn threshold_examples() {
        let m = map(vec![0.95, 0.89], 2);
        let c = threshold_candidates(&m, 0.9);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].alpha, 0.95f32 as f64);
        assert_eq!((c[0].x, c[0].y), (33, 33));
        assert!(threshold_candidates(&map(vec![0.1, 0.2], 2), 0.9).is_empty());
        let boundary = map(vec![0.5], 1);
        assert_eq!(threshold_candidates(&boundary, 0.5).len(), 1);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 40.0).is_empty());
        let kept = nms(&[cand(0, 0, 0.92), cand(3, 0, 0.95)], 40.0);
        assert_eq!(kept, vec![cand(3, 0, 0.95)]);
        let chain = [cand(0, 0, 0.99), cand(30, 0, 0.95), cand(60, 0, 0.94)];
        assert_eq!(nms(&chain, 40.0), vec![chain[0], chain[2]]);
        // exactly at the radius is not suppressed
        assert_eq!(nms(&[cand(0, 0, 0.9), cand(40, 0, 0.9)], 40.0).len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        for t in [0.0, 1.0, f64::NAN] {
            let c = DetectorConfig {
                threshold: t,
                ..DetectorConfig::default()
            };
            assert!(c.validate().is_err());
        }
        let c = DetectorConfig::default().with_nms_radius_mm(330.0, &Calibration::default());
        assert_eq!(c.nms_radius_px, 33.0);
    }

    #[test]
    fn feature_config_mismatch_is_refused() {
        let hog = FeatureConfig::default().with_method(FeatureMethod::Hog);
        let model = Mlp::for_features(hog, 1).unwrap().to_inference();
        let field = HeightField::constant(66, 66, 0.0);
        let err = score_windows(&field, &model, &FeatureConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_window_frame() {
        let cfg = FeatureConfig::default();
        let model = Mlp::for_features(cfg, 1).unwrap().to_inference();
        let field = HeightField::constant(66, 70, 100.0);
        let scores = score_windows(&field, &model, &cfg).unwrap();
        assert_eq!((scores.cols, scores.rows), (1, 1));
        assert!(scores.scores[0] > 0.0 && scores.scores[0] < 1.0);
        let small = HeightField::constant(60, 70, 100.0);
        assert!(matches!(score_windows(&small, &model, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn detection_jsonl_shape() {
        let set = DetectionSet {
            frame_id: "f1".into(),
            detections: vec![cand(3, 4, 0.5)],
            method: None,
        };
        assert_eq!(
            serde_json::to_string(&set).unwrap(),
            r#"{"frame_id":"f1","detections":[{"x":3,"y":4,"alpha":0.5}]}"#
        );
    }
}
