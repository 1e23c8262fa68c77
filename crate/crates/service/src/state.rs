use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use hahog::depth::{load_frame_with_calibration, to_height_field, DepthFrame, Calibration};
use hahog::detector::{detect, DetectionSet, DetectorConfig};
use hahog::mlp::{load_model, model_hash, InferenceMlp, Mlp};
use hahog::training::{ingest_hard_mined, DatasetStore, IngestSummary, StoreStats, Verdict};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ServiceError};

pub const REVIEWS_FILE: &str = "reviews.json";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory holding `<id>.pgm` rasters, either directly or under `frames/`.
    pub corpus_dir: PathBuf,
    pub model_path: PathBuf,
    pub store_dir: PathBuf,
    pub detector: DetectorConfig,
    /// Seed of the review order.
    pub seed: u64,
}

pub struct LoadedModel {
    pub hash: String,
    pub mlp: Mlp,
    pub inference: InferenceMlp,
}

impl LoadedModel {
    pub fn new(mlp: Mlp) -> Self {
        LoadedModel {
            hash: model_hash(&mlp),
            inference: mlp.to_inference(),
            mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub frame_id: String,
    pub verdict_hash: String,
    pub model_hash: String,
    pub verdict: Verdict,
    pub summary: IngestSummary,
}

pub struct Ledger {
    pub store: DatasetStore,
    pub reviews: BTreeMap<String, ReviewRecord>,
}

impl Ledger {
    fn reviews_path(&self) -> PathBuf {
        self.store.root().join(REVIEWS_FILE)
    }

    pub fn flush(&self) -> hahog::Result<()> {
        self.store.flush()?;
        let path = self.reviews_path();
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_vec_pretty(&self.reviews).expect("reviews serialize");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&text)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|source| hahog::Error::Io { path, source })
    }
}

pub struct AppState {
    pub frames: BTreeMap<String, PathBuf>,
    /// Review order: a seeded shuffle of the frame ids.
    pub order: Vec<String>,
    cursor: Mutex<usize>,
    model: RwLock<Arc<LoadedModel>>,
    cache: Mutex<HashMap<(String, String), Arc<DetectionSet>>>,
    pub detector: DetectorConfig,
    pub ledger: Mutex<Ledger>,
}

/// Content hash of a verdict, used for idempotent submission.
pub fn verdict_hash(v: &Verdict) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("verdict serializes")))
}

fn list_frames(corpus: &Path) -> Result<BTreeMap<String, PathBuf>, ServiceError> {
    let nested = corpus.join(hahog::synth::FRAMES_DIR);
    let dir = if nested.is_dir() { nested } else { corpus.to_path_buf() };
    let entries = fs::read_dir(&dir).map_err(|e| ServiceError::Corpus(format!("{}: {e}", dir.display())))?;
    let mut frames = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|e| ServiceError::Corpus(e.to_string()))?.path();
        if path.extension().is_some_and(|x| x == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                frames.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(frames)
}

impl AppState {
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        cfg.detector.validate()?;
        let mlp = load_model(&cfg.model_path)?;
        let frames = list_frames(&cfg.corpus_dir)?;
        let store = DatasetStore::open(&cfg.store_dir)?;
        let reviews_path = cfg.store_dir.join(REVIEWS_FILE);
        let reviews = if reviews_path.exists() {
            let text = fs::read(&reviews_path).map_err(|source| hahog::Error::Io { path: reviews_path.clone(), source })?;
            serde_json::from_slice(&text).map_err(|source| hahog::Error::Json { path: reviews_path, source })?
        } else {
            BTreeMap::new()
        };
        Ok(AppState::new(frames, mlp, store, reviews, cfg.detector, cfg.seed))
    }

    pub fn new(
        frames: BTreeMap<String, PathBuf>,
        mlp: Mlp,
        store: DatasetStore,
        reviews: BTreeMap<String, ReviewRecord>,
        detector: DetectorConfig,
        seed: u64,
    ) -> Self {
        let mut order: Vec<String> = frames.keys().cloned().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        AppState {
            frames,
            order,
            cursor: Mutex::new(0),
            model: RwLock::new(Arc::new(LoadedModel::new(mlp))),
            cache: Mutex::new(HashMap::new()),
            detector,
            ledger: Mutex::new(Ledger { store, reviews }),
        }
    }

    pub fn model(&self) -> Arc<LoadedModel> {
        self.model.read().expect("model lock").clone()
    }

    /// Swaps in a retrained model. Cached detections of the old model stay
    /// keyed by its hash and are no longer served.
    pub fn set_model(&self, mlp: Mlp) {
        *self.model.write().expect("model lock") = Arc::new(LoadedModel::new(mlp));
    }

    pub fn frame_path(&self, id: &str) -> Result<&PathBuf, ApiError> {
        self.frames.get(id).ok_or_else(|| ApiError::unknown_frame(id))
    }

    pub fn load_frame(&self, id: &str) -> Result<(DepthFrame, Calibration), ApiError> {
        Ok(load_frame_with_calibration(self.frame_path(id)?)?)
    }

    pub fn is_reviewed(&self, id: &str) -> bool {
        self.ledger.lock().expect("ledger lock").reviews.contains_key(id)
    }

    /// Next pending frame in review order, cycling past frames that were
    /// handed out but not yet reviewed.
    pub fn next_pending(&self) -> Option<String> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let ledger = self.ledger.lock().expect("ledger lock");
        let n = self.order.len();
        for k in 0..n {
            let i = (*cursor + k) % n;
            if !ledger.reviews.contains_key(&self.order[i]) {
                *cursor = (i + 1) % n;
                return Some(self.order[i].clone());
            }
        }
        None
    }

    /// Detections of the current model on a frame, computed once per
    /// (frame, model hash).
    pub fn detections(&self, id: &str) -> Result<(Arc<DetectionSet>, String), ApiError> {
        let model = self.model();
        let key = (id.to_string(), model.hash.clone());
        if let Some(d) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok((d.clone(), model.hash.clone()));
        }
        let (frame, calib) = self.load_frame(id)?;
        let mut set = detect(&frame, &calib, &model.inference, &self.detector)?;
        // the file stem names the frame for clients
        set.frame_id = id.to_string();
        let set = Arc::new(set);
        self.cache.lock().expect("cache lock").insert(key, set.clone());
        Ok((set, model.hash.clone()))
    }

    /// Ingests a verdict once. A replay of the same verdict returns the
    /// original summary; a different verdict for a reviewed frame conflicts.
    pub fn submit(&self, id: &str, verdict: &Verdict) -> Result<(IngestSummary, bool), ApiError> {
        let path = self.frame_path(id)?;
        let hash = verdict_hash(verdict);
        if let Some(r) = self.ledger.lock().expect("ledger lock").reviews.get(id) {
            return replay(r, &hash);
        }
        let (dets, model_hash) = self.detections(id)?;
        let (frame, calib) = load_frame_with_calibration(path)?;
        for p in &verdict.added {
            if !frame.contains(*p) {
                return Err(hahog::Error::Bounds(format!("added position ({}, {}) outside frame {id}", p.x, p.y)).into());
            }
        }
        let field = to_height_field(&frame, &calib);
        let features = self.model().mlp.feature_config;
        let mut ledger = self.ledger.lock().expect("ledger lock");
        // another request may have won the race while detections ran
        if let Some(r) = ledger.reviews.get(id) {
            return replay(r, &hash);
        }
        let summary = ingest_hard_mined(&mut ledger.store, &field, id, &dets.detections, verdict, &features)?;
        ledger.reviews.insert(
            id.to_string(),
            ReviewRecord {
                frame_id: id.to_string(),
                verdict_hash: hash,
                model_hash,
                verdict: verdict.clone(),
                summary,
            },
        );
        ledger.flush()?;
        Ok((summary, false))
    }

    pub fn stats(&self) -> (StoreStats, usize, usize) {
        let ledger = self.ledger.lock().expect("ledger lock");
        (ledger.store.stats(), ledger.store.len(), ledger.reviews.len())
    }

    pub fn flush(&self) -> hahog::Result<()> {
        self.ledger.lock().expect("ledger lock").flush()
    }
}

fn replay(r: &ReviewRecord, hash: &str) -> Result<(IngestSummary, bool), ApiError> {
    if r.verdict_hash == hash {
        Ok((r.summary, true))
    } else {
        Err(ApiError::new(
            axum::http::StatusCode::CONFLICT,
            "conflict",
            format!("frame {} already reviewed with a different verdict", r.frame_id),
        ))
    }
}
