use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hahog::cluster::detect_clusters;
use hahog::depth::{load_calibration, load_frame_with_calibration, load_sidecar, read_annotations, read_jsonl, to_height_field, write_jsonl, Calibration};
use hahog::detector::{self, DetectionSet};
use hahog::eval::{evaluate_frame, write_report, BinCounts, BinReport};
use hahog::features::{window_center, FrameFeatures};
use hahog::mlp::{load_model, model_hash, save_model, Mlp};
use hahog::synth::{generate_corpus, generate_scene, write_corpus, ANNOTATIONS_FILE, FRAMES_DIR};
use hahog::training::{run_training, train_from_frames, DatasetStore, LabeledFrame};
use hahog_service::ServiceConfig;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::AppConfig;
use crate::{BenchArgs, CliError, DetectArgs, EvalArgs, ServeArgs, SynthArgs, TrainArgs};

fn echo(cfg: &AppConfig) {
    println!("{}", json!({ "effective_config": cfg }));
}

fn done(result: Value) -> Result<(), CliError> {
    println!("{}", json!({ "result": result }));
    Ok(())
}

fn finish(cfg: &mut AppConfig) -> Result<(), CliError> {
    cfg.resolve();
    cfg.validate()?;
    echo(cfg);
    Ok(())
}

/// A single `.pgm` or every `.pgm` in a directory (or its `frames/`), sorted.
fn list_frames(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let nested = path.join(FRAMES_DIR);
    let dir = if nested.is_dir() { nested } else { path.to_path_buf() };
    let entries = fs::read_dir(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    if out.is_empty() {
        return Err(CliError::Data(format!("no .pgm frames in {}", dir.display())));
    }
    out.sort();
    Ok(out)
}

fn load_model_for(path: Option<&Path>, method: hahog::FeatureMethod) -> Result<Mlp, CliError> {
    let path = path.ok_or_else(|| CliError::Usage(format!("--model is required for --method {method}")))?;
    let model = load_model(path)?;
    if model.feature_config.method != method {
        return Err(CliError::Usage(format!(
            "model {} uses {} features, not {method}",
            path.display(),
            model.feature_config.method
        )));
    }
    Ok(model)
}

pub fn synth(mut cfg: AppConfig, a: SynthArgs) -> Result<(), CliError> {
    finish(&mut cfg)?;
    let scenes = generate_corpus(&cfg.synth, a.frames, cfg.seed)?;
    let manifest = write_corpus(&a.out, &cfg.synth, cfg.seed, &scenes)?;
    done(json!({
        "frames": scenes.len(),
        "pedestrians": scenes.iter().map(|s| s.pedestrians.len()).sum::<usize>(),
        "with_distractors": scenes.iter().filter(|s| s.has_distractors()).count(),
        "config_hash": manifest.config_hash,
        "out": a.out,
    }))
}

fn load_labeled(corpus: &Path) -> Result<Vec<LabeledFrame>, CliError> {
    let sets = read_annotations(&corpus.join(ANNOTATIONS_FILE))?;
    sets.par_iter()
        .map(|s| {
            let path = corpus.join(FRAMES_DIR).join(format!("{}.pgm", s.frame_id));
            let (frame, calib) = load_frame_with_calibration(&path)?;
            s.check_bounds(frame.width, frame.height)?;
            Ok(LabeledFrame {
                frame_id: s.frame_id.clone(),
                field: to_height_field(&frame, &calib),
                annotations: s.points.clone(),
            })
        })
        .collect()
}

pub fn train(mut cfg: AppConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(m) = a.method {
        cfg.training.features.method = m
            .features()
            .ok_or_else(|| CliError::Usage("clustering has nothing to train".into()))?;
    }
    if let Some(e) = a.epochs {
        cfg.training.optimizer.epochs = e;
    }
    if let Some(r) = a.mining_rounds {
        cfg.training.mining_rounds = r;
    }
    finish(&mut cfg)?;
    let mut store = a.store.as_deref().map(DatasetStore::open).transpose()?;
    let (model, report) = if a.from_store {
        run_training(store.as_ref().expect("clap requires --store"), &cfg.training)?
    } else {
        let corpus = a.corpus.as_deref().expect("clap requires --corpus");
        let frames = load_labeled(corpus)?;
        train_from_frames(&frames, &cfg.training, store.as_mut())?
    };
    save_model(&model, &a.out)?;
    done(json!({
        "model": a.out,
        "model_hash": model_hash(&model),
        "method": model.feature_config.method,
        "layer_dims": model.layer_dims(),
        "report": report,
        "store": store.map(|s| s.stats()),
    }))
}

pub fn detect(mut cfg: AppConfig, a: DetectArgs) -> Result<(), CliError> {
    if let Some(t) = a.threshold {
        cfg.detector.threshold = t;
    }
    if let Some(r) = a.nms_radius_px {
        cfg.detector.nms_radius_px = r;
    }
    let model = match a.method.features() {
        Some(m) => Some(load_model_for(a.model.as_deref(), m)?),
        None if a.dump_features.is_some() => {
            return Err(CliError::Usage("--dump-features needs a window classifier method".into()));
        }
        None => None,
    };
    finish(&mut cfg)?;
    let frames = list_frames(&a.frames)?;
    let inference = model.as_ref().map(Mlp::to_inference);
    let sets: Vec<DetectionSet> = frames
        .iter()
        .map(|p| {
            let (frame, calib) = load_frame_with_calibration(p)?;
            match &inference {
                Some(m) => Ok(detector::detect(&frame, &calib, m, &cfg.detector)?),
                None => Ok(DetectionSet {
                    frame_id: frame.frame_id.clone(),
                    detections: detect_clusters(&to_height_field(&frame, &calib), &cfg.cluster)?,
                    method: Some("cluster".into()),
                }),
            }
        })
        .collect::<Result<_, CliError>>()?;
    write_jsonl(&a.out, &sets)?;
    if let (Some(path), Some(model)) = (&a.dump_features, &model) {
        dump_features(path, &frames, model, a.dump_window)?;
    }
    done(json!({
        "frames": sets.len(),
        "detections": sets.iter().map(|s| s.detections.len()).sum::<usize>(),
        "method": a.method.features().map_or("cluster".to_string(), |m| m.to_string()),
        "out": a.out,
    }))
}

fn dump_features(path: &Path, frames: &[PathBuf], model: &Mlp, origin: (usize, usize)) -> Result<(), CliError> {
    let fc = model.feature_config;
    let mut out = Vec::new();
    for p in frames {
        let (frame, calib) = load_frame_with_calibration(p)?;
        let features = FrameFeatures::new(&to_height_field(&frame, &calib), &fc)?;
        let d = features.descriptor(origin)?;
        let center = window_center(&fc, origin);
        out.push(json!({
            "frame_id": frame.frame_id,
            "method": fc.method,
            "window": [origin.0, origin.1],
            "center": [center.0, center.1],
            "descriptor": d.values,
        }));
    }
    write_jsonl(path, &out)?;
    Ok(())
}

fn frame_calibrations(dir: &Path) -> Result<BTreeMap<String, Calibration>, CliError> {
    list_frames(dir)?
        .iter()
        .map(|p| Ok((load_sidecar(p)?.frame_id, load_calibration(p)?)))
        .collect()
}

fn counts_json(c: &BinCounts) -> Value {
    json!({
        "tp": c.tp, "fp": c.fp, "fn": c.fn_,
        "precision": c.precision(), "recall": c.recall(), "fscore": c.fscore(),
    })
}

pub fn eval(mut cfg: AppConfig, a: EvalArgs) -> Result<(), CliError> {
    if let Some(r) = a.match_radius_mm {
        cfg.eval.match_radius_mm = r;
    }
    finish(&mut cfg)?;
    let annotations = read_annotations(&a.annotations)?;
    let calibs = a.frames.as_deref().map(frame_calibrations).transpose()?;
    let calib_of = |id: &str| -> Result<Calibration, CliError> {
        match &calibs {
            None => Ok(cfg.calibration),
            Some(m) => m
                .get(id)
                .copied()
                .ok_or_else(|| CliError::Data(format!("no frame sidecar for {id}"))),
        }
    };
    let mut reports = Vec::new();
    for spec in &a.detections {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (Some(n.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(spec)),
        };
        let sets: Vec<DetectionSet> = read_jsonl(&path)?;
        let name = name
            .or_else(|| sets.first().and_then(|s| s.method.clone()))
            .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "detections".into());
        let mut by_frame: BTreeMap<&str, &DetectionSet> = BTreeMap::new();
        for s in &sets {
            if by_frame.insert(&s.frame_id, s).is_some() {
                return Err(CliError::Data(format!("{}: frame {} listed twice", path.display(), s.frame_id)));
            }
        }
        let mut report = BinReport::empty(&cfg.eval.bin_edges);
        for ann in &annotations {
            let dets = by_frame.remove(ann.frame_id.as_str()).map(DetectionSet::points).unwrap_or_default();
            let (_, r) = evaluate_frame(&dets, &ann.points, &calib_of(&ann.frame_id)?, &cfg.eval);
            report.merge(&r)?;
        }
        for (id, s) in by_frame {
            log::warn!("{name}: frame {id} has no annotations; its detections count as false positives");
            let (_, r) = evaluate_frame(&s.points(), &[], &calib_of(id)?, &cfg.eval);
            report.merge(&r)?;
        }
        reports.push((name, report));
    }
    let plot = a.plot.clone().unwrap_or_else(|| a.csv.with_extension("plot.json"));
    write_report(&a.csv, &plot, &reports, &cfg.eval)?;
    let summary: BTreeMap<&str, Value> = reports.iter().map(|(n, r)| (n.as_str(), counts_json(&r.total()))).collect();
    done(json!({ "csv": a.csv, "plot": plot, "totals": summary }))
}

pub fn bench(mut cfg: AppConfig, a: BenchArgs) -> Result<(), CliError> {
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let model = load_model(&a.model)?;
    finish(&mut cfg)?;
    let (frame, calib) = match &a.frame {
        Some(p) => load_frame_with_calibration(p)?,
        None => (generate_scene(&cfg.synth, cfg.seed)?.frame, cfg.synth.calibration),
    };
    let inference = model.to_inference();
    let time = |threads: usize| -> Result<(f64, usize), CliError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Internal(e.to_string()))?;
        pool.install(|| {
            let n = detector::detect(&frame, &calib, &inference, &cfg.detector)?.detections.len();
            let start = Instant::now();
            for _ in 0..a.reps {
                detector::detect(&frame, &calib, &inference, &cfg.detector)?;
            }
            Ok((a.reps as f64 / start.elapsed().as_secs_f64(), n))
        })
    };
    let threads = rayon::current_num_threads();
    let (single, n) = time(1)?;
    let (multi, _) = time(threads)?;
    done(json!({
        "width": frame.width,
        "height": frame.height,
        "reps": a.reps,
        "detections": n,
        "single_thread_fps": single,
        "multi_thread_fps": multi,
        "threads": threads,
    }))
}

pub fn serve(mut cfg: AppConfig, a: ServeArgs) -> Result<(), CliError> {
    finish(&mut cfg)?;
    std::io::stdout().flush().ok();
    let service = ServiceConfig {
        corpus_dir: a.corpus,
        model_path: a.model,
        store_dir: a.store,
        detector: cfg.detector,
        seed: cfg.seed,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(hahog_service::serve(&service, a.bind, async {
        tokio::signal::ctrl_c().await.ok();
    }))?;
    done(json!({ "stopped": true }))
}
