//! Training loop, inference, evaluation and ensembling over files.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainState};
pub use config::{lr_schedule, PathsConfig, Profile, TrainConfig};
pub use optim::{AdamW, AdamWConfig};

use crate::batch::{Batch, Sample};
use crate::error::{Error, Result};
use crate::intention::IntentionTable;
use crate::metrics::{MetricReport, SceneResult};
use crate::model::MotionTransformer;
use crate::nn::Ctx;
use crate::objective::batch_loss;
use crate::scene::{load_dataset, read_jsonl, write_jsonl, Scene};
use crate::selection::{
    ensemble_combine, nms_trajectories, Candidate, EnsembleConfig, PredictionRecord, PredictionSet,
};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// One training-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub per_layer_nll: Vec<f64>,
    pub per_layer_cls: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps: Vec<StepLog>,
    pub best_val_min_ade: Option<f64>,
}

/// Stable 64-bit FNV-1a, used to split scenes by id.
fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// True when `scene_id` falls in the held-out fraction.
pub fn is_validation(scene_id: &str, val_fraction: f64) -> bool {
    (fnv1a(scene_id) % 1_000_000) as f64 / 1_000_000.0 < val_fraction
}

fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03)
        ^ index
}

/// Sample visiting order for one epoch, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, 1, epoch as u64)));
    order
}

fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: cfg.weight_decay,
        clip_norm: Some(cfg.grad_clip),
        ..AdamWConfig::default()
    }
}

/// Trains from the configured files, resuming from `resume` when given.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenes = load_dataset(&cfg.paths.train_data)?;
    let table = IntentionTable::load(&cfg.paths.intentions)?;
    train_on(cfg, &scenes, &table, resume)
}

/// Trains on in-memory scenes. Checkpoints and the step log go to
/// `cfg.paths.output_dir`.
pub fn train_on(
    cfg: &TrainConfig,
    scenes: &[Scene],
    table: &IntentionTable,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if table.k()? != cfg.model.num_modes {
        return Err(Error::Config(format!(
            "intention points have K = {}, model expects {}",
            table.k()?,
            cfg.model.num_modes
        )));
    }
    let (val_scenes, train_scenes): (Vec<Scene>, Vec<Scene>) = scenes
        .iter()
        .cloned()
        .partition(|s| is_validation(&s.scene_id, cfg.val_fraction));
    let train_samples: Vec<Sample> = Sample::from_scenes(&train_scenes, table, &cfg.vectorize)?
        .into_iter()
        .filter(|s| s.positive.is_some())
        .collect();
    let val_samples: Vec<Sample> = Sample::from_scenes(&val_scenes, table, &cfg.vectorize)?
        .into_iter()
        .filter(|s| s.positive.is_some())
        .collect();
    if train_samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }

    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir)?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let log_path = out_dir.join(TRAIN_LOG);

    let (model, mut opt, mut state) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model != cfg.model {
                return Err(Error::Config(
                    "checkpoint model config differs from the training config".into(),
                ));
            }
            let model = ckpt.build_model()?;
            let opt = match ckpt.restore_optimizer(adamw_config(cfg)) {
                Some(o) => o,
                None => AdamW::new(adamw_config(cfg), &model.params)?,
            };
            let state = ckpt.train.clone().ok_or_else(|| {
                Error::Checkpoint("checkpoint has no training state to resume".into())
            })?;
            (model, opt, state)
        }
        None => {
            let model = MotionTransformer::new(&cfg.model, cfg.seed)?;
            let opt = AdamW::new(adamw_config(cfg), &model.params)?;
            let state = TrainState {
                epochs_done: 0,
                global_step: 0,
                optimizer_step: 0,
                best_val_min_ade: None,
            };
            (model, opt, state)
        }
    };

    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(&log_path)?,
    );
    let mut steps = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(train_samples.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let batch = Batch::new(&refs)?;
            let ctx = Ctx::train(stream_seed(cfg.seed, 2, state.global_step));
            let out = model.forward(&batch, &ctx)?;
            let (loss, breakdown) = batch_loss(&out.layers, &batch, cfg.lambda_cls)?;
            let grads = loss.backward()?;
            let grad_norm = opt.update(&model.params, &grads, lr)?;
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient norm".into(),
                    layer: cfg.model.n_dec_layers - 1,
                });
            }
            let record = StepLog {
                step: state.global_step,
                epoch,
                lr,
                total: breakdown.total,
                per_layer_nll: breakdown.per_layer_nll,
                per_layer_cls: breakdown.per_layer_cls,
                grad_norm,
            };
            serde_json::to_writer(&mut log, &record).map_err(std::io::Error::from)?;
            log.write_all(b"\n")?;
            steps.push(record);
            state.global_step += 1;
        }
        log.flush()?;
        state.epochs_done = epoch + 1;
        state.optimizer_step = opt.step;

        let val = if val_samples.is_empty() {
            None
        } else {
            let raw = infer(&model, &val_samples, cfg.batch_size)?;
            let ades = raw
                .iter()
                .zip(&val_samples)
                .map(|(r, s)| {
                    let top = select_top(r, s, &EnsembleConfig::default())?;
                    let trajs: Vec<Vec<[f64; 2]>> =
                        top.entries.iter().map(|e| e.trajectory.clone()).collect();
                    crate::metrics::min_ade(&trajs, &s.vectorized.gt_future, &s.vectorized.gt_valid)
                })
                .collect::<Result<Vec<f64>>>()?;
            Some(ades.iter().sum::<f64>() / ades.len() as f64)
        };
        let improved = match (val, state.best_val_min_ade) {
            (Some(v), Some(best)) => v < best,
            (Some(_), None) => true,
            // Without a validation split the latest weights count as best.
            (None, _) => true,
        };
        if improved {
            if val.is_some() {
                state.best_val_min_ade = val;
            }
            Checkpoint::capture(&model, &cfg.vectorize, table, Some(state.clone()), None)?
                .save(&best_path)?;
        }
        Checkpoint::capture(&model, &cfg.vectorize, table, Some(state.clone()), Some(&opt))?
            .save(&last_path)?;
    }
    if !best_path.exists() {
        Checkpoint::capture(&model, &cfg.vectorize, table, Some(state.clone()), None)?
            .save(&best_path)?;
    }
    Ok(TrainOutcome {
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        log_path,
        steps,
        best_val_min_ade: state.best_val_min_ade,
    })
}

/// Raw model output for one sample, agent-centric.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    /// Per decoder layer, `K` trajectories of `T` points.
    pub layers: Vec<Vec<Vec<[f64; 2]>>>,
    /// Final-layer mode probabilities.
    pub probs: Vec<f64>,
}

/// Evaluation-mode forward over `samples` in input order.
pub fn infer(model: &MotionTransformer, samples: &[Sample], batch_size: usize) -> Result<Vec<RawPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    let ctx = Ctx::eval();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let pred = model.forward(&batch, &ctx)?;
        let per_layer = pred
            .layers
            .iter()
            .map(|l| l.trajectories_host())
            .collect::<Result<Vec<_>>>()?;
        let probs = pred.last().probs_host()?;
        for (i, p) in probs.into_iter().enumerate() {
            out.push(RawPrediction {
                layers: per_layer.iter().map(|l| l[i].clone()).collect(),
                probs: p,
            });
        }
    }
    Ok(out)
}

/// Final-layer NMS selection in the agent frame, confidences summing to one.
pub fn select_top(raw: &RawPrediction, sample: &Sample, config: &EnsembleConfig) -> Result<PredictionSet> {
    let last = raw.layers.last().ok_or(Error::Empty("decoder layers"))?;
    let set = PredictionSet {
        scene_id: sample.vectorized.scene_id.clone(),
        agent_id: sample.vectorized.target_id,
        entries: last
            .iter()
            .zip(&raw.probs)
            .map(|(t, &p)| Candidate {
                trajectory: t.clone(),
                confidence: p,
                model_id: String::new(),
            })
            .collect(),
    };
    Ok(nms_trajectories(&set, config.single_model_delta, config.top_k)?.renormalized())
}

/// Top-k world-frame predictions for every interest agent of `scenes`.
pub fn predict_scenes(
    model: &MotionTransformer,
    table: &IntentionTable,
    vectorize: &crate::scene::VectorizeConfig,
    scenes: &[Scene],
    model_id: &str,
    config: &EnsembleConfig,
) -> Result<Vec<PredictionRecord>> {
    let samples = Sample::from_scenes(scenes, table, vectorize)?;
    let raw = infer(model, &samples, 16)?;
    raw.iter()
        .zip(&samples)
        .map(|(r, s)| {
            let mut set = select_top(r, s, config)?;
            let frame = s.vectorized.frame;
            for e in &mut set.entries {
                for p in &mut e.trajectory {
                    *p = frame.to_world(p[0], p[1]);
                }
            }
            Ok(PredictionRecord::from_set(&set, model_id, s.vectorized.category))
        })
        .collect()
}

/// Loads a checkpoint, predicts every interest agent of the dataset, and
/// writes the prediction file.
pub fn predict(
    checkpoint: &Path,
    dataset: &Path,
    out_path: &Path,
    model_id: &str,
) -> Result<Vec<PredictionRecord>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.build_model()?;
    let table = ckpt.intention_table()?;
    let scenes = load_dataset(dataset)?;
    let records = predict_scenes(
        &model,
        &table,
        &ckpt.vectorize,
        &scenes,
        model_id,
        &EnsembleConfig::default(),
    )?;
    write_jsonl(&records, out_path)?;
    Ok(records)
}

/// Pairs prediction records with world-frame ground truth. Agents without a
/// valid future step are skipped.
pub fn scene_results(scenes: &[Scene], records: &[PredictionRecord]) -> Result<Vec<SceneResult>> {
    let index: BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let scene = index.get(r.scene_id.as_str()).ok_or_else(|| Error::SceneMismatch {
            expected: "a scene present in the dataset".into(),
            found: r.scene_id.clone(),
        })?;
        let agent = scene.agent(r.agent_id)?;
        let future = agent.future(scene.current_index);
        if !future.iter().any(|s| s.valid) {
            continue;
        }
        out.push(SceneResult {
            category: agent.category,
            trajectories: r.trajectories.clone(),
            confidences: r.confidences.clone(),
            gt: future.iter().map(|s| s.position()).collect(),
            gt_valid: future.iter().map(|s| s.valid).collect(),
        });
    }
    Ok(out)
}

pub fn evaluate(scenes: &[Scene], records: &[PredictionRecord], threshold: f64) -> Result<MetricReport> {
    MetricReport::compute(&scene_results(scenes, records)?, threshold)
}

/// Combines prediction files agent by agent, in the order of the first file.
pub fn ensemble_records(
    inputs: &[Vec<PredictionRecord>],
    config: &EnsembleConfig,
    model_id: &str,
) -> Result<Vec<PredictionRecord>> {
    let first = inputs.first().ok_or(Error::Empty("ensemble inputs"))?;
    let mut lookup: Vec<BTreeMap<(String, i64), &PredictionRecord>> = Vec::new();
    for file in inputs {
        lookup.push(file.iter().map(|r| ((r.scene_id.clone(), r.agent_id), r)).collect());
    }
    first
        .iter()
        .map(|r| {
            let key = (r.scene_id.clone(), r.agent_id);
            let sets = lookup
                .iter()
                .map(|m| {
                    m.get(&key)
                        .ok_or_else(|| Error::SceneMismatch {
                            expected: format!("{}#{}", key.0, key.1),
                            found: "no matching record".into(),
                        })
                        .and_then(|rec| rec.to_set())
                })
                .collect::<Result<Vec<_>>>()?;
            let combined = ensemble_combine(&sets, config)?;
            Ok(PredictionRecord::from_set(&combined, model_id, r.category))
        })
        .collect()
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}
