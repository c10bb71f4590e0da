//! Endpoint NMS over predicted trajectories and the multi-model ensemble with
//! a length-adaptive suppression radius.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::scene::Category;

/// One candidate trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trajectory: Vec<[f64; 2]>,
    pub confidence: f64,
    pub model_id: String,
}

impl Candidate {
    pub fn endpoint(&self) -> [f64; 2] {
        *self.trajectory.last().expect("trajectory has at least one waypoint")
    }
}

/// Candidates for one target agent of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scene_id: String,
    pub agent_id: i64,
    pub entries: Vec<Candidate>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        let t = self.entries.first().map(|e| e.trajectory.len());
        for e in &self.entries {
            if !(e.confidence.is_finite() && e.confidence >= 0.0) {
                return Err(Error::Config(format!(
                    "scene `{}`: confidence {} must be finite and non-negative",
                    self.scene_id, e.confidence
                )));
            }
            if Some(e.trajectory.len()) != t || e.trajectory.is_empty() {
                return Err(Error::Shape(format!(
                    "scene `{}`: trajectories must share a non-zero length",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }

    /// Rescales confidences to sum to one (left alone when they sum to zero).
    pub fn renormalized(mut self) -> Self {
        let sum: f64 = self.entries.iter().map(|e| e.confidence).sum();
        if sum > 0.0 {
            for e in &mut self.entries {
                e.confidence /= sum;
            }
        }
        self
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.entries
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.confidence.total_cmp(&b.confidence).then(j.cmp(i)))
            .map(|(_, e)| e)
    }
}

/// Prediction file record: one target agent, world-frame trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub model_id: String,
    pub agent_id: i64,
    pub category: Category,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub confidences: Vec<f64>,
}

impl PredictionRecord {
    pub fn to_set(&self) -> Result<PredictionSet> {
        if self.trajectories.len() != self.confidences.len() {
            return Err(Error::Shape(format!(
                "scene `{}`: {} trajectories but {} confidences",
                self.scene_id,
                self.trajectories.len(),
                self.confidences.len()
            )));
        }
        let set = PredictionSet {
            scene_id: self.scene_id.clone(),
            agent_id: self.agent_id,
            entries: self
                .trajectories
                .iter()
                .zip(&self.confidences)
                .map(|(t, &c)| Candidate {
                    trajectory: t.clone(),
                    confidence: c,
                    model_id: self.model_id.clone(),
                })
                .collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_set(set: &PredictionSet, model_id: &str, category: Category) -> Self {
        Self {
            scene_id: set.scene_id.clone(),
            model_id: model_id.to_string(),
            agent_id: set.agent_id,
            category,
            trajectories: set.entries.iter().map(|e| e.trajectory.clone()).collect(),
            confidences: set.entries.iter().map(|e| e.confidence).collect(),
        }
    }
}

/// Cumulative arc length of a polyline of waypoints.
pub fn trajectory_length(traj: &[[f64; 2]]) -> f64 {
    traj.windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

pub const ENSEMBLE_DELTA_MIN: f64 = 2.5;
pub const ENSEMBLE_DELTA_MAX: f64 = 3.5;

/// Suppression radius for a pooled ensemble, linear in `length` between
/// 10 m and 50 m and clamped to `[2.5, 3.5]`.
pub fn ensemble_threshold(length: f64) -> f64 {
    let raw = (length - 10.0) / (50.0 - 10.0) * 1.5 + ENSEMBLE_DELTA_MIN;
    raw.max(ENSEMBLE_DELTA_MIN).min(ENSEMBLE_DELTA_MAX)
}

/// Greedy endpoint NMS. Entries within `delta` of a kept endpoint are
/// suppressed; slots left after suppression are filled with the most
/// confident suppressed entries. Output is sorted by confidence, ties by
/// input order.
pub fn nms_trajectories(preds: &PredictionSet, delta: f64, top_k: usize) -> Result<PredictionSet> {
    if preds.entries.is_empty() {
        return Err(Error::Empty("prediction set"));
    }
    if top_k == 0 || !(delta > 0.0) {
        return Err(Error::Config("NMS needs top_k >= 1 and delta > 0".into()));
    }
    let mut order: Vec<usize> = (0..preds.entries.len()).collect();
    order.sort_by(|&a, &b| {
        preds.entries[b]
            .confidence
            .total_cmp(&preds.entries[a].confidence)
            .then(a.cmp(&b))
    });
    let ends: Vec<[f64; 2]> = preds.entries.iter().map(Candidate::endpoint).collect();
    let mut suppressed = vec![false; ends.len()];
    let mut kept: Vec<usize> = Vec::with_capacity(top_k);
    for &i in &order {
        if kept.len() == top_k {
            break;
        }
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if j != i && !suppressed[j] && !kept.contains(&j) {
                let d = (ends[i][0] - ends[j][0]).hypot(ends[i][1] - ends[j][1]);
                if d <= delta {
                    suppressed[j] = true;
                }
            }
        }
    }
    for &i in &order {
        if kept.len() == top_k {
            break;
        }
        if !kept.contains(&i) {
            kept.push(i);
        }
    }
    kept.sort_by(|&a, &b| {
        preds.entries[b]
            .confidence
            .total_cmp(&preds.entries[a].confidence)
            .then(a.cmp(&b))
    });
    Ok(PredictionSet {
        scene_id: preds.scene_id.clone(),
        agent_id: preds.agent_id,
        entries: kept.into_iter().map(|i| preds.entries[i].clone()).collect(),
    })
}

/// Chooses the ensemble suppression radius from the pooled candidates.
pub trait ThresholdPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn delta(&self, pooled: &PredictionSet, config: &EnsembleConfig) -> f64;
}

/// Constant radius, the single-model setting.
pub struct FixedThreshold;

impl ThresholdPolicy for FixedThreshold {
    fn name(&self) -> &'static str {
        "fixed"
    }
    fn delta(&self, _: &PredictionSet, config: &EnsembleConfig) -> f64 {
        config.single_model_delta
    }
}

/// Length-adaptive radius using the arc length of the most confident entry.
pub struct AdaptiveArcLength;

impl ThresholdPolicy for AdaptiveArcLength {
    fn name(&self) -> &'static str {
        "adaptive-arc"
    }
    fn delta(&self, pooled: &PredictionSet, _: &EnsembleConfig) -> f64 {
        ensemble_threshold(pooled.best().map_or(0.0, |b| trajectory_length(&b.trajectory)))
    }
}

/// Length-adaptive radius using the straight-line displacement of the most
/// confident entry.
pub struct AdaptiveDisplacement;

impl ThresholdPolicy for AdaptiveDisplacement {
    fn name(&self) -> &'static str {
        "adaptive-displacement"
    }
    fn delta(&self, pooled: &PredictionSet, _: &EnsembleConfig) -> f64 {
        let length = pooled.best().map_or(0.0, |b| {
            let s = b.trajectory[0];
            let e = b.endpoint();
            (e[0] - s[0]).hypot(e[1] - s[1])
        });
        ensemble_threshold(length)
    }
}

pub fn threshold_policies() -> Registry<dyn ThresholdPolicy> {
    let mut r: Registry<dyn ThresholdPolicy> = Registry::new("threshold policy");
    let policies: [Arc<dyn ThresholdPolicy>; 3] = [
        Arc::new(FixedThreshold),
        Arc::new(AdaptiveArcLength),
        Arc::new(AdaptiveDisplacement),
    ];
    for p in policies {
        r.register(p.name(), p);
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub top_k: usize,
    pub single_model_delta: f64,
    /// Rescale each model's confidences to sum to one before pooling.
    pub renormalize: bool,
    pub threshold_policy: String,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            top_k: 6,
            single_model_delta: 2.5,
            renormalize: true,
            threshold_policy: "adaptive-arc".into(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || !(self.single_model_delta > 0.0) {
            return Err(Error::Config("top_k must be >= 1 and single_model_delta > 0".into()));
        }
        threshold_policies().get(&self.threshold_policy)?;
        Ok(())
    }
}

/// Pools every model's candidates for one agent and re-selects `top_k` of
/// them by NMS; final confidences sum to one.
pub fn ensemble_combine(outputs: &[PredictionSet], config: &EnsembleConfig) -> Result<PredictionSet> {
    config.validate()?;
    let first = outputs.first().ok_or(Error::Empty("ensemble inputs"))?;
    let mut pooled = PredictionSet {
        scene_id: first.scene_id.clone(),
        agent_id: first.agent_id,
        entries: Vec::new(),
    };
    for set in outputs {
        if set.scene_id != first.scene_id || set.agent_id != first.agent_id {
            return Err(Error::SceneMismatch {
                expected: format!("{}#{}", first.scene_id, first.agent_id),
                found: format!("{}#{}", set.scene_id, set.agent_id),
            });
        }
        set.validate()?;
        let set = if config.renormalize {
            set.clone().renormalized()
        } else {
            set.clone()
        };
        pooled.entries.extend(set.entries);
    }
    let policy = threshold_policies().get(&config.threshold_policy)?;
    let delta = policy.delta(&pooled, config);
    Ok(nms_trajectories(&pooled, delta, config.top_k)?.renormalized())
}
