//! Training/inference samples and padded batches.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::intention::{assign_positive_mode, IntentionTable};
use crate::nn::{mask_tensor, to_f32_tensor};
use crate::scene::{prepare_agent, Scene, VectorizeConfig, VectorizedScene, AGENT_CHANNELS, MAP_CHANNELS};

/// One interest agent ready for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub vectorized: VectorizedScene,
    /// Intention points of the agent's category (agent-centric).
    pub intentions: Vec<[f64; 2]>,
    /// Hard-assigned positive mode, when the future has a valid step.
    pub positive: Option<usize>,
}

impl Sample {
    pub fn new(
        scene: &Scene,
        agent_id: i64,
        table: &IntentionTable,
        config: &VectorizeConfig,
    ) -> Result<Self> {
        let vectorized = prepare_agent(scene, agent_id, config)?;
        let set = table.get(vectorized.category)?;
        let positive = vectorized
            .gt_endpoint()
            .map(|end| assign_positive_mode(set, end));
        Ok(Self {
            vectorized,
            intentions: set.points.clone(),
            positive,
        })
    }

    /// Samples for every interest agent with a valid current state.
    pub fn from_scenes(
        scenes: &[Scene],
        table: &IntentionTable,
        config: &VectorizeConfig,
    ) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for scene in scenes {
            for agent in scene.interest_agents() {
                if agent.states[scene.current_index].valid {
                    out.push(Sample::new(scene, agent.agent_id, table, config)?);
                }
            }
        }
        Ok(out)
    }
}

/// A padded batch. Tensor shapes use `B` samples, `N_a`/`N_m` padded
/// agent/map counts, `S = H + 1` history steps, `P` points per polyline.
#[derive(Clone, Debug)]
pub struct Batch {
    pub agent_features: Tensor,
    pub agent_step_mask: Tensor,
    pub agent_mask: Tensor,
    pub agent_positions: Tensor,
    pub map_features: Tensor,
    pub map_point_mask: Tensor,
    pub map_mask: Tensor,
    pub map_positions: Tensor,
    /// `[B, K, 2]`.
    pub intention_points: Tensor,
    /// `[B, T, 2]` and `[B, T]`.
    pub gt_future: Tensor,
    pub gt_mask: Tensor,
    /// `[B, K]` one-hot of the positive mode (all zero when unknown).
    pub positive_onehot: Tensor,
    pub host: HostBatch,
}

/// Host-side copies used by non-differentiable steps (map collection).
#[derive(Clone, Debug)]
pub struct HostBatch {
    pub map_centers: Vec<Vec<[f64; 2]>>,
    pub map_mask: Vec<Vec<bool>>,
    pub intentions: Vec<Vec<[f64; 2]>>,
    pub positives: Vec<Option<usize>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.host.intentions.len()
    }

    pub fn new(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("batch"))?;
        let steps = first.vectorized.history_steps;
        let p = first.vectorized.max_points;
        let t = first.vectorized.future_len();
        let k = first.intentions.len();
        for s in samples {
            let v = &s.vectorized;
            if v.history_steps != steps || v.max_points != p || v.future_len() != t || s.intentions.len() != k {
                return Err(Error::Shape(format!(
                    "sample `{}` disagrees with the batch layout",
                    v.scene_id
                )));
            }
        }
        let b = samples.len();
        let n_a = samples.iter().map(|s| s.vectorized.num_agents).max().unwrap_or(1);
        let n_m = samples.iter().map(|s| s.vectorized.num_polylines).max().unwrap_or(1);

        let mut af = vec![0.0; b * n_a * steps * AGENT_CHANNELS];
        let mut asm = vec![false; b * n_a * steps];
        let mut am = vec![false; b * n_a];
        let mut ap = vec![0.0; b * n_a * 2];
        let mut mf = vec![0.0; b * n_m * p * MAP_CHANNELS];
        let mut mpm = vec![false; b * n_m * p];
        let mut mm = vec![false; b * n_m];
        let mut mp = vec![0.0; b * n_m * 2];
        let mut ip = vec![0.0; b * k * 2];
        let mut gt = vec![0.0; b * t * 2];
        let mut gm = vec![false; b * t];
        let mut pos = vec![0.0; b * k];
        let mut host = HostBatch {
            map_centers: Vec::with_capacity(b),
            map_mask: Vec::with_capacity(b),
            intentions: Vec::with_capacity(b),
            positives: Vec::with_capacity(b),
        };
        for (i, s) in samples.iter().enumerate() {
            let v = &s.vectorized;
            let row = steps * AGENT_CHANNELS;
            for a in 0..v.num_agents {
                let dst = (i * n_a + a) * row;
                af[dst..dst + row].copy_from_slice(&v.agent_features[a * row..(a + 1) * row]);
                let dst = (i * n_a + a) * steps;
                asm[dst..dst + steps].copy_from_slice(&v.agent_step_mask[a * steps..(a + 1) * steps]);
                am[i * n_a + a] = v.agent_mask[a];
                ap[(i * n_a + a) * 2] = v.agent_positions[a][0];
                ap[(i * n_a + a) * 2 + 1] = v.agent_positions[a][1];
            }
            let row = p * MAP_CHANNELS;
            for m in 0..v.num_polylines {
                let dst = (i * n_m + m) * row;
                mf[dst..dst + row].copy_from_slice(&v.map_features[m * row..(m + 1) * row]);
                let dst = (i * n_m + m) * p;
                mpm[dst..dst + p].copy_from_slice(&v.map_point_mask[m * p..(m + 1) * p]);
                mm[i * n_m + m] = v.map_mask[m];
                mp[(i * n_m + m) * 2] = v.polyline_centers[m][0];
                mp[(i * n_m + m) * 2 + 1] = v.polyline_centers[m][1];
            }
            for (j, pt) in s.intentions.iter().enumerate() {
                ip[(i * k + j) * 2] = pt[0];
                ip[(i * k + j) * 2 + 1] = pt[1];
            }
            for (j, (g, &valid)) in v.gt_future.iter().zip(&v.gt_valid).enumerate() {
                gt[(i * t + j) * 2] = g[0];
                gt[(i * t + j) * 2 + 1] = g[1];
                gm[i * t + j] = valid;
            }
            if let Some(positive) = s.positive {
                pos[i * k + positive] = 1.0;
            }
            let mut centers = v.polyline_centers.clone();
            let mut mask = v.map_mask.clone();
            centers.resize(n_m, [0.0, 0.0]);
            mask.resize(n_m, false);
            host.map_centers.push(centers);
            host.map_mask.push(mask);
            host.intentions.push(s.intentions.clone());
            host.positives.push(s.positive);
        }
        Ok(Self {
            agent_features: to_f32_tensor(&af, &[b, n_a, steps, AGENT_CHANNELS])?,
            agent_step_mask: mask_tensor(&asm, &[b, n_a, steps])?,
            agent_mask: mask_tensor(&am, &[b, n_a])?,
            agent_positions: to_f32_tensor(&ap, &[b, n_a, 2])?,
            map_features: to_f32_tensor(&mf, &[b, n_m, p, MAP_CHANNELS])?,
            map_point_mask: mask_tensor(&mpm, &[b, n_m, p])?,
            map_mask: mask_tensor(&mm, &[b, n_m])?,
            map_positions: to_f32_tensor(&mp, &[b, n_m, 2])?,
            intention_points: to_f32_tensor(&ip, &[b, k, 2])?,
            gt_future: to_f32_tensor(&gt, &[b, t, 2])?,
            gt_mask: mask_tensor(&gm, &[b, t])?,
            positive_onehot: to_f32_tensor(&pos, &[b, k])?,
            host,
        })
    }
}
