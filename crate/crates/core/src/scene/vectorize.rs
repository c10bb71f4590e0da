//! Fixed-shape polyline vectorization of a normalized scene.
//!
//! Agent channel layout (per history step), `AGENT_CHANNELS = 11`:
//! `x, y, sin(heading), cos(heading), vx, vy, is_vehicle, is_pedestrian,
//! is_cyclist, t / H, valid`.
//!
//! Map channel layout (per point), `MAP_CHANNELS = 8`:
//! `x, y, dir_x, dir_y, is_lane, is_edge, is_crosswalk, valid`.
//!
//! Masked entries are exactly zero in every channel.

use serde::{Deserialize, Serialize};

use super::{normalize::Frame, Category, Scene};
use crate::error::{Error, Result};

pub const AGENT_CHANNELS: usize = 11;
pub const MAP_CHANNELS: usize = 8;

const CENTER_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorizeConfig {
    /// Point budget per map entry; longer polylines are chunked.
    pub max_points_per_polyline: usize,
    /// Keep at most this many agents (nearest to the target first).
    pub max_agents: Option<usize>,
    /// Keep at most this many map entries (nearest center first).
    pub max_polylines: Option<usize>,
}

impl Default for VectorizeConfig {
    fn default() -> Self {
        Self {
            max_points_per_polyline: 20,
            max_agents: None,
            max_polylines: None,
        }
    }
}

/// A scene as dense arrays, centered on the target agent (row 0).
///
/// Arrays are stored row-major:
/// `agent_features[N_a][H+1][AGENT_CHANNELS]`,
/// `map_features[N_m][P_max][MAP_CHANNELS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorizedScene {
    pub scene_id: String,
    pub target_id: i64,
    pub category: Category,
    pub num_agents: usize,
    pub history_steps: usize,
    pub num_polylines: usize,
    pub max_points: usize,
    pub agent_features: Vec<f64>,
    pub agent_step_mask: Vec<bool>,
    pub agent_mask: Vec<bool>,
    pub agent_positions: Vec<[f64; 2]>,
    pub map_features: Vec<f64>,
    pub map_point_mask: Vec<bool>,
    pub map_mask: Vec<bool>,
    pub polyline_centers: Vec<[f64; 2]>,
    pub gt_future: Vec<[f64; 2]>,
    pub gt_valid: Vec<bool>,
    pub frame: Frame,
}

impl VectorizedScene {
    pub fn agent_step(&self, agent: usize, step: usize) -> &[f64] {
        let off = (agent * self.history_steps + step) * AGENT_CHANNELS;
        &self.agent_features[off..off + AGENT_CHANNELS]
    }

    pub fn map_point(&self, polyline: usize, point: usize) -> &[f64] {
        let off = (polyline * self.max_points + point) * MAP_CHANNELS;
        &self.map_features[off..off + MAP_CHANNELS]
    }

    pub fn future_len(&self) -> usize {
        self.gt_future.len()
    }

    /// The last valid ground-truth waypoint.
    pub fn gt_endpoint(&self) -> Option<[f64; 2]> {
        self.gt_future
            .iter()
            .zip(&self.gt_valid)
            .rev()
            .find(|(_, &v)| v)
            .map(|(p, _)| *p)
    }
}

/// Vectorizes a normalized scene for its first interest agent.
pub fn vectorize(scene: &Scene, config: &VectorizeConfig) -> Result<VectorizedScene> {
    let target = scene
        .interest_agents()
        .next()
        .ok_or_else(|| Error::Vectorize {
            scene: scene.scene_id.clone(),
            reason: "no interest agent".into(),
        })?;
    vectorize_for(scene, target.agent_id, config)
}

/// Vectorizes a scene already normalized to `target_id`.
pub fn vectorize_for(
    scene: &Scene,
    target_id: i64,
    config: &VectorizeConfig,
) -> Result<VectorizedScene> {
    let fail = |reason: String| Error::Vectorize {
        scene: scene.scene_id.clone(),
        reason,
    };
    if config.max_points_per_polyline == 0 {
        return Err(fail("max_points_per_polyline must be positive".into()));
    }
    let h = scene.current_index;
    let steps = h + 1;
    let target = scene.agent(target_id)?;
    let now = target.states[h];
    if !now.valid {
        return Err(Error::InvalidCurrentState(target_id));
    }
    if now.x.abs() > CENTER_TOLERANCE || now.y.abs() > CENTER_TOLERANCE || now.heading.abs() > CENTER_TOLERANCE {
        return Err(fail(format!(
            "scene is not normalized to agent {target_id}"
        )));
    }

    // Agents with at least one valid history step; target first.
    let mut agents: Vec<(&super::AgentTrack, [f64; 2])> = Vec::new();
    for agent in std::iter::once(target).chain(scene.agents.iter().filter(|a| a.agent_id != target_id)) {
        let last_valid = agent.history(h).iter().rev().find(|s| s.valid);
        if let Some(s) = last_valid {
            agents.push((agent, [s.x, s.y]));
        }
    }
    if let Some(cap) = config.max_agents {
        let cap = cap.max(1);
        let mut rest = agents.split_off(1);
        rest.sort_by(|a, b| norm(a.1).total_cmp(&norm(b.1)));
        rest.truncate(cap - 1);
        agents.extend(rest);
    }

    let n_a = agents.len();
    let mut agent_features = vec![0.0; n_a * steps * AGENT_CHANNELS];
    let mut agent_step_mask = vec![false; n_a * steps];
    let time_scale = h.max(1) as f64;
    for (i, (agent, _)) in agents.iter().enumerate() {
        for (t, s) in agent.history(h).iter().enumerate() {
            if !s.valid {
                continue;
            }
            agent_step_mask[i * steps + t] = true;
            let f = &mut agent_features[(i * steps + t) * AGENT_CHANNELS..][..AGENT_CHANNELS];
            f[0] = s.x;
            f[1] = s.y;
            f[2] = s.heading.sin();
            f[3] = s.heading.cos();
            f[4] = s.vx;
            f[5] = s.vy;
            f[6 + agent.category.index()] = 1.0;
            f[9] = t as f64 / time_scale;
            f[10] = 1.0;
        }
    }

    // Map chunks.
    let p_max = config.max_points_per_polyline;
    let mut chunks: Vec<(&super::MapPolyline, &[super::MapPoint])> = Vec::new();
    for poly in &scene.polylines {
        for chunk in poly.points.chunks(p_max) {
            chunks.push((poly, chunk));
        }
    }
    if chunks.is_empty() {
        return Err(fail("no valid polylines".into()));
    }
    let center = |pts: &[super::MapPoint]| {
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
        [sx / n, sy / n]
    };
    if let Some(cap) = config.max_polylines {
        let mut indexed: Vec<(usize, f64)> = chunks
            .iter()
            .enumerate()
            .map(|(i, (_, pts))| (i, norm(center(pts))))
            .collect();
        indexed.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        indexed.truncate(cap.max(1));
        indexed.sort_by_key(|&(i, _)| i);
        chunks = indexed.into_iter().map(|(i, _)| chunks[i]).collect();
    }

    let n_m = chunks.len();
    let mut map_features = vec![0.0; n_m * p_max * MAP_CHANNELS];
    let mut map_point_mask = vec![false; n_m * p_max];
    let mut polyline_centers = Vec::with_capacity(n_m);
    for (j, (poly, pts)) in chunks.iter().enumerate() {
        for (k, p) in pts.iter().enumerate() {
            map_point_mask[j * p_max + k] = true;
            let f = &mut map_features[(j * p_max + k) * MAP_CHANNELS..][..MAP_CHANNELS];
            f[0] = p.x;
            f[1] = p.y;
            f[2] = p.dir_x;
            f[3] = p.dir_y;
            f[4 + poly.lane_type.index()] = 1.0;
            f[7] = 1.0;
        }
        polyline_centers.push(center(pts));
    }

    let future = target.future(h);
    Ok(VectorizedScene {
        scene_id: scene.scene_id.clone(),
        target_id,
        category: target.category,
        num_agents: n_a,
        history_steps: steps,
        num_polylines: n_m,
        max_points: p_max,
        agent_features,
        agent_step_mask,
        agent_mask: vec![true; n_a],
        agent_positions: agents.iter().map(|(_, p)| *p).collect(),
        map_features,
        map_point_mask,
        map_mask: vec![true; n_m],
        polyline_centers,
        gt_future: future.iter().map(|s| [s.x, s.y]).collect(),
        gt_valid: future.iter().map(|s| s.valid).collect(),
        frame: Frame::IDENTITY,
    })
}

/// Normalizes a raw scene to `agent_id` and vectorizes it, recording the
/// applied frame so predictions can be mapped back to world coordinates.
pub fn prepare_agent(
    scene: &Scene,
    agent_id: i64,
    config: &VectorizeConfig,
) -> Result<VectorizedScene> {
    let frame = super::normalize::agent_frame(scene, agent_id)?;
    let mut vs = vectorize_for(&frame.apply(scene), agent_id, config)?;
    vs.frame = frame;
    Ok(vs)
}

fn norm(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}
