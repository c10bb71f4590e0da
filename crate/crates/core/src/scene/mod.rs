//! Scene data model: agent tracks, map polylines, and their agent-centric,
//! fixed-shape vectorized form.

mod dataset;
mod generator;
mod normalize;
mod vectorize;

pub use dataset::{load_dataset, read_jsonl, save_dataset, write_jsonl};
pub use generator::{
    generate_labeled_scene, generate_synthetic_scene, scene_families, GeneratorSpec,
    LabeledScene, Path, RoadLayout, SceneFamily, Segment,
};
pub use normalize::{agent_frame, normalize_to_agent, wrap_angle, Frame};
pub use vectorize::{
    prepare_agent, vectorize, vectorize_for, VectorizeConfig, VectorizedScene, AGENT_CHANNELS, MAP_CHANNELS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Vehicle, Category::Pedestrian, Category::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Vehicle => "Vehicle",
            Category::Pedestrian => "Pedestrian",
            Category::Cyclist => "Cyclist",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneType {
    Lane,
    Edge,
    Crosswalk,
}

impl LaneType {
    pub const ALL: [LaneType; 3] = [LaneType::Lane, LaneType::Edge, LaneType::Crosswalk];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One timestep of an agent track. Invalid steps carry all-zero numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

impl AgentState {
    pub const INVALID: AgentState = AgentState {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        vx: 0.0,
        vy: 0.0,
        valid: false,
    };

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Past, current and future states of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: i64,
    pub category: Category,
    pub states: Vec<AgentState>,
    pub is_interest: bool,
}

impl AgentTrack {
    /// Future states (everything after `current_index`).
    pub fn future(&self, current_index: usize) -> &[AgentState] {
        &self.states[current_index + 1..]
    }

    pub fn history(&self, current_index: usize) -> &[AgentState] {
        &self.states[..=current_index]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub x: f64,
    pub y: f64,
    pub dir_x: f64,
    pub dir_y: f64,
}

/// A map element as an ordered point sequence. Raw polylines may be longer
/// than the vectorizer's point budget; they are chunked on vectorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub polyline_id: i64,
    pub lane_type: LaneType,
    pub points: Vec<MapPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub current_index: usize,
    pub agents: Vec<AgentTrack>,
    pub polylines: Vec<MapPolyline>,
}

impl Scene {
    /// Number of past steps `H` (the current step is index `H`).
    pub fn history_len(&self) -> usize {
        self.current_index
    }

    /// Number of future steps `T`, taken from the first agent.
    pub fn future_len(&self) -> usize {
        self.agents
            .first()
            .map(|a| a.states.len().saturating_sub(self.current_index + 1))
            .unwrap_or(0)
    }

    pub fn agent(&self, agent_id: i64) -> Result<&AgentTrack> {
        self.agents
            .iter()
            .find(|a| a.agent_id == agent_id)
            .ok_or(Error::UnknownAgent(agent_id))
    }

    pub fn interest_agents(&self) -> impl Iterator<Item = &AgentTrack> {
        self.agents.iter().filter(|a| a.is_interest)
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidScene {
            scene: self.scene_id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(self.invalid("no agents"));
        }
        if !self.agents.iter().any(|a| a.is_interest) {
            return Err(self.invalid("no interest agent"));
        }
        let len = self.agents[0].states.len();
        if len < self.current_index + 2 {
            return Err(self.invalid("tracks have no future steps"));
        }
        for agent in &self.agents {
            if agent.states.len() != len {
                return Err(self.invalid(format!(
                    "agent {} has {} states, expected {len}",
                    agent.agent_id,
                    agent.states.len()
                )));
            }
            for (t, s) in agent.states.iter().enumerate() {
                let numbers = [s.x, s.y, s.heading, s.vx, s.vy];
                if s.valid {
                    if numbers.iter().any(|v| !v.is_finite()) {
                        return Err(self.invalid(format!(
                            "agent {} step {t} is not finite",
                            agent.agent_id
                        )));
                    }
                    if !(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI)
                    {
                        return Err(self.invalid(format!(
                            "agent {} step {t} heading {} outside (-pi, pi]",
                            agent.agent_id, s.heading
                        )));
                    }
                } else if numbers.iter().any(|&v| v != 0.0) {
                    return Err(self.invalid(format!(
                        "agent {} step {t} is invalid but not zeroed",
                        agent.agent_id
                    )));
                }
            }
        }
        for poly in &self.polylines {
            if poly.points.len() < 2 {
                return Err(self.invalid(format!(
                    "polyline {} has fewer than 2 points",
                    poly.polyline_id
                )));
            }
            for p in &poly.points {
                let norm = p.dir_x.hypot(p.dir_y);
                if !p.x.is_finite() || !p.y.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(self.invalid(format!(
                        "polyline {} has a non-finite point or non-unit direction",
                        poly.polyline_id
                    )));
                }
            }
        }
        Ok(())
    }
}
