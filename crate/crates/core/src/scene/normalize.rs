use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{AgentState, MapPoint, Scene};
use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// The rigid transform mapping world coordinates into the frame of an agent:
/// origin at the agent's current position, x axis along its current heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin_x: f64,
    pub origin_y: f64,
    pub rotation: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        origin_x: 0.0,
        origin_y: 0.0,
        rotation: 0.0,
    };

    pub fn to_local(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.origin_x, y - self.origin_y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [c * x - s * y + self.origin_x, s * x + c * y + self.origin_y]
    }

    pub fn rotate_to_local(&self, vx: f64, vy: f64) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [c * vx + s * vy, -s * vx + c * vy]
    }

    fn state_to_local(&self, st: &AgentState) -> AgentState {
        if !st.valid {
            return AgentState::INVALID;
        }
        let [x, y] = self.to_local(st.x, st.y);
        let [vx, vy] = self.rotate_to_local(st.vx, st.vy);
        AgentState {
            x,
            y,
            heading: wrap_angle(st.heading - self.rotation),
            vx,
            vy,
            valid: true,
        }
    }

    fn point_to_local(&self, p: &MapPoint) -> MapPoint {
        let [x, y] = self.to_local(p.x, p.y);
        let [dir_x, dir_y] = self.rotate_to_local(p.dir_x, p.dir_y);
        MapPoint { x, y, dir_x, dir_y }
    }

    /// Expresses every position, heading and direction of `scene` in this frame.
    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        for agent in &mut out.agents {
            for st in &mut agent.states {
                *st = self.state_to_local(st);
            }
        }
        for poly in &mut out.polylines {
            for p in &mut poly.points {
                *p = self.point_to_local(p);
            }
        }
        out
    }
}

/// The frame centered on `agent_id`'s current state.
pub fn agent_frame(scene: &Scene, agent_id: i64) -> Result<Frame> {
    let agent = scene.agent(agent_id)?;
    let current = agent
        .states
        .get(scene.current_index)
        .filter(|s| s.valid)
        .ok_or(Error::InvalidCurrentState(agent_id))?;
    Ok(Frame {
        origin_x: current.x,
        origin_y: current.y,
        rotation: current.heading,
    })
}

/// Re-expresses the whole scene in the coordinate system centered at the
/// target agent's current position and heading.
pub fn normalize_to_agent(scene: &Scene, agent_id: i64) -> Result<Scene> {
    let frame = agent_frame(scene, agent_id)?;
    Ok(frame.apply(scene))
}
