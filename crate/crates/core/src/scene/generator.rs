//! Synthetic multimodal driving scenes.
//!
//! A [`SceneFamily`] lays out road geometry as one or more routes that share
//! an approach segment. The interest agent drives the approach and, at the
//! branch point, follows one route chosen with the spec's branch
//! probabilities. Everything is then moved by a random rigid transform so
//! that downstream normalization has real work to do.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    normalize::wrap_angle, AgentState, AgentTrack, Category, Frame, LaneType, MapPoint,
    MapPolyline, Scene,
};
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Segment {
    Straight { length: f64 },
    /// Constant-curvature turn; positive `angle` turns left.
    Arc { radius: f64, angle: f64 },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Straight { length } => length,
            Segment::Arc { radius, angle } => radius * angle.abs(),
        }
    }
}

/// A centerline parameterized by arc length, starting at the origin heading
/// along +x. Evaluation before the start or past the end extends straight.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub segments: Vec<Segment>,
}

impl Path {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    /// Position and heading at arc length `s`.
    pub fn pose(&self, s: f64) -> ([f64; 2], f64) {
        if s <= 0.0 {
            return ([s, 0.0], 0.0);
        }
        let mut pos = [0.0, 0.0];
        let mut heading: f64 = 0.0;
        let mut remaining = s;
        for seg in &self.segments {
            let len = seg.length();
            let d = remaining.min(len);
            match *seg {
                Segment::Straight { .. } => {
                    pos[0] += d * heading.cos();
                    pos[1] += d * heading.sin();
                }
                Segment::Arc { radius, angle } => {
                    let k = angle.signum() / radius;
                    let h1 = heading + k * d;
                    pos[0] += (h1.sin() - heading.sin()) / k;
                    pos[1] -= (h1.cos() - heading.cos()) / k;
                    heading = h1;
                }
            }
            remaining -= d;
            if remaining <= 0.0 {
                return (pos, wrap_angle(heading));
            }
        }
        pos[0] += remaining * heading.cos();
        pos[1] += remaining * heading.sin();
        (pos, wrap_angle(heading))
    }
}

/// Road geometry in the scene-local frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadLayout {
    pub routes: Vec<Path>,
    /// Arc length of the approach shared by every route (the branch point).
    pub shared_length: f64,
}

/// A road geometry family, registered by name.
pub trait SceneFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of routes (modes) this family produces for `spec`.
    fn route_count(&self, spec: &GeneratorSpec) -> usize;

    fn layout(&self, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<RoadLayout>;
}

struct StraightFamily;
struct CurvedFamily;
struct BranchFamily;

const APPROACH_LENGTH: f64 = 200.0;

impl SceneFamily for StraightFamily {
    fn name(&self) -> &'static str {
        "straight"
    }

    fn route_count(&self, _: &GeneratorSpec) -> usize {
        1
    }

    fn layout(&self, _: &GeneratorSpec, _: &mut ChaCha8Rng) -> Result<RoadLayout> {
        Ok(RoadLayout {
            routes: vec![Path::new(vec![Segment::Straight {
                length: APPROACH_LENGTH,
            }])],
            shared_length: APPROACH_LENGTH,
        })
    }
}

impl SceneFamily for CurvedFamily {
    fn name(&self) -> &'static str {
        "curved"
    }

    fn route_count(&self, _: &GeneratorSpec) -> usize {
        1
    }

    fn layout(&self, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<RoadLayout> {
        let radius = rng.random_range(3.0 * spec.turn_radius[0]..=3.0 * spec.turn_radius[1]);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let angle = sign * (spec.forward_reach() / radius).min(FRAC_PI_2);
        Ok(RoadLayout {
            routes: vec![Path::new(vec![
                Segment::Straight {
                    length: APPROACH_LENGTH,
                },
                Segment::Arc { radius, angle },
            ])],
            shared_length: APPROACH_LENGTH + radius * angle.abs(),
        })
    }
}

impl SceneFamily for BranchFamily {
    fn name(&self) -> &'static str {
        "branch"
    }

    fn route_count(&self, spec: &GeneratorSpec) -> usize {
        spec.branches
    }

    fn layout(&self, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<RoadLayout> {
        let approach = Segment::Straight {
            length: APPROACH_LENGTH,
        };
        let mut turn = |angle: f64| {
            let radius = rng.random_range(spec.turn_radius[0]..=spec.turn_radius[1]);
            Path::new(vec![approach, Segment::Arc { radius, angle }])
        };
        let routes = match spec.branches {
            2 => vec![turn(FRAC_PI_2), turn(-FRAC_PI_2)],
            3 => {
                let left = turn(FRAC_PI_2);
                let right = turn(-FRAC_PI_2);
                vec![left, Path::new(vec![approach]), right]
            }
            b => {
                return Err(Error::GeneratorSpec(format!(
                    "branch family supports 2 or 3 branches, got {b}"
                )))
            }
        };
        Ok(RoadLayout {
            routes,
            shared_length: APPROACH_LENGTH,
        })
    }
}

/// Built-in scene families: `straight`, `curved`, `branch`.
pub fn scene_families() -> Registry<dyn SceneFamily> {
    let mut reg: Registry<dyn SceneFamily> = Registry::new("scene family");
    let families: [Arc<dyn SceneFamily>; 3] = [
        Arc::new(StraightFamily),
        Arc::new(CurvedFamily),
        Arc::new(BranchFamily),
    ];
    for f in families {
        reg.register(f.name(), f);
    }
    reg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Registry name of the road geometry family.
    pub family: String,
    pub branches: usize,
    pub branch_probs: Vec<f64>,
    pub min_agents: usize,
    pub max_agents: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    /// Seconds between steps.
    pub dt: f64,
    /// Bound of the uniform lateral noise on every waypoint (m).
    pub position_noise: f64,
    /// Per-step probability that a non-interest agent state is missing.
    pub dropout: f64,
    /// Sampling weights of the interest agent's category.
    pub category_weights: [f64; 3],
    /// Speed range (m/s) per category, indexed like [`Category::ALL`].
    pub speed_ranges: [[f64; 2]; 3],
    /// Distance from the interest agent's current position to the branch point.
    pub ahead_range: [f64; 2],
    pub turn_radius: [f64; 2],
    pub lane_width: f64,
    pub point_spacing: f64,
    /// Half-size of the square from which the world offset is drawn.
    pub world_extent: f64,
    pub edges: bool,
    pub crosswalk: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            family: "branch".into(),
            branches: 3,
            branch_probs: vec![1.0 / 3.0; 3],
            min_agents: 1,
            max_agents: 4,
            history_steps: 6,
            future_steps: 16,
            dt: 0.2,
            position_noise: 0.1,
            dropout: 0.05,
            category_weights: [1.0, 0.0, 0.0],
            speed_ranges: [[4.0, 8.0], [1.0, 2.0], [3.0, 6.0]],
            ahead_range: [2.0, 6.0],
            turn_radius: [12.0, 20.0],
            lane_width: 3.5,
            point_spacing: 1.0,
            world_extent: 1000.0,
            edges: true,
            crosswalk: true,
        }
    }
}

impl GeneratorSpec {
    fn max_speed(&self) -> f64 {
        self.speed_ranges.iter().map(|r| r[1]).fold(0.0, f64::max)
    }

    fn forward_reach(&self) -> f64 {
        self.max_speed() * self.dt * self.future_steps as f64 + self.ahead_range[1] + 10.0
    }

    fn backward_reach(&self) -> f64 {
        self.max_speed() * self.dt * self.history_steps as f64 + 10.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::GeneratorSpec(m));
        let families = scene_families();
        let family = families.get(&self.family)?;
        if self.future_steps == 0 {
            return bad("future_steps must be positive".into());
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        if self.min_agents == 0 || self.min_agents > self.max_agents {
            return bad(format!(
                "agent count range [{}, {}] is empty or excludes the interest agent",
                self.min_agents, self.max_agents
            ));
        }
        if self.family == "branch" && !(2..=3).contains(&self.branches) {
            return bad(format!("branches must be 2 or 3, got {}", self.branches));
        }
        let routes = family.route_count(self);
        if routes > 1 {
            if self.branch_probs.len() != routes {
                return bad(format!(
                    "{} branch probabilities for {routes} branches",
                    self.branch_probs.len()
                ));
            }
            let sum: f64 = self.branch_probs.iter().sum();
            if self.branch_probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return bad("branch probabilities must be non-negative and sum to 1".into());
            }
        }
        if !(self.position_noise >= 0.0) || !(0.0..=1.0).contains(&self.dropout) {
            return bad("noise must be non-negative and dropout within [0, 1]".into());
        }
        if self.category_weights.iter().any(|w| !(*w >= 0.0))
            || self.category_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("category weights must be non-negative with a positive sum".into());
        }
        for r in self
            .speed_ranges
            .iter()
            .chain([&self.ahead_range, &self.turn_radius])
        {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("range {r:?} must be positive and ordered"));
            }
        }
        if !(self.point_spacing > 0.0 && self.lane_width > 0.0 && self.world_extent >= 0.0) {
            return bad("point_spacing and lane_width must be positive".into());
        }
        Ok(())
    }
}

/// A generated scene plus the generator's ground truth about its modes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub scene: Scene,
    /// Route followed by the interest agent.
    pub branch: usize,
    /// Noise-free endpoint the interest agent would reach on each route, in
    /// world coordinates.
    pub branch_endpoints: Vec<[f64; 2]>,
}

/// Deterministically generates one scene from `(spec, seed)`.
pub fn generate_synthetic_scene(spec: &GeneratorSpec, seed: u64) -> Result<Scene> {
    generate_labeled_scene(spec, seed).map(|l| l.scene)
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

struct Placer<'a> {
    world: Frame,
    spec: &'a GeneratorSpec,
}

impl Placer<'_> {
    fn state(&self, path: &Path, s: f64, speed: f64, lateral: f64) -> AgentState {
        let (p, h) = path.pose(s);
        let (sin, cos) = h.sin_cos();
        let local = [p[0] - lateral * sin, p[1] + lateral * cos];
        let [x, y] = self.world.to_world(local[0], local[1]);
        let (ws, wc) = self.world.rotation.sin_cos();
        let (vx, vy) = (speed * cos, speed * sin);
        AgentState {
            x,
            y,
            heading: wrap_angle(h + self.world.rotation),
            vx: wc * vx - ws * vy,
            vy: ws * vx + wc * vy,
            valid: true,
        }
    }

    fn point(&self, local: [f64; 2], heading: f64) -> MapPoint {
        let [x, y] = self.world.to_world(local[0], local[1]);
        let h = heading + self.world.rotation;
        MapPoint {
            x,
            y,
            dir_x: h.cos(),
            dir_y: h.sin(),
        }
    }

    fn sample_path(&self, path: &Path, from: f64, to: f64, offset: f64) -> Vec<MapPoint> {
        let n = ((to - from) / self.spec.point_spacing).floor().max(1.0) as usize;
        (0..=n)
            .map(|i| {
                let s = from + (to - from) * i as f64 / n as f64;
                let (p, h) = path.pose(s);
                self.point([p[0] - offset * h.sin(), p[1] + offset * h.cos()], h)
            })
            .collect()
    }
}

/// Like [`generate_synthetic_scene`], also returning branch labels.
pub fn generate_labeled_scene(spec: &GeneratorSpec, seed: u64) -> Result<LabeledScene> {
    spec.validate()?;
    let family = scene_families().get(&spec.family)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = family.layout(spec, &mut rng)?;
    let n_routes = layout.routes.len();

    let world = Frame {
        origin_x: rng.random_range(-spec.world_extent..=spec.world_extent),
        origin_y: rng.random_range(-spec.world_extent..=spec.world_extent),
        rotation: wrap_angle(rng.random_range(-PI..PI)),
    };
    let placer = Placer { world, spec };
    let h = spec.history_steps;
    let total_steps = h + 1 + spec.future_steps;
    let noise = |rng: &mut ChaCha8Rng| {
        if spec.position_noise > 0.0 {
            rng.random_range(-spec.position_noise..=spec.position_noise)
        } else {
            0.0
        }
    };
    let speed_for = |rng: &mut ChaCha8Rng, c: Category| {
        let [lo, hi] = spec.speed_ranges[c.index()];
        rng.random_range(lo..=hi)
    };

    // Interest agent.
    let category = Category::ALL[pick_weighted(&mut rng, &spec.category_weights)];
    let branch = if n_routes > 1 {
        pick_weighted(&mut rng, &spec.branch_probs)
    } else {
        0
    };
    let speed = speed_for(&mut rng, category);
    let ahead = rng.random_range(spec.ahead_range[0]..=spec.ahead_range[1]);
    let s_now = layout.shared_length.min(APPROACH_LENGTH) - ahead;
    let step = speed * spec.dt;
    let route = &layout.routes[branch];
    let mut states = Vec::with_capacity(total_steps);
    for t in 0..total_steps {
        let s = s_now + step * (t as f64 - h as f64);
        let lateral = noise(&mut rng);
        states.push(placer.state(route, s, speed, lateral));
    }
    let s_end = s_now + step * spec.future_steps as f64;
    let branch_endpoints = layout
        .routes
        .iter()
        .map(|r| {
            let (p, _) = r.pose(s_end);
            world.to_world(p[0], p[1])
        })
        .collect();
    let mut agents = vec![AgentTrack {
        agent_id: 0,
        category,
        states,
        is_interest: true,
    }];

    // Other traffic.
    let s_min = s_now - spec.backward_reach();
    let s_max = s_now + spec.forward_reach();
    let n_agents = rng.random_range(spec.min_agents..=spec.max_agents);
    for id in 1..n_agents {
        let category = Category::ALL[rng.random_range(0..3)];
        let route = &layout.routes[rng.random_range(0..n_routes)];
        let speed = speed_for(&mut rng, category);
        let start = rng.random_range(s_min..=s_now + 0.5 * spec.forward_reach());
        let states = (0..total_steps)
            .map(|t| {
                let lateral = noise(&mut rng);
                if rng.random_bool(spec.dropout) {
                    AgentState::INVALID
                } else {
                    placer.state(route, start + speed * spec.dt * t as f64, speed, lateral)
                }
            })
            .collect();
        agents.push(AgentTrack {
            agent_id: id as i64,
            category,
            states,
            is_interest: false,
        });
    }

    // Map: the shared approach once, then each route past the branch point.
    let mut polylines = Vec::new();
    let mut push = |lane_type, points: Vec<MapPoint>| {
        polylines.push(MapPolyline {
            polyline_id: polylines.len() as i64,
            lane_type,
            points,
        });
    };
    let shared_end = layout.shared_length.min(s_max);
    push(
        LaneType::Lane,
        placer.sample_path(&layout.routes[0], s_min, shared_end, 0.0),
    );
    if shared_end < s_max {
        for r in &layout.routes {
            push(LaneType::Lane, placer.sample_path(r, shared_end, s_max, 0.0));
        }
    }
    if spec.edges {
        for side in [-0.5, 0.5] {
            push(
                LaneType::Edge,
                placer.sample_path(&layout.routes[0], s_min, shared_end, side * spec.lane_width),
            );
        }
    }
    if spec.crosswalk {
        let s = rng.random_range(s_min..=s_now);
        let (p, heading) = layout.routes[0].pose(s);
        let across = heading + FRAC_PI_2;
        let half = spec.lane_width;
        let points = (0..5)
            .map(|i| {
                let o = -half + half * i as f64 / 2.0;
                placer.point([p[0] + o * across.cos(), p[1] + o * across.sin()], across)
            })
            .collect();
        push(LaneType::Crosswalk, points);
    }

    let scene = Scene {
        scene_id: format!("{}-{seed:08}", spec.family),
        current_index: h,
        agents,
        polylines,
    };
    scene.validate()?;
    Ok(LabeledScene {
        scene,
        branch,
        branch_endpoints,
    })
}
