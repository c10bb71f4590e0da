//! Intention points: per-category k-means centroids of ground-truth
//! endpoints, and the hard positive-mode assignment used by the loss.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{normalize_to_agent, read_jsonl, write_jsonl, Category, Scene};

/// `K` intention points of one category, in the agent-centric frame,
/// sorted by angle then radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionPointSet {
    pub category: Category,
    pub points: Vec<[f64; 2]>,
}

impl IntentionPointSet {
    pub fn new(category: Category, mut points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() || points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Clustering(
                "intention points must be non-empty and finite".into(),
            ));
        }
        canonical_sort(&mut points);
        Ok(Self { category, points })
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }
}

fn canonical_sort(points: &mut [[f64; 2]]) {
    points.sort_by(|a, b| {
        let (ta, tb) = (a[1].atan2(a[0]), b[1].atan2(b[0]));
        ta.total_cmp(&tb)
            .then(a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1])))
    });
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Index of the nearest centroid; ties go to the smallest index.
fn nearest(centroids: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(*c, p);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Within-cluster sum of squared distances under nearest assignment.
pub fn within_cluster_sse(points: &[[f64; 2]], centroids: &[[f64; 2]]) -> f64 {
    points
        .iter()
        .map(|&p| dist2(centroids[nearest(centroids, p)], p))
        .sum()
}

fn check_input(points: &[[f64; 2]], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Clustering("K must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Clustering(format!(
            "{} endpoints for K = {k} clusters",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Clustering("non-finite endpoint".into()));
    }
    Ok(())
}

/// k-means++ seeding under a fixed seed.
pub fn kmeans_plus_plus_init(points: &[[f64; 2]], k: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    check_input(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    Ok(centroids)
}

/// Outcome of a Lloyd run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansRun {
    /// Centroids in cluster-index order (not canonical order).
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    /// SSE after each update step.
    pub sse_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansRun {
    pub fn sse(&self) -> f64 {
        self.sse_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Lloyd iterations from `init` until assignments stop changing or
/// `max_iters` update steps have run.
///
/// An empty cluster is re-seeded at the point farthest from its assigned
/// centroid (ties to the smallest point index, each point used once).
pub fn lloyd(points: &[[f64; 2]], init: Vec<[f64; 2]>, max_iters: usize) -> KMeansRun {
    let k = init.len();
    let mut centroids = init;
    let mut assignments: Vec<usize> = Vec::new();
    let mut sse_trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        let next: Vec<usize> = points.iter().map(|&p| nearest(&centroids, p)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
        iterations += 1;

        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (&p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = [sums[c][0] / n, sums[c][1] / n];
            }
        }
        let mut used = vec![false; points.len()];
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let mut far = None;
            let mut far_d = -1.0;
            for (i, (&p, &a)) in points.iter().zip(&assignments).enumerate() {
                let d = dist2(p, centroids[a]);
                if !used[i] && d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
            if let Some(i) = far {
                used[i] = true;
                centroids[c] = points[i];
            }
        }
        let sse = points
            .iter()
            .zip(&assignments)
            .map(|(&p, &a)| dist2(p, centroids[a]))
            .sum();
        sse_trace.push(sse);
    }
    if sse_trace.is_empty() {
        sse_trace.push(within_cluster_sse(points, &centroids));
        assignments = points.iter().map(|&p| nearest(&centroids, p)).collect();
    }
    KMeansRun {
        centroids,
        assignments,
        sse_trace,
        iterations,
    }
}

/// k-means++ seeded Lloyd clustering of trajectory endpoints.
pub fn cluster_intention_points(
    category: Category,
    endpoints: &[[f64; 2]],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<IntentionPointSet> {
    let init = kmeans_plus_plus_init(endpoints, k, seed)?;
    let run = lloyd(endpoints, init, max_iters);
    IntentionPointSet::new(category, run.centroids)
}

/// Index of the intention point nearest to `gt_endpoint`, ties to the
/// smallest index.
pub fn assign_positive_mode(intentions: &IntentionPointSet, gt_endpoint: [f64; 2]) -> usize {
    nearest(&intentions.points, gt_endpoint)
}

/// Agent-centric ground-truth endpoints (last valid future step) of every
/// interest agent, grouped by category.
pub fn collect_endpoints(scenes: &[Scene]) -> Result<BTreeMap<Category, Vec<[f64; 2]>>> {
    let mut out: BTreeMap<Category, Vec<[f64; 2]>> = BTreeMap::new();
    for scene in scenes {
        for agent in scene.interest_agents() {
            if !agent.states[scene.current_index].valid {
                continue;
            }
            let local = normalize_to_agent(scene, agent.agent_id)?;
            let track = local.agent(agent.agent_id)?;
            if let Some(end) = track
                .future(scene.current_index)
                .iter()
                .rev()
                .find(|s| s.valid)
            {
                out.entry(agent.category).or_default().push([end.x, end.y]);
            }
        }
    }
    Ok(out)
}

/// One record of an intention file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionRecord {
    pub category: Category,
    pub k: usize,
    pub seed: u64,
    pub points: Vec<[f64; 2]>,
}

/// Intention point sets for every category present in the training data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntentionTable {
    pub seed: u64,
    pub sets: BTreeMap<Category, IntentionPointSet>,
}

impl IntentionTable {
    /// Clusters every category that has at least one endpoint.
    pub fn build(scenes: &[Scene], k: usize, seed: u64, max_iters: usize) -> Result<Self> {
        let endpoints = collect_endpoints(scenes)?;
        if endpoints.is_empty() {
            return Err(Error::Empty("no interest-agent endpoints"));
        }
        let mut sets = BTreeMap::new();
        for (cat, pts) in endpoints {
            let set = cluster_intention_points(cat, &pts, k, seed, max_iters).map_err(|e| {
                Error::Clustering(format!("category {}: {e}", cat.label()))
            })?;
            sets.insert(cat, set);
        }
        Ok(Self { seed, sets })
    }

    pub fn get(&self, category: Category) -> Result<&IntentionPointSet> {
        self.sets.get(&category).ok_or_else(|| {
            Error::Clustering(format!("no intention points for {}", category.label()))
        })
    }

    /// The common `K` of all sets.
    pub fn k(&self) -> Result<usize> {
        let mut ks = self.sets.values().map(IntentionPointSet::k);
        let k = ks.next().ok_or(Error::Empty("intention table"))?;
        if ks.any(|other| other != k) {
            return Err(Error::Clustering("categories disagree on K".into()));
        }
        Ok(k)
    }

    pub fn records(&self) -> Vec<IntentionRecord> {
        self.sets
            .values()
            .map(|s| IntentionRecord {
                category: s.category,
                k: s.k(),
                seed: self.seed,
                points: s.points.clone(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<IntentionRecord>) -> Result<Self> {
        let mut table = Self::default();
        for r in records {
            if r.points.len() != r.k {
                return Err(Error::Clustering(format!(
                    "{} record declares K = {} but has {} points",
                    r.category.label(),
                    r.k,
                    r.points.len()
                )));
            }
            table.seed = r.seed;
            table
                .sets
                .insert(r.category, IntentionPointSet::new(r.category, r.points)?);
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(&self.records(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(read_jsonl(path)?)
    }
}
