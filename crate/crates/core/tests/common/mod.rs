//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

pub fn random_points(r: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [r.random_range(-extent..extent), r.random_range(-extent..extent)])
        .collect()
}

/// Textbook Lloyd from a given initialization. Empty clusters are re-seeded
/// at the farthest point from its own centroid (each point at most once, ties
/// to the lower index). Returns the final SSE.
pub fn lloyd_sse(points: &[[f64; 2]], init: &[[f64; 2]], max_iters: usize) -> f64 {
    let mut c = init.to_vec();
    let assign = |c: &[[f64; 2]]| -> Vec<usize> {
        points
            .iter()
            .map(|&p| {
                let mut best = 0;
                for j in 1..c.len() {
                    if sq(p, c[j]) < sq(p, c[best]) {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let mut last: Option<Vec<usize>> = None;
    for _ in 0..max_iters {
        let a = assign(&c);
        if last.as_ref() == Some(&a) {
            break;
        }
        let mut empty = Vec::new();
        for (j, cj) in c.iter_mut().enumerate() {
            let members: Vec<[f64; 2]> = points
                .iter()
                .zip(&a)
                .filter(|(_, &aj)| aj == j)
                .map(|(p, _)| *p)
                .collect();
            if members.is_empty() {
                empty.push(j);
            } else {
                let n = members.len() as f64;
                *cj = [
                    members.iter().map(|p| p[0]).sum::<f64>() / n,
                    members.iter().map(|p| p[1]).sum::<f64>() / n,
                ];
            }
        }
        let mut taken = vec![false; points.len()];
        for j in empty {
            let mut pick: Option<usize> = None;
            for i in 0..points.len() {
                if taken[i] {
                    continue;
                }
                let d = sq(points[i], c[a[i]]);
                if pick.map_or(true, |p| d > sq(points[p], c[a[p]])) {
                    pick = Some(i);
                }
            }
            if let Some(i) = pick {
                taken[i] = true;
                c[j] = points[i];
            }
        }
        last = Some(a);
    }
    let a = last.unwrap_or_else(|| assign(&c));
    points.iter().zip(&a).map(|(&p, &j)| sq(p, c[j])).sum()
}

/// Greedy NMS by repeated removal from a working list. `entries` are
/// `(endpoint, confidence)`; returns selected input indices in output order.
pub fn nms_indices(entries: &[([f64; 2], f64)], delta: f64, top_k: usize) -> Vec<usize> {
    let by_conf = |a: &usize, b: &usize| entries[*b].1.total_cmp(&entries[*a].1).then(a.cmp(b));
    let mut remaining: Vec<usize> = (0..entries.len()).collect();
    let mut suppressed: Vec<usize> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    while kept.len() < top_k && !remaining.is_empty() {
        remaining.sort_by(by_conf);
        let head = remaining.remove(0);
        kept.push(head);
        let (close, far): (Vec<usize>, Vec<usize>) = remaining
            .into_iter()
            .partition(|&j| sq(entries[j].0, entries[head].0).sqrt() <= delta);
        suppressed.extend(close);
        remaining = far;
    }
    let mut pool: Vec<usize> = suppressed.into_iter().chain(remaining).collect();
    pool.sort_by(by_conf);
    for j in pool {
        if kept.len() == top_k {
            break;
        }
        kept.push(j);
    }
    kept.sort_by(by_conf);
    kept
}

/// Pool → renormalize per model → threshold from the most confident entry's
/// arc length → greedy NMS → renormalize. Each model is a list of
/// `(trajectory, confidence)`; returns `(trajectory, confidence)` rows.
pub fn ensemble_rows(
    models: &[Vec<(Vec<[f64; 2]>, f64)>],
    top_k: usize,
    renormalize: bool,
) -> Vec<(Vec<[f64; 2]>, f64)> {
    let mut pooled: Vec<(Vec<[f64; 2]>, f64)> = Vec::new();
    for m in models {
        let total: f64 = m.iter().map(|e| e.1).sum();
        for (t, c) in m {
            let c = if renormalize && total > 0.0 { c / total } else { *c };
            pooled.push((t.clone(), c));
        }
    }
    let mut best = 0;
    for i in 1..pooled.len() {
        if pooled[i].1 > pooled[best].1 {
            best = i;
        }
    }
    let length: f64 = pooled[best]
        .0
        .windows(2)
        .map(|w| sq(w[0], w[1]).sqrt())
        .sum();
    let delta = if length <= 10.0 {
        2.5
    } else if length >= 10.0 + 40.0 / 1.5 {
        3.5
    } else {
        2.5 + 1.5 * (length - 10.0) / 40.0
    };
    let ends: Vec<([f64; 2], f64)> = pooled.iter().map(|(t, c)| (*t.last().unwrap(), *c)).collect();
    let picked = nms_indices(&ends, delta, top_k);
    let total: f64 = picked.iter().map(|&i| pooled[i].1).sum();
    picked
        .into_iter()
        .map(|i| {
            let c = if total > 0.0 { pooled[i].1 / total } else { pooled[i].1 };
            (pooled[i].0.clone(), c)
        })
        .collect()
}

/// Indices of the `limit` valid centers closest to any reference point, by
/// exhaustive scoring and a full sort.
pub fn collect_by_scan(
    centers: &[[f64; 2]],
    mask: &[bool],
    reference: &[[f64; 2]],
    limit: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let mut best = f64::INFINITY;
        for r in reference {
            best = best.min(sq(*c, *r).sqrt());
        }
        scored.push((best, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(limit).map(|(_, i)| i).collect()
}

/// Bivariate normal density from its covariance matrix.
pub fn bivariate_density(d: [f64; 2], sigma: [f64; 2], rho: f64) -> f64 {
    let c = [
        [sigma[0] * sigma[0], rho * sigma[0] * sigma[1]],
        [rho * sigma[0] * sigma[1], sigma[1] * sigma[1]],
    ];
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let inv = [
        [c[1][1] / det, -c[0][1] / det],
        [-c[1][0] / det, c[0][0] / det],
    ];
    let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

/// Mean displacement of one trajectory over valid steps.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]], valid: &[bool]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for t in 0..gt.len() {
        if valid[t] {
            s += sq(pred[t], gt[t]).sqrt();
            n += 1.0;
        }
    }
    s / n
}

/// Random trajectory of `t` points with step lengths up to `step`.
pub fn random_trajectory(r: &mut ChaCha8Rng, t: usize, step: f64) -> Vec<[f64; 2]> {
    let mut p = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
    (0..t)
        .map(|_| {
            p = [p[0] + r.random_range(-step..step), p[1] + r.random_range(-step..step)];
            p
        })
        .collect()
}

/// A small model for structural tests; shares the desk horizon.
pub fn small_config() -> mtr_core::encoder::ModelConfig {
    mtr_core::encoder::ModelConfig {
        d_model: 32,
        n_enc_layers: 2,
        n_dec_layers: 3,
        n_heads: 4,
        num_modes: 6,
        head_hidden: 32,
        ffn_dim: 64,
        map_collect_limit: 8,
        ..mtr_core::encoder::ModelConfig::desk()
    }
}

pub fn scenes(seeds: std::ops::Range<u64>) -> Vec<mtr_core::scene::Scene> {
    let spec = mtr_core::scene::GeneratorSpec::default();
    seeds
        .map(|s| mtr_core::scene::generate_synthetic_scene(&spec, s).unwrap())
        .collect()
}

/// Intention table over `scenes` plus a fixed pool, and one sample per
/// interest agent of `scenes`.
pub fn samples(
    scenes: &[mtr_core::scene::Scene],
    k: usize,
) -> (mtr_core::intention::IntentionTable, Vec<mtr_core::batch::Sample>) {
    let mut pool = self::scenes(10_000..10_032);
    pool.extend_from_slice(scenes);
    let table = mtr_core::intention::IntentionTable::build(&pool, k, 0, 100).unwrap();
    let vcfg = mtr_core::scene::VectorizeConfig {
        max_polylines: Some(64),
        ..Default::default()
    };
    let samples = mtr_core::batch::Sample::from_scenes(scenes, &table, &vcfg).unwrap();
    (table, samples)
}

pub fn host(t: &candle_core::Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

pub fn max_abs_diff(a: &candle_core::Tensor, b: &candle_core::Tensor) -> f32 {
    host(a)
        .iter()
        .zip(host(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
