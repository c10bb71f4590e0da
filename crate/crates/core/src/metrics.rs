//! Forecasting metrics: minADE, minFDE, miss rate, and a simplified mAP /
//! Soft mAP over endpoint matches at a fixed distance threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Category;

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn last_valid(valid: &[bool]) -> Result<usize> {
    valid
        .iter()
        .rposition(|&v| v)
        .ok_or(Error::Empty("valid ground-truth steps"))
}

fn check_lengths(preds: &[Vec<[f64; 2]>], gt: &[[f64; 2]], valid: &[bool]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("predicted trajectories"));
    }
    if gt.len() != valid.len() || preds.iter().any(|p| p.len() != gt.len()) {
        return Err(Error::Shape(format!(
            "predictions and ground truth disagree on length ({} steps)",
            gt.len()
        )));
    }
    Ok(())
}

/// Smallest mean displacement over valid steps across the predictions.
pub fn min_ade(preds: &[Vec<[f64; 2]>], gt: &[[f64; 2]], valid: &[bool]) -> Result<f64> {
    check_lengths(preds, gt, valid)?;
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Empty("valid ground-truth steps"));
    }
    Ok(preds
        .iter()
        .map(|p| {
            (0..gt.len())
                .filter(|&t| valid[t])
                .map(|t| dist(p[t], gt[t]))
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min))
}

/// Smallest displacement at the last valid step across the predictions.
pub fn min_fde(preds: &[Vec<[f64; 2]>], gt: &[[f64; 2]], valid: &[bool]) -> Result<f64> {
    check_lengths(preds, gt, valid)?;
    let t = last_valid(valid)?;
    Ok(preds
        .iter()
        .map(|p| dist(p[t], gt[t]))
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of scenes whose minFDE exceeds `threshold`.
pub fn miss_rate(min_fdes: &[f64], threshold: f64) -> Result<f64> {
    if min_fdes.is_empty() {
        return Err(Error::Empty("metric dataset"));
    }
    if !(threshold > 0.0) {
        return Err(Error::Config("miss threshold must be positive".into()));
    }
    Ok(min_fdes.iter().filter(|&&d| d > threshold).count() as f64 / min_fdes.len() as f64)
}

/// Predictions and ground truth for one target agent.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneResult {
    pub category: Category,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub confidences: Vec<f64>,
    pub gt: Vec<[f64; 2]>,
    pub gt_valid: Vec<bool>,
}

/// Area under the interpolated precision-recall curve given, in ranked
/// order, whether each counted prediction is a true positive.
pub fn interpolated_ap(ranked_hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(ranked_hits.len());
    for (i, &hit) in ranked_hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope from the right, then sum over recall increments.
    let mut ap = 0.0;
    let mut best = 0.0f64;
    let mut envelope = vec![0.0; points.len()];
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        envelope[i] = best;
    }
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[i];
            prev_recall = recall;
        }
    }
    ap
}

/// `(mAP, Soft mAP)` over all predictions pooled across scenes. A prediction
/// hits when its endpoint (at the last valid GT step) lies within `threshold`
/// of the GT endpoint and no more confident prediction of the same scene hit
/// already. Repeat hits count as false positives for mAP and are skipped for
/// Soft mAP.
pub fn mean_ap(results: &[SceneResult], threshold: f64) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::Empty("metric dataset"));
    }
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (s, r) in results.iter().enumerate() {
        check_lengths(&r.trajectories, &r.gt, &r.gt_valid)?;
        if r.confidences.len() != r.trajectories.len() {
            return Err(Error::Shape("one confidence per trajectory required".into()));
        }
        let t = last_valid(&r.gt_valid)?;
        for (m, traj) in r.trajectories.iter().enumerate() {
            pooled.push((r.confidences[m], s, m, dist(traj[t], r.gt[t]) <= threshold));
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![false; results.len()];
    let mut hard = Vec::with_capacity(pooled.len());
    let mut soft = Vec::with_capacity(pooled.len());
    for &(_, s, _, within) in &pooled {
        if within && !matched[s] {
            matched[s] = true;
            hard.push(true);
            soft.push(true);
        } else if within {
            hard.push(false);
        } else {
            hard.push(false);
            soft.push(false);
        }
    }
    Ok((
        interpolated_ap(&hard, results.len()),
        interpolated_ap(&soft, results.len()),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: String,
    pub scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
    pub soft_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    /// Per category present in the data, in Vehicle, Pedestrian, Cyclist order.
    pub categories: Vec<MetricRow>,
    /// Unweighted mean over the present categories.
    pub average: MetricRow,
    pub notes: Vec<String>,
}

fn row(label: &str, results: &[&SceneResult], threshold: f64) -> Result<MetricRow> {
    let mut ades = Vec::with_capacity(results.len());
    let mut fdes = Vec::with_capacity(results.len());
    for r in results {
        ades.push(min_ade(&r.trajectories, &r.gt, &r.gt_valid)?);
        fdes.push(min_fde(&r.trajectories, &r.gt, &r.gt_valid)?);
    }
    let owned: Vec<SceneResult> = results.iter().map(|r| (*r).clone()).collect();
    let (map, soft_map) = mean_ap(&owned, threshold)?;
    Ok(MetricRow {
        category: label.to_string(),
        scenes: results.len(),
        min_ade: ades.iter().sum::<f64>() / ades.len() as f64,
        min_fde: fdes.iter().sum::<f64>() / fdes.len() as f64,
        miss_rate: miss_rate(&fdes, threshold)?,
        map,
        soft_map,
    })
}

impl MetricReport {
    pub fn compute(results: &[SceneResult], threshold: f64) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Empty("metric dataset"));
        }
        let mut groups: BTreeMap<usize, Vec<&SceneResult>> = BTreeMap::new();
        for r in results {
            groups.entry(r.category.index()).or_default().push(r);
        }
        let categories = groups
            .iter()
            .map(|(&c, rs)| row(Category::ALL[c].label(), rs, threshold))
            .collect::<Result<Vec<_>>>()?;
        let n = categories.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| categories.iter().map(f).sum::<f64>() / n;
        let average = MetricRow {
            category: "Avg".into(),
            scenes: results.len(),
            min_ade: mean(|r| r.min_ade),
            min_fde: mean(|r| r.min_fde),
            miss_rate: mean(|r| r.miss_rate),
            map: mean(|r| r.map),
            soft_map: mean(|r| r.soft_map),
        };
        Ok(Self {
            threshold,
            categories,
            average,
            notes: vec![
                format!("miss and match threshold is a fixed {threshold} m endpoint distance"),
                "mAP is not averaged over behavior buckets".into(),
            ],
        })
    }

    /// Plain-text table with one row per category and an `Avg` row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12}{:>8}{:>10}{:>10}{:>10}{:>10}{:>10}",
            "Category", "Scenes", "Soft mAP", "mAP", "minADE", "minFDE", "MissRate"
        );
        for r in self.categories.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                s,
                "{:<12}{:>8}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
                r.category, r.scenes, r.soft_map, r.map, r.min_ade, r.min_fde, r.miss_rate
            );
        }
        s
    }
}
