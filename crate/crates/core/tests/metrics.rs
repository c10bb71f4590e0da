mod common;

use mtr_core::metrics::{interpolated_ap, mean_ap, min_ade, min_fde, miss_rate, MetricReport, SceneResult};
use mtr_core::scene::Category;
use proptest::prelude::*;
use rand::Rng;

fn constant(p: [f64; 2], t: usize) -> Vec<[f64; 2]> {
    vec![p; t]
}

fn result(ends: &[([f64; 2], f64)]) -> SceneResult {
    SceneResult {
        category: Category::Vehicle,
        trajectories: ends.iter().map(|(e, _)| constant(*e, 2)).collect(),
        confidences: ends.iter().map(|(_, c)| *c).collect(),
        gt: constant([0.0, 0.0], 2),
        gt_valid: vec![true, true],
    }
}

/// Area by brute force: at each recall level, the best precision reached at
/// any equal or higher recall.
fn brute_ap(hits: &[bool], positives: usize) -> f64 {
    let mut pts = Vec::new();
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        pts.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    let mut area = 0.0;
    for k in 1..=positives {
        let lo = (k - 1) as f64 / positives as f64;
        let hi = k as f64 / positives as f64;
        let best = pts
            .iter()
            .filter(|(r, _)| *r >= hi - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        area += (hi - lo) * best;
    }
    area
}

#[test]
fn min_ade_examples() {
    let mut r = common::rng(1);
    let gt = common::random_trajectory(&mut r, 10, 1.0);
    let valid = vec![true; 10];
    let far = constant([100.0, 100.0], 10);
    assert_eq!(min_ade(&[far.clone(), gt.clone()], &gt, &valid).unwrap(), 0.0);
    let shifted: Vec<_> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
    assert!((min_ade(&[shifted], &gt, &valid).unwrap() - 1.0).abs() < 1e-12);
    assert!(min_ade(&[gt.clone()], &gt, &[false; 10]).is_err());
    assert!(min_ade(&[], &gt, &valid).is_err());
}

#[test]
fn min_ade_and_fde_match_scan() {
    let mut r = common::rng(2);
    for _ in 0..100 {
        let gt = common::random_trajectory(&mut r, 12, 1.5);
        let mut valid: Vec<bool> = (0..12).map(|_| r.random_bool(0.7)).collect();
        valid[0] = true;
        let preds: Vec<_> = (0..6).map(|_| common::random_trajectory(&mut r, 12, 1.5)).collect();
        let scan = preds.iter().map(|p| common::ade(p, &gt, &valid)).fold(f64::INFINITY, f64::min);
        assert!((min_ade(&preds, &gt, &valid).unwrap() - scan).abs() < 1e-12);
        let t = valid.iter().rposition(|&v| v).unwrap();
        let fde = preds
            .iter()
            .map(|p| ((p[t][0] - gt[t][0]).powi(2) + (p[t][1] - gt[t][1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!((min_fde(&preds, &gt, &valid).unwrap() - fde).abs() < 1e-12);
    }
}

#[test]
fn min_fde_examples() {
    let gt = constant([0.0, 0.0], 3);
    let valid = vec![true; 3];
    let preds: Vec<_> = [3.0, 2.0, 5.0].iter().map(|&d| constant([0.0, d], 3)).collect();
    assert_eq!(min_fde(&preds, &gt, &valid).unwrap(), 2.0);
    let mut hit = constant([9.0, 9.0], 3);
    hit[2] = [0.0, 0.0];
    assert_eq!(min_fde(&[preds[0].clone(), hit], &gt, &valid).unwrap(), 0.0);
}

#[test]
fn miss_rate_examples() {
    assert_eq!(miss_rate(&[0.0, 0.0], 2.0).unwrap(), 0.0);
    assert_eq!(miss_rate(&[1e12, 1e12], 2.0).unwrap(), 1.0);
    assert_eq!(miss_rate(&[0.5, 3.0], 2.0).unwrap(), 0.5);
    assert!(miss_rate(&[], 2.0).is_err());
    assert!(miss_rate(&[1.0], 0.0).is_err());
}

#[test]
fn perfect_and_empty_ranking() {
    let results: Vec<_> = (0..4)
        .map(|i| result(&[([0.1, 0.0], 0.9 - 0.01 * i as f64), ([50.0, 0.0], 0.1)]))
        .collect();
    let (map, soft) = mean_ap(&results, 2.0).unwrap();
    assert_eq!((map, soft), (1.0, 1.0));
    let misses: Vec<_> = (0..4).map(|_| result(&[([50.0, 0.0], 0.5), ([0.0, 40.0], 0.5)])).collect();
    assert_eq!(mean_ap(&misses, 2.0).unwrap(), (0.0, 0.0));
    assert!(mean_ap(&[], 2.0).is_err());
}

#[test]
fn three_scene_hand_case() {
    let hit = [0.5, 0.0];
    let miss = [10.0, 0.0];
    let results = vec![
        result(&[(hit, 0.9), (hit, 0.6)]),
        result(&[(miss, 0.8), (hit, 0.5)]),
        result(&[(miss, 0.7), (miss, 0.2)]),
    ];
    // Ranked: A T, B F, C F, A (repeat), B T, C F.
    let hard = [true, false, false, false, true, false];
    let soft = [true, false, false, true, false];
    let (map, soft_map) = mean_ap(&results, 2.0).unwrap();
    assert!((map - 7.0 / 15.0).abs() < 1e-12);
    assert!((soft_map - 0.5).abs() < 1e-12);
    assert!((brute_ap(&hard, 3) - map).abs() < 1e-12);
    assert!((brute_ap(&soft, 3) - soft_map).abs() < 1e-12);
}

#[test]
fn interpolated_ap_matches_brute_force() {
    let mut r = common::rng(3);
    for _ in 0..200 {
        let n = r.random_range(1..30);
        let hits: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let positives = hits.iter().filter(|&&h| h).count() + r.random_range(0..3);
        if positives == 0 {
            assert_eq!(interpolated_ap(&hits, 0), 0.0);
            continue;
        }
        assert!((interpolated_ap(&hits, positives) - brute_ap(&hits, positives)).abs() < 1e-12);
    }
}

#[test]
fn report_groups_categories_and_averages() {
    let mut ped = result(&[([0.0, 0.0], 1.0)]);
    ped.category = Category::Pedestrian;
    let veh = result(&[([4.0, 0.0], 1.0)]);
    let report = MetricReport::compute(&[veh, ped], 2.0).unwrap();
    let names: Vec<_> = report.categories.iter().map(|r| r.category.as_str()).collect();
    assert_eq!(names, ["Vehicle", "Pedestrian"]);
    assert_eq!(report.average.category, "Avg");
    assert_eq!(report.average.scenes, 2);
    assert!((report.average.min_ade - 2.0).abs() < 1e-12);
    assert!((report.average.miss_rate - 0.5).abs() < 1e-12);
    assert!((report.average.soft_map - 0.5).abs() < 1e-12);
    let table = report.table();
    assert!(table.lines().last().unwrap().starts_with("Avg"));
    assert!(!report.notes.is_empty());
}

fn arb_scenes() -> impl Strategy<Value = Vec<Vec<([f64; 2], u8)>>> {
    let pred = ((-4.0f64..4.0, -4.0f64..4.0).prop_map(|(x, y)| [x, y]), 0u8..10);
    prop::collection::vec(prop::collection::vec(pred, 1..7), 1..8)
}

fn build(scenes: &[Vec<([f64; 2], u8)>]) -> Vec<SceneResult> {
    scenes
        .iter()
        .map(|s| result(&s.iter().map(|(e, c)| (*e, *c as f64 / 10.0)).collect::<Vec<_>>()))
        .collect()
}

proptest! {
    #[test]
    fn soft_map_dominates_map(scenes in arb_scenes(), tau in 0.5f64..4.0) {
        let (map, soft) = mean_ap(&build(&scenes), tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&map) && (0.0..=1.0).contains(&soft));
        prop_assert!(soft >= map - 1e-12);
    }

    #[test]
    fn miss_rate_is_monotone_in_tau(fdes in prop::collection::vec(0.0f64..10.0, 1..20), a in 0.1f64..10.0, b in 0.1f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(miss_rate(&fdes, lo).unwrap() >= miss_rate(&fdes, hi).unwrap());
    }

    #[test]
    fn subset_of_modes_never_improves(seed in 0u64..1000, keep in 1usize..6) {
        let mut r = common::rng(seed);
        let gt = common::random_trajectory(&mut r, 8, 1.0);
        let valid = vec![true; 8];
        let preds: Vec<_> = (0..6).map(|_| common::random_trajectory(&mut r, 8, 1.0)).collect();
        let all = min_ade(&preds, &gt, &valid).unwrap();
        let sub = min_ade(&preds[..keep], &gt, &valid).unwrap();
        prop_assert!(all >= 0.0 && all <= sub);
        prop_assert!(min_fde(&preds, &gt, &valid).unwrap() <= min_fde(&preds[..keep], &gt, &valid).unwrap());
    }

    #[test]
    fn mode_order_does_not_matter_with_distinct_confidences(scenes in arb_scenes(), rot in 0usize..6) {
        let mut results = build(&scenes);
        // Distinct confidences so ranking is fully determined by value.
        for (s, r) in results.iter_mut().enumerate() {
            for (m, c) in r.confidences.iter_mut().enumerate() {
                *c += (s * 7 + m) as f64 * 1e-4;
            }
        }
        let rotated: Vec<SceneResult> = results
            .iter()
            .map(|r| {
                let mut r = r.clone();
                let k = rot % r.trajectories.len();
                r.trajectories.rotate_left(k);
                r.confidences.rotate_left(k);
                r
            })
            .collect();
        prop_assert_eq!(mean_ap(&results, 2.0).unwrap(), mean_ap(&rotated, 2.0).unwrap());
        let a = MetricReport::compute(&results, 2.0).unwrap();
        let b = MetricReport::compute(&rotated, 2.0).unwrap();
        prop_assert_eq!(a, b);
    }
}
