//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p mtr-core --test acceptance` runs everything (about 25
//! minutes on one CPU core, dominated by four desk trainings). Pass name
//! fragments as arguments to run a subset, e.g. `-- gradient oracle`.
//! Failures are reported but only turn into a non-zero exit status when
//! `MTR_ACCEPTANCE_STRICT=1`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::{Device, Tensor};
use mtr_core::batch::{Batch, Sample};
use mtr_core::decoder::collect_dynamic_map;
use mtr_core::encoder::{ContextEncoder, ModelConfig, PolylineEncoder};
use mtr_core::intention::{kmeans_plus_plus_init, lloyd, IntentionTable};
use mtr_core::metrics::{mean_ap, min_ade, SceneResult};
use mtr_core::model::MotionTransformer;
use mtr_core::nn::{Builder, Ctx};
use mtr_core::objective::gmm_nll_step_grad;
use mtr_core::runner::{
    ensemble_records, evaluate, infer, lr_schedule, predict_scenes, train_on, Checkpoint, TrainConfig,
};
use mtr_core::scene::{generate_labeled_scene, GeneratorSpec, LabeledScene, Scene, MAP_CHANNELS};
use mtr_core::selection::{
    ensemble_combine, ensemble_threshold, nms_trajectories, Candidate, EnsembleConfig, PredictionRecord,
    PredictionSet,
};
use rand::Rng;

const OVERFIT_SCENES: u64 = 64;
const BRANCH_TRAIN_SCENES: u64 = 512;
const HELD_OUT_SCENES: u64 = 500;
const HELD_OUT_SEED: u64 = 1_000_000;
const ENSEMBLE_SEEDS: [u64; 3] = [0, 1, 2];
const TAU: f64 = 2.0;

type Outcome = (bool, String);

struct Harness {
    filters: Vec<String>,
    results: Vec<(String, bool)>,
}

impl Harness {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, check: impl FnOnce() -> Outcome) {
        if !self.wants(name) {
            return;
        }
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(outcome) => outcome,
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
        self.results.push((name.to_string(), pass));
    }
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(1001);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p: [f64; 5] = [
            r.random_range(-2.0..2.0),
            r.random_range(-2.0..2.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.5..1.5),
        ];
        let gt = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let f = |q: &[f64; 5]| gmm_nll_step_grad([q[0], q[1]], [q[2], q[3]], q[4], gt).unwrap().0;
        let (_, g) = gmm_nll_step_grad([p[0], p[1]], [p[2], p[3]], p[4], gt).unwrap();
        for i in 0..5 {
            let (mut up, mut dn) = (p, p);
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} over 100 draws (< 1e-4)"),
    )
}

fn candidates(rows: &[(Vec<[f64; 2]>, f64)], model: &str) -> PredictionSet {
    PredictionSet {
        scene_id: "s".into(),
        agent_id: 0,
        entries: rows
            .iter()
            .map(|(t, c)| Candidate {
                trajectory: t.clone(),
                confidence: *c,
                model_id: model.into(),
            })
            .collect(),
    }
}

fn oracle() -> Outcome {
    let mut r = common::rng(1002);
    let mut kmeans_worst: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(10..200);
        let k = r.random_range(1..12).min(n);
        let pts = common::random_points(&mut r, n, 20.0);
        let init = kmeans_plus_plus_init(&pts, k, r.random()).unwrap();
        let got = lloyd(&pts, init.clone(), 100).sse();
        let want = common::lloyd_sse(&pts, &init, 100);
        kmeans_worst = kmeans_worst.max((got - want).abs());
    }

    let mut nms_bad = 0;
    for _ in 0..200 {
        let rows: Vec<_> = (0..r.random_range(1..30))
            .map(|_| {
                let t = common::random_trajectory(&mut r, 6, 2.0);
                (t, r.random_range(0..12) as f64 / 12.0)
            })
            .collect();
        let got = nms_trajectories(&candidates(&rows, "m"), 2.5, 6).unwrap();
        let ends: Vec<_> = rows.iter().map(|(t, c)| (*t.last().unwrap(), *c)).collect();
        let want: Vec<_> = common::nms_indices(&ends, 2.5, 6).into_iter().map(|i| rows[i].clone()).collect();
        let got: Vec<_> = got.entries.into_iter().map(|e| (e.trajectory, e.confidence)).collect();
        nms_bad += (got != want) as usize;
    }

    let mut ens_bad = 0;
    for _ in 0..200 {
        let models: Vec<Vec<(Vec<[f64; 2]>, f64)>> = (0..r.random_range(1..5))
            .map(|_| {
                (0..6)
                    .map(|_| {
                        let t = common::random_trajectory(&mut r, 8, 3.0);
                        (t, r.random_range(1..10) as f64 / 10.0)
                    })
                    .collect()
            })
            .collect();
        let sets: Vec<_> = models.iter().enumerate().map(|(i, m)| candidates(m, &i.to_string())).collect();
        let got = ensemble_combine(&sets, &EnsembleConfig::default()).unwrap();
        let want = common::ensemble_rows(&models, 6, true);
        let same = got.entries.len() == want.len()
            && got
                .entries
                .iter()
                .zip(&want)
                .all(|(e, (t, c))| &e.trajectory == t && (e.confidence - c).abs() < 1e-12);
        ens_bad += (!same) as usize;
    }

    let mut map_bad = 0;
    for _ in 0..200 {
        let n = r.random_range(1..80);
        let centers = common::random_points(&mut r, n, 40.0);
        let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
        mask[0] = true;
        let steps = r.random_range(1..17);
        let reference = common::random_trajectory(&mut r, steps, 3.0);
        let limit = r.random_range(1..32);
        let got = collect_dynamic_map(&centers, &mask, &reference, limit).unwrap();
        map_bad += (got != common::collect_by_scan(&centers, &mask, &reference, limit)) as usize;
    }
    (
        kmeans_worst <= 1e-9 && nms_bad == 0 && ens_bad == 0 && map_bad == 0,
        format!(
            "k-means max SSE gap {kmeans_worst:.1e}; mismatches nms {nms_bad}/200, ensemble {ens_bad}/200, map collection {map_bad}/200"
        ),
    )
}

fn threshold_table() -> Outcome {
    let table: Vec<f64> = [0.0, 10.0, 30.0, 50.0, 100.0].iter().map(|&l| ensemble_threshold(l)).collect();
    let expected = [2.5, 2.5, 3.25, 3.5, 3.5];
    let exact = table.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12);
    let sweep: Vec<f64> = (0..1000).map(|i| ensemble_threshold(i as f64 * 0.15)).collect();
    let bounded = sweep.iter().all(|d| (2.5..=3.5).contains(d));
    let monotone = sweep.windows(2).all(|w| w[0] <= w[1]);
    (
        exact && bounded && monotone,
        format!("table {table:?}; 1000-point sweep bounded {bounded}, monotone {monotone}"),
    )
}

fn desk_config(seed: u64, dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.seed = seed;
    cfg.val_fraction = 0.0;
    cfg.paths.output_dir = dir.to_path_buf();
    cfg
}

fn train_desk(scenes: &[Scene], seed: u64) -> (MotionTransformer, IntentionTable, TrainConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(seed, dir.path());
    let table = IntentionTable::build(scenes, cfg.model.num_modes, seed, 100).unwrap();
    let out = train_on(&cfg, scenes, &table, None).unwrap();
    let model = Checkpoint::load(&out.last_checkpoint).unwrap().build_model().unwrap();
    (model, table, cfg)
}

fn labeled(seeds: std::ops::Range<u64>) -> Vec<LabeledScene> {
    let spec = GeneratorSpec::default();
    seeds.map(|s| generate_labeled_scene(&spec, s).unwrap()).collect()
}

fn overfit() -> Outcome {
    let scenes: Vec<Scene> = labeled(0..OVERFIT_SCENES).into_iter().map(|l| l.scene).collect();
    let (model, table, cfg) = train_desk(&scenes, 0);
    let preds = predict_scenes(&model, &table, &cfg.vectorize, &scenes, "m", &EnsembleConfig::default()).unwrap();
    let report = evaluate(&scenes, &preds, TAU).unwrap();
    let (ade, miss) = (report.average.min_ade, report.average.miss_rate);
    (
        ade < 0.5 && miss < 0.05,
        format!("desk profile, {OVERFIT_SCENES} scenes, {} epochs: train minADE {ade:.3} m (< 0.5), miss rate {miss:.3} (< 0.05)", cfg.epochs),
    )
}

/// The branch-scene model shared by the multimodality, refinement and
/// ensemble checks.
struct BranchRun {
    held: Vec<LabeledScene>,
    held_scenes: Vec<Scene>,
    model: MotionTransformer,
    table: IntentionTable,
    cfg: TrainConfig,
    preds: Vec<PredictionRecord>,
}

fn branch_run(train: &[Scene]) -> BranchRun {
    let held = labeled(HELD_OUT_SEED..HELD_OUT_SEED + HELD_OUT_SCENES);
    let held_scenes: Vec<Scene> = held.iter().map(|l| l.scene.clone()).collect();
    let (model, table, cfg) = train_desk(train, ENSEMBLE_SEEDS[0]);
    let preds = predict_scenes(&model, &table, &cfg.vectorize, &held_scenes, "m0", &EnsembleConfig::default()).unwrap();
    BranchRun {
        held,
        held_scenes,
        model,
        table,
        cfg,
        preds,
    }
}

fn multimodality(run: &BranchRun) -> Outcome {
    let mut covered = 0;
    for (l, p) in run.held.iter().zip(&run.preds) {
        assert_eq!(l.scene.scene_id, p.scene_id);
        let all = l.branch_endpoints.iter().all(|e| {
            p.trajectories.iter().take(3).any(|t| {
                let q = t.last().unwrap();
                (q[0] - e[0]).hypot(q[1] - e[1]) <= 2.0
            })
        });
        covered += all as usize;
    }
    let frac = covered as f64 / run.held.len() as f64;
    (
        frac >= 0.8,
        format!(
            "top-3 covers all 3 branches in {frac:.3} of {} held-out scenes (>= 0.80); trained on {BRANCH_TRAIN_SCENES}",
            run.held.len()
        ),
    )
}

fn refinement(run: &BranchRun) -> Outcome {
    let samples = Sample::from_scenes(&run.held_scenes, &run.table, &run.cfg.vectorize).unwrap();
    let raw = infer(&run.model, &samples, 16).unwrap();
    let layers = run.cfg.model.n_dec_layers;
    let mut per_layer = vec![0.0; layers];
    let mut n = 0.0;
    for (r, s) in raw.iter().zip(&samples) {
        if !s.vectorized.gt_valid.iter().any(|&v| v) {
            continue;
        }
        n += 1.0;
        for (l, modes) in r.layers.iter().enumerate() {
            per_layer[l] += min_ade(modes, &s.vectorized.gt_future, &s.vectorized.gt_valid).unwrap();
        }
    }
    per_layer.iter_mut().for_each(|v| *v /= n);
    let (first, last) = (per_layer[0], per_layer[layers - 1]);
    let shown: Vec<String> = per_layer.iter().map(|v| format!("{v:.3}")).collect();
    (
        last <= first,
        format!("held-out minADE over all K modes per layer [{}]; final {last:.4} <= first {first:.4}", shown.join(", ")),
    )
}

fn ensemble(run: &BranchRun, train: &[Scene]) -> Outcome {
    let ecfg = EnsembleConfig::default();
    let mut all = vec![run.preds.clone()];
    for &seed in &ENSEMBLE_SEEDS[1..] {
        let (model, table, cfg) = train_desk(train, seed);
        all.push(predict_scenes(&model, &table, &cfg.vectorize, &run.held_scenes, &format!("m{seed}"), &ecfg).unwrap());
    }
    let singles: Vec<f64> = all
        .iter()
        .map(|p| evaluate(&run.held_scenes, p, TAU).unwrap().average.soft_map)
        .collect();
    let combined = ensemble_records(&all, &ecfg, "ensemble").unwrap();
    let ens = evaluate(&run.held_scenes, &combined, TAU).unwrap().average.soft_map;
    let best = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shown: Vec<String> = singles.iter().map(|v| format!("{v:.4}")).collect();
    (
        ens >= best,
        format!("held-out Soft mAP singles [{}], ensemble {ens:.4} (>= best {best:.4})", shown.join(", ")),
    )
}

fn check(ok: bool, what: &str, failures: &mut Vec<String>) {
    if !ok {
        failures.push(what.to_string());
    }
}

fn structural() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut r = common::rng(1003);
    let polyline = PolylineEncoder::new(&Builder::new(1), MAP_CHANNELS, 32, vec![1.0; MAP_CHANNELS]).unwrap();
    let n: usize = 2 * 6 * MAP_CHANNELS;
    let feats: Vec<f32> = (0..n).map(|_| r.random_range(-2.0f32..2.0)).collect();
    let feats = Tensor::from_vec(feats, (1, 2, 6, MAP_CHANNELS), &Device::Cpu).unwrap();
    let mut pm = vec![1f32; 12];
    pm[6..].fill(0.0);
    let out = polyline.forward(&feats, &Tensor::from_vec(pm, (1, 2, 6), &Device::Cpu).unwrap()).unwrap();
    check(common::host(&out.narrow(1, 1, 1).unwrap()).iter().all(|&v| v == 0.0), "masked polyline is zero", &mut failures);
    let rev = Tensor::new(&[5u32, 4, 3, 2, 1, 0], &Device::Cpu).unwrap();
    let ones = Tensor::ones((1, 2, 6), candle_core::DType::F32, &Device::Cpu).unwrap();
    let a = polyline.forward(&feats, &ones).unwrap();
    let b = polyline.forward(&feats.index_select(&rev, 2).unwrap(), &ones).unwrap();
    check(common::max_abs_diff(&a, &b) < 1e-6, "point permutation invariance", &mut failures);

    let cfg = ModelConfig {
        n_dec_layers: 6,
        ..common::small_config()
    };
    let enc = ContextEncoder::new(&Builder::new(2), &cfg).unwrap();
    let rand_t = |r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
        let v: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| r.random_range(-3.0f32..3.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    };
    let (ta, tm) = (rand_t(&mut r, &[1, 2, 32]), rand_t(&mut r, &[1, 5, 32]));
    let (pa, pmp) = (rand_t(&mut r, &[1, 2, 2]), rand_t(&mut r, &[1, 5, 2]));
    let ma = Tensor::ones((1, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
    let mm = Tensor::new(&[[1f32, 1.0, 0.0, 1.0, 1.0]], &Device::Cpu).unwrap();
    let base = enc.encode_context(&ta, &tm, &pa, &pmp, &ma, &mm, &Ctx::eval()).unwrap();
    let perm = Tensor::new(&[3u32, 0, 4, 2, 1], &Device::Cpu).unwrap();
    let inv = Tensor::new(&[1u32, 4, 3, 0, 2], &Device::Cpu).unwrap();
    let permuted = enc
        .encode_context(
            &ta,
            &tm.index_select(&perm, 1).unwrap(),
            &pa,
            &pmp.index_select(&perm, 1).unwrap(),
            &ma,
            &mm.index_select(&perm, 1).unwrap(),
            &Ctx::eval(),
        )
        .unwrap();
    let back = permuted.map_tokens.index_select(&inv, 1).unwrap();
    check(common::max_abs_diff(&base.map_tokens, &back) < 1e-5, "map token equivariance", &mut failures);
    check(
        common::host(&base.map_tokens.narrow(1, 2, 1).unwrap()).iter().all(|&v| v == 0.0),
        "masked token output is zero",
        &mut failures,
    );

    let scenes = common::scenes(0..20);
    let (_, samples) = common::samples(&scenes, cfg.num_modes);
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let model = MotionTransformer::new(&cfg, 3).unwrap();
    let out = model.forward(&batch, &Ctx::eval()).unwrap();
    check(out.layers.len() == 6, "six decoder layers", &mut failures);
    check(out.layers[0].anchors == batch.host.intentions, "layer-0 anchors", &mut failures);
    for j in 0..out.layers.len() {
        let layer = &out.layers[j];
        let (b, k, t) = (batch.size(), cfg.num_modes, cfg.future_steps);
        check(layer.gmm.mu.dims() == [b, k, t, 2], "mu shape", &mut failures);
        let probs_ok = layer
            .probs_host()
            .unwrap()
            .iter()
            .all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        check(probs_ok, "mode probabilities sum to one", &mut failures);
        let sound = layer
            .collected
            .iter()
            .enumerate()
            .all(|(i, modes)| modes.iter().flatten().all(|&p| batch.host.map_mask[i][p]));
        check(sound, "collected polylines are valid", &mut failures);
        if j > 0 {
            let ends: Vec<Vec<[f64; 2]>> = out.layers[j - 1]
                .trajectories_host()
                .unwrap()
                .iter()
                .map(|m| m.iter().map(|t| *t.last().unwrap()).collect())
                .collect();
            check(layer.anchors == ends, "anchor chain", &mut failures);
        }
    }

    let mut dominated = true;
    for _ in 0..100 {
        let results: Vec<SceneResult> = (0..r.random_range(1..6))
            .map(|_| SceneResult {
                category: mtr_core::scene::Category::Vehicle,
                trajectories: (0..6).map(|_| vec![[r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]]).collect(),
                confidences: (0..6).map(|_| r.random_range(0..5) as f64).collect(),
                gt: vec![[0.0, 0.0]],
                gt_valid: vec![true],
            })
            .collect();
        let (map, soft) = mean_ap(&results, TAU).unwrap();
        dominated &= soft >= map;
    }
    check(dominated, "soft mAP >= mAP", &mut failures);
    let paper = TrainConfig::paper();
    check((0..100).all(|e| lr_schedule(e + 1, &paper) <= lr_schedule(e, &paper)), "lr schedule non-increasing", &mut failures);

    let secs = start.elapsed().as_secs_f64();
    check(secs < 300.0, "runtime under 5 min", &mut failures);
    let detail = if failures.is_empty() {
        "masks, permutation equivariance, shapes, normalization, anchor chain, map soundness, metric and schedule invariants hold; the per-module suites run under cargo test".to_string()
    } else {
        format!("violated: {}", failures.join(", "))
    };
    (failures.is_empty(), detail)
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut h = Harness {
        filters,
        results: Vec::new(),
    };
    h.run("gradient", gradient);
    h.run("oracle", oracle);
    h.run("threshold-table", threshold_table);
    h.run("structural", structural);
    h.run("overfit", overfit);

    let needs_branch = ["multimodality", "refinement", "ensemble"].iter().any(|n| h.wants(n));
    if needs_branch {
        let train: Vec<Scene> = labeled(0..BRANCH_TRAIN_SCENES).into_iter().map(|l| l.scene).collect();
        let run = catch_unwind(AssertUnwindSafe(|| branch_run(&train)));
        match run {
            Ok(run) => {
                h.run("multimodality", || multimodality(&run));
                h.run("refinement", || refinement(&run));
                h.run("ensemble", || ensemble(&run, &train));
            }
            Err(_) => {
                for name in ["multimodality", "refinement", "ensemble"] {
                    h.run(name, || (false, "branch-scene training failed".into()));
                }
            }
        }
    }

    let failed: Vec<&str> = h.results.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        h.results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() && std::env::var("MTR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
