//! `mtr`: data generation, intention clustering, training, prediction,
//! evaluation and ensembling from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mtr_core::intention::IntentionTable;
use mtr_core::runner::{
    ensemble_records, evaluate, load_predictions, predict, train, Profile, TrainConfig,
};
use mtr_core::scene::{generate_synthetic_scene, load_dataset, save_dataset, write_jsonl, GeneratorSpec};
use mtr_core::selection::EnsembleConfig;

#[derive(Parser)]
#[command(name = "mtr", version, about = "Multimodal motion prediction with motion query pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes into a JSON-lines dataset.
    GenData(GenData),
    /// Cluster ground-truth endpoints into per-category intention points.
    MakeIntentions(MakeIntentions),
    /// Train a model; checkpoints and the step log go to the output directory.
    Train(Train),
    /// Predict the top trajectories of every interest agent.
    Predict(Predict),
    /// Score a prediction file against a dataset.
    Eval(Eval),
    /// Combine prediction files from several models.
    Ensemble(Ensemble),
}

#[derive(Args)]
struct GenData {
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: u64,
    /// Seed of the first scene; scene i uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator settings as TOML; omitted fields keep their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct MakeIntentions {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hyperparameter set providing K when `--k` is absent.
    #[arg(long, default_value = "desk", value_parser = parse_profile)]
    profile: Profile,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
}

#[derive(Args)]
struct Train {
    /// TOML training config; replaces the profile defaults entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk", value_parser = parse_profile)]
    profile: Profile,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    intentions: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "model")]
    model_id: String,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Write the report as JSON here; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Endpoint distance (m) for misses and matches.
    #[arg(long, default_value_t = mtr_core::metrics::DEFAULT_MISS_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct Ensemble {
    /// Prediction files, one per model.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ensemble")]
    model_id: String,
    #[arg(long, default_value_t = 6)]
    top_k: usize,
    /// One of `adaptive-arc`, `adaptive-displacement`, `fixed`.
    #[arg(long, default_value = "adaptive-arc")]
    policy: String,
    /// Pool raw confidences instead of per-model normalized ones.
    #[arg(long)]
    no_renormalize: bool,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: mtr_core::Error| e.to_string())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => GeneratorSpec::default(),
    };
    let scenes = (a.seed..a.seed + a.count)
        .map(|s| generate_synthetic_scene(&spec, s))
        .collect::<mtr_core::Result<Vec<_>>>()?;
    ensure_parent(&a.out)?;
    save_dataset(&scenes, &a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn make_intentions(a: MakeIntentions) -> Result<()> {
    let scenes = load_dataset(&a.data)?;
    let k = a.k.unwrap_or(TrainConfig::profile(a.profile).model.num_modes);
    let table = IntentionTable::build(&scenes, k, a.seed, a.max_iters)?;
    ensure_parent(&a.out)?;
    table.save(&a.out)?;
    println!("wrote K = {k} intention points for {} categories to {}", table.records().len(), a.out.display());
    Ok(())
}

fn run_train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => {
            let mut cfg = TrainConfig::profile(a.profile);
            cfg.apply_env_overrides();
            cfg
        }
    };
    if let Some(p) = a.data {
        cfg.paths.train_data = p;
    }
    if let Some(p) = a.intentions {
        cfg.paths.intentions = p;
    }
    if let Some(p) = a.output_dir {
        cfg.paths.output_dir = p;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if a.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let out = train(&cfg, a.resume.as_deref())?;
    let last = out.steps.last().map_or(f64::NAN, |s| s.total);
    println!("{} steps, final loss {last:.4}", out.steps.len());
    if let Some(v) = out.best_val_min_ade {
        println!("best validation minADE {v:.4}");
    }
    println!("checkpoint {}", out.last_checkpoint.display());
    Ok(())
}

fn run_predict(a: Predict) -> Result<()> {
    ensure_parent(&a.out)?;
    let records = predict(&a.checkpoint, &a.data, &a.out, &a.model_id)?;
    println!("wrote {} predictions to {}", records.len(), a.out.display());
    Ok(())
}

fn run_eval(a: Eval) -> Result<()> {
    let scenes = load_dataset(&a.data)?;
    let records = load_predictions(&a.predictions)?;
    let report = evaluate(&scenes, &records, a.threshold)?;
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", report.table());
    for note in &report.notes {
        println!("note: {note}");
    }
    Ok(())
}

fn run_ensemble(a: Ensemble) -> Result<()> {
    let config = EnsembleConfig {
        top_k: a.top_k,
        renormalize: !a.no_renormalize,
        threshold_policy: a.policy,
        ..EnsembleConfig::default()
    };
    config.validate()?;
    let inputs = a
        .inputs
        .iter()
        .map(|p| load_predictions(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let combined = ensemble_records(&inputs, &config, &a.model_id)?;
    ensure_parent(&a.out)?;
    write_jsonl(&combined, &a.out)?;
    println!("wrote {} combined predictions to {}", combined.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::MakeIntentions(a) => make_intentions(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Ensemble(a) => run_ensemble(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
