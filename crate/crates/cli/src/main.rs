use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dvlta_core::harness::gradcheck::{run_all, run_case, GradCheckConfig, CASES};
use dvlta_core::harness::plot::{scatter_svg, scores_csv};
use dvlta_core::harness::{
    cross_dataset_eval, evaluate, predict, synth_dataset, Checkpoint, Dataset, EvalReport, HarnessError, RunConfig,
    SynthConfig, Trainer,
};
use dvlta_core::storage::{load_manifest, validate_manifest, Split, StorageError};
use serde_json::{Map, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

/// Dual-stream no-reference video quality engine.
#[derive(Parser, Debug)]
#[command(name = "dvlta", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with a planted quality direction.
    Synth(SynthArgs),
    /// Train a model and save a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on other corpora without retraining.
    CrossEval(CrossEvalArgs),
    /// Score a single manifest entry.
    Score(ScoreArgs),
    /// Compare analytic and finite-difference gradients of every module.
    GradCheck(GradCheckArgs),
    /// Export an evaluation report as CSV and an SVG scatter plot.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; `manifest.json` is written inside it.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with synthetic-corpus settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_videos: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    direction_seed: Option<u64>,
    #[arg(long)]
    dataset: Option<String>,
}

/// Run-configuration overrides shared by commands that build a model.
#[derive(Args, Debug, Default)]
struct RunOverrides {
    /// JSON file whose keys are run-configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width; taken from the manifest when not set anywhere.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    num_frames: Option<usize>,
    /// text_guided, concat or add.
    #[arg(long)]
    fusion_mode: Option<String>,
    /// tadaconv, c3d or r2plus1d.
    #[arg(long)]
    temporal_conv: Option<String>,
    /// Comma-separated subset of bvfe, tcm, vbtc.
    #[arg(long, value_delimiter = ',')]
    branches: Option<Vec<String>>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Any other field as KEY=JSON, e.g. `--set alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    run: RunOverrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest the checkpoint was trained on.
    #[arg(long)]
    train_manifest: PathBuf,
    /// Repeat for each corpus to evaluate.
    #[arg(long = "test-manifest", required = true)]
    test_manifests: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// `video_id` of the manifest entry.
    video_entry: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// JSON file with gradient-check settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run one case only.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(CASES))]
    case: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    /// Check every parameter entry instead of a sample.
    #[arg(long)]
    all_entries: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Evaluation report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Directory for `scores.csv` and `scatter.svg`.
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Self::usage(e.to_string())
        } else {
            Self::data(e.to_string())
        }
    }
}

impl From<StorageError> for Failure {
    fn from(e: StorageError) -> Self {
        Self::data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CrossEval(a) => cross_eval(a),
        Command::Score(a) => score(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_json_object(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::usage(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Failure::usage(format!("{}: {e}", path.display()))),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Failure::data(format!("{}: {e}", parent.display())))?;
            }
            fs::write(p, text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let mut m = match &a.config {
        Some(p) => read_json_object(p)?,
        None => Map::new(),
    };
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.into(), v);
        }
    };
    put("n_videos", a.n_videos.map(Value::from));
    put("dim", a.dim.map(Value::from));
    put("noise", a.noise.map(Value::from));
    put("seed", a.seed.map(Value::from));
    put("direction_seed", a.direction_seed.map(Value::from));
    put("dataset", a.dataset.map(Value::from));
    let cfg: SynthConfig =
        serde_json::from_value(Value::Object(m)).map_err(|e| Failure::usage(format!("invalid synth config: {e}")))?;
    let out = synth_dataset(&cfg, &a.out)?;
    println!("wrote {} videos to {}", out.manifest.entries.len(), out.manifest_path.display());
    Ok(())
}

/// Merges the config file, explicit flags and `--set` pairs, in that order.
/// `dim` falls back to `manifest_dim` when none of them sets it.
fn run_config(o: &RunOverrides, manifest_dim: usize) -> Result<RunConfig, Failure> {
    let mut m = match &o.config {
        Some(p) => read_json_object(p)?,
        None => Map::new(),
    };
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.into(), v);
        }
    };
    put("epochs", o.epochs.map(Value::from));
    put("lr", o.lr.map(Value::from));
    put("batch", o.batch.map(Value::from));
    put("seed", o.seed.map(Value::from));
    put("dim", o.dim.map(Value::from));
    put("num_frames", o.num_frames.map(Value::from));
    put("fusion_mode", o.fusion_mode.clone().map(Value::from));
    put("temporal_conv", o.temporal_conv.clone().map(Value::from));
    put("branches", o.branches.clone().map(Value::from));
    put("temperature", o.temperature.map(Value::from));
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=JSON, got {kv:?}")))?;
        // Bare words are taken as strings so `--set cbam_order=sequential` works.
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::from(v));
        m.insert(k.into(), v);
    }
    m.entry("dim").or_insert_with(|| Value::from(manifest_dim));
    Ok(RunConfig::from_json(&Value::Object(m).to_string())?)
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset, Failure> {
    let manifest = load_manifest(path)?;
    validate_manifest(&manifest).into_result()?;
    Ok(Dataset::load(&manifest, &cfg.active_branches())?)
}

/// Width of the guide embedding, read before the model config is known.
fn manifest_dim(path: &Path) -> Result<usize, Failure> {
    let manifest = load_manifest(path)?;
    let guide = dvlta_core::storage::read_tensor(manifest.resolve(&manifest.text_embeddings.guide))?;
    guide
        .shape()
        .last()
        .copied()
        .ok_or_else(|| Failure::data("guide text embedding is a scalar"))
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = run_config(&a.run, manifest_dim(&a.manifest)?)?;
    let data = load_dataset(&a.manifest, &cfg)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg, &data)?;
    eprintln!("epoch 0: train loss {:.6}", trainer.initial_log()?.train_loss);
    for _ in 0..cfg.epochs {
        let log = trainer.epoch()?;
        eprintln!(
            "epoch {}: batch loss {:.6}, train loss {:.6} ({:.1}s)",
            log.epoch,
            log.batch_loss.unwrap_or(f64::NAN),
            log.train_loss,
            start.elapsed().as_secs_f64()
        );
    }
    let log = trainer.log.clone();
    let ckpt = trainer.checkpoint;
    ckpt.save(&a.out)?;
    if let Some(p) = &a.log {
        write_output(Some(p), &serde_json::to_string_pretty(&log).expect("log serializes"))?;
    }
    let report = evaluate(&ckpt, &data, Some(Split::Test))?;
    println!(
        "saved {} ({} parameters); test SROCC {:.4} PLCC {:.4}",
        a.out.display(),
        ckpt.store.len(),
        report.srocc,
        report.plcc
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>, Failure> {
    match s {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        other => Err(Failure::usage(format!("unknown split {other:?}; use train, val, test or all"))),
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.manifest, &ckpt.config)?;
    let report = evaluate(&ckpt, &data, split)?;
    eprintln!("{} [{}] n={} SROCC {:.4} PLCC {:.4}", report.dataset, report.split, report.n, report.srocc, report.plcc);
    write_output(a.out.as_deref(), &report.to_json())
}

fn cross_eval(a: CrossEvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let train = load_dataset(&a.train_manifest, &ckpt.config)?;
    let tests = a
        .test_manifests
        .iter()
        .map(|p| load_dataset(p, &ckpt.config))
        .collect::<Result<Vec<_>, _>>()?;
    let cross = cross_dataset_eval(&ckpt, &train, &tests)?;
    for r in &cross.reports {
        eprintln!("{} n={} SROCC {:.4} PLCC {:.4}", r.dataset, r.n, r.srocc, r.plcc);
    }
    write_output(a.out.as_deref(), &serde_json::to_string_pretty(&cross).expect("report serializes"))
}

fn score(a: ScoreArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.manifest, &ckpt.config)?;
    let idx = data
        .records
        .iter()
        .position(|r| r.video_id == a.video_entry)
        .ok_or_else(|| Failure::data(format!("no entry {:?} in {}", a.video_entry, a.manifest.display())))?;
    let rows = predict(&ckpt, &data, &[idx])?;
    println!("{}", serde_json::to_string_pretty(&rows[0]).expect("row serializes"));
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CmdResult {
    let mut m = match &a.config {
        Some(p) => read_json_object(p)?,
        None => Map::new(),
    };
    if let Some(s) = a.seed {
        m.insert("seed".into(), s.into());
    }
    if let Some(d) = a.dim {
        m.insert("dim".into(), d.into());
    }
    if a.all_entries {
        m.insert("entries_per_param".into(), Value::Null);
    }
    let cfg: GradCheckConfig =
        serde_json::from_value(Value::Object(m)).map_err(|e| Failure::usage(format!("invalid grad-check config: {e}")))?;
    let cases = match &a.case {
        Some(c) => vec![run_case(c, &cfg)?],
        None => run_all(&cfg)?,
    };
    let mut failed = 0;
    for c in &cases {
        let worst = c.report.worst().map_or("-", |w| w.name.as_str());
        println!(
            "{:<24} max rel err {:.3e}  worst {:<28} {:>6.2}s  {}",
            c.name,
            c.report.max_rel_error(),
            worst,
            c.seconds,
            if c.passed() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(Failure::data(format!("{failed} of {} cases exceed tolerance {:e}", cases.len(), cfg.tol)));
    }
    Ok(())
}

fn plot(a: PlotArgs) -> CmdResult {
    let text = fs::read_to_string(&a.report).map_err(|e| Failure::data(format!("{}: {e}", a.report.display())))?;
    let report = EvalReport::from_json(&text)?;
    let csv = a.out.join("scores.csv");
    let svg = a.out.join("scatter.svg");
    write_output(Some(&csv), &scores_csv(&report))?;
    write_output(Some(&svg), &scatter_svg(&report))?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}
