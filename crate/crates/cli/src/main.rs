use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use graphlift::ablation::{run_ablation, AblationConfig, Suite};
use graphlift::gradcheck::{run_target, Target, MIN_COORDS, TOLERANCE};
use graphlift::keypoints::KeypointSubset;
use graphlift::layers::write_adjacency_csv;
use graphlift::metrics::{auc, pcp_curve, per_joint_errors, PcpCurve};
use graphlift::pipeline::{train, Pipeline, PipelineConfig, Preset, TrainConfig, TrainLog};
use graphlift::synth::{generate_dataset, load_dataset, save_dataset, GraspSpec};
use graphlift::{Error, ErrorKind};

/// Hand-object keypoint lifting with adaptive graph U-Nets.
///
/// Set GRAPHLIFT_LOG (error, warn, info, debug, trace) to change verbosity;
/// the default is info.
#[derive(Debug, Parser)]
#[command(name = "graphlift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic hand-object dataset (JSON lines).
    Gen(GenArgs),
    /// Train the full pipeline in three stages.
    Train(TrainArgs),
    /// Evaluate a checkpoint: PCP curves, AUC and per-joint errors.
    Eval(EvalArgs),
    /// Run an ablation suite over several seeds.
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write every learned adjacency kernel of a checkpoint as CSV.
    ExportAdjacency(ExportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Number of samples (must be positive).
    #[arg(long)]
    n: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Budget preset: desk (50/200/50 epochs, compact widths) or paper
    /// (5000/10000/5000 epochs, full widths).
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// JSON training config replacing the preset's (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: PathBuf,
    /// Seed for initialization, shuffling and input noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Evaluation dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Report directory, created if missing.
    #[arg(long)]
    report: PathBuf,
    /// Largest PCP threshold (px for 2D, mm for 3D); thresholds step by 1.
    #[arg(long, default_value_t = 50)]
    max_threshold: u32,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Suite: architecture, pooling or adjacency_init.
    #[arg(long)]
    suite: Suite,
    /// Dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Epochs per run.
    #[arg(long, default_value_t = 200)]
    epochs: u64,
    /// Trailing samples held out for evaluation (0 evaluates on the
    /// training inputs).
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON ablation config replacing the flags above except --seeds and
    /// --jobs (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for <suite>_summary.csv and <suite>_runs.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check group: layers, unet or pipeline.
    #[arg(long, default_value = "layers")]
    target: Target,
    /// Seed for parameters, inputs and sampled coordinates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for A0.csv, A1.csv, ...
    #[arg(long)]
    out_dir: PathBuf,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        };
        // Library messages already embed their cause.
        Self {
            code,
            error: anyhow::anyhow!(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAPHLIFT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportAdjacency(a) => cmd_export_adjacency(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(|error| Failure { code: 2, error })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|error| Failure { code: 2, error })?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(|error| Failure { code: 1, error })
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let records = generate_dataset(a.n, a.seed, &GraspSpec::default())?;
    save_dataset(&a.out, &records)?;
    info!("wrote {} samples to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let mut cfg = match &a.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::preset(a.preset),
    };
    cfg.seed = a.seed;
    let model_cfg = match a.preset {
        Preset::Desk => PipelineConfig::desk(),
        Preset::Paper => PipelineConfig::default(),
    };
    let mut pipeline = Pipeline::new(model_cfg, a.seed)?;
    info!(
        "training on {} samples, stage epochs {:?}",
        data.len(),
        cfg.stages.map(|s| s.epochs)
    );
    let mut log = TrainLog::default();
    let outcome = train(&mut pipeline, &data, &cfg, &mut log);
    if let Err(e @ Error::Diverged { .. }) = &outcome {
        warn!("{e}; saving the last good parameters");
    }
    if matches!(outcome, Ok(()) | Err(Error::Diverged { .. })) {
        pipeline.save(&a.out_ckpt)?;
        log.write_csv(&a.log)?;
    }
    outcome?;
    info!("checkpoint written to {}", a.out_ckpt.display());
    Ok(())
}

fn write_curve(dir: &Path, name: &str, curve: &PcpCurve) -> Result<f64, Failure> {
    curve.write_csv(&dir.join(format!("pcp_{name}.csv")))?;
    Ok(auc(curve)?)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let pipeline = Pipeline::load(&a.ckpt)?;
    if a.max_threshold == 0 {
        return Err(Error::Usage("max threshold must be positive".into()).into());
    }
    let thresholds: Vec<f64> = (0..=a.max_threshold).map(f64::from).collect();
    let outputs = pipeline.predict_batch(&data)?;
    let (pred2d, pred3d): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    let gt2d: Vec<_> = data.iter().map(|r| r.gt2d_tensor()).collect();
    let gt3d: Vec<_> = data.iter().map(|r| r.gt3d_tensor()).collect();

    create_dir(&a.report)?;
    let mut auc_csv = String::from("space,subset,auc\n");
    for (space, preds, gts) in [("2d", &pred2d, &gt2d), ("3d", &pred3d, &gt3d)] {
        for subset in [KeypointSubset::All, KeypointSubset::Hand, KeypointSubset::Object] {
            let curve = pcp_curve(preds, gts, &thresholds, subset)?;
            let area = write_curve(&a.report, &format!("{space}_{}", subset.name()), &curve)?;
            auc_csv.push_str(&format!("{space},{},{area}\n", subset.name()));
            println!("auc {space} {:<6} {area:.4}", subset.name());
        }
    }
    let auc_path = a.report.join("auc.csv");
    fs::write(&auc_path, auc_csv)
        .with_context(|| format!("writing {}", auc_path.display()))
        .map_err(|error| Failure { code: 2, error })?;

    let joints = per_joint_errors(&pred3d, &gt3d)?;
    let joints_path = a.report.join("per_joint_3d.csv");
    fs::write(&joints_path, joints.to_csv())
        .with_context(|| format!("writing {}", joints_path.display()))
        .map_err(|error| Failure { code: 2, error })?;
    println!("mean 3d error {:.3} mm", joints.mean());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let records = load_dataset(&a.data)?;
    let mut cfg = match &a.config {
        Some(path) => read_json(path)?,
        None => AblationConfig {
            holdout: a.holdout,
            ..AblationConfig::with_epochs(a.epochs)
        },
    };
    cfg.seeds = a.seeds;
    cfg.jobs = a.jobs;
    let table = run_ablation(a.suite, &records, &cfg)?;
    create_dir(&a.out_dir)?;
    let name = a.suite.name();
    table.write_summary(&a.out_dir.join(format!("{name}_summary.csv")))?;
    table.write_runs(&a.out_dir.join(format!("{name}_runs.csv")))?;
    print!("{}", table.summary_csv());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let reports = run_target(a.target, a.seed)?;
    let mut failed = Vec::new();
    println!("{:<22} {:>7} {:>7} {:>12}  worst", "check", "coords", "skipped", "max_rel_err");
    for r in &reports {
        let worst = r
            .report
            .worst
            .as_ref()
            .map_or_else(|| "-".to_string(), |(name, i)| format!("{name}[{i}]"));
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} {:>7} {:>7} {:>12.3e}  {worst} {status}",
            r.name, r.report.checked, r.report.skipped, r.report.max_rel_err
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all checks below {TOLERANCE:e} over at least {MIN_COORDS} coordinates");
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            error: anyhow::anyhow!("gradient check failed: {}", failed.join(", ")),
        })
    }
}

fn cmd_export_adjacency(a: ExportArgs) -> CmdResult {
    let pipeline = Pipeline::load(&a.ckpt)?;
    create_dir(&a.out_dir)?;
    let layers = pipeline.conv_layers();
    for (i, layer) in layers.iter().enumerate() {
        write_adjacency_csv(&a.out_dir.join(format!("A{i}.csv")), pipeline.store.get(layer.adj))?;
    }
    info!("wrote {} adjacency matrices to {}", layers.len(), a.out_dir.display());
    Ok(())
}
