//! Command-line interface: dataset generation, validation, tuple mining,
//! training, evaluation, runtime benchmarking, and descriptor export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{self, ConfigError};
use crate::dataio::{load_sequence, save_sequence, DataError, ScanRecord};
use crate::manifest::{ManifestError, RunManifest};
use crate::mining::{
    build_ground_truth, mine_tuples, write_ground_truth_csv, write_tuples_csv, MiningConfig,
    MiningError,
};
use crate::model::{load_checkpoint, save_checkpoint, Aggregator, ModelError};
use crate::retrieval::{
    benchmark_runtime, evaluate, save_descriptor_dump, write_report, DescriptorDatabase,
    RetrievalError,
};
use crate::synthgen::{generate, OrchardSpec, SynthError};
use crate::tensor::Tensor;
use crate::training::{
    eval_cloud, train, write_history_csv, TrainError, TrainSettings,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Errors carrying their process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: e.to_string(),
    }
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        data_err(e)
    }
}
impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        data_err(e)
    }
}
impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        data_err(e)
    }
}
impl From<MiningError> for CliError {
    fn from(e: MiningError) -> Self {
        data_err(e)
    }
}
impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::CheckpointIo { .. } | ModelError::CheckpointFormat { .. } => data_err(e),
            other => runtime_err(other),
        }
    }
}
impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        runtime_err(e)
    }
}
impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        data_err(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(inner) => data_err(inner),
            TrainError::Mining(inner) => data_err(inner),
            TrainError::InvalidLossConfig(_) | TrainError::NoTuples(_) => data_err(e),
            other => runtime_err(other),
        }
    }
}
impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime_err(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pgap",
    version,
    about = "LiDAR place recognition: descriptor training, retrieval evaluation, synthetic benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic orchard sequence in the scans/poses/segments layout.
    Generate(GenerateArgs),
    /// Load a sequence directory and check every consistency invariant.
    Validate(ValidateArgs),
    /// Mine training tuples and the evaluation ground truth to CSV.
    Mine(MineArgs),
    /// Train a descriptor model and write the best checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint: recall@1..25, recall@1%, per-segment recall@1.
    Evaluate(EvaluateArgs),
    /// Time descriptor extraction over a batch of scans.
    Benchmark(BenchmarkArgs),
    /// Export descriptors for a sequence to a binary dump.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// `key = value` generator spec file; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output sequence directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Sequence directory to check.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Sequence directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for tuples.csv and ground_truth.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional training config file (its mining.* keys apply).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mining seed override.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// One or more training sequence directories.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Validation sequence directory.
    #[arg(long)]
    pub val: PathBuf,
    /// `key = value` training config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint output path; history CSV and manifest are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Disable the segment-consistency auxiliary loss.
    #[arg(long)]
    pub no_slc: bool,
    /// Aggregator override: gap, pfi, or combined.
    #[arg(long)]
    pub aggregator: Option<String>,
    /// Seed override for initialization, shuffling, and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Sequence directory to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Require true revisits to share the query's segment.
    #[arg(long)]
    pub segment_aware: bool,
    /// Report path prefix; `.json` and `.csv` are appended.
    #[arg(long)]
    pub out: PathBuf,
    /// Points per scan after downsampling.
    #[arg(long, default_value_t = 10_000)]
    pub num_points: usize,
    /// True-revisit radius in meters.
    #[arg(long, default_value_t = 10.0)]
    pub eval_radius: f64,
    /// Revisit-exclusion window in frames.
    #[arg(long, default_value_t = 50)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scans per timed batch.
    #[arg(long, default_value_t = 20)]
    pub batch: usize,
    /// Timed repetitions.
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Points per synthetic benchmark scan.
    #[arg(long, default_value_t = 10_000)]
    pub points: usize,
    /// Optional JSON output path (always printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Sequence directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Descriptor dump output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Points per scan after downsampling.
    #[arg(long, default_value_t = 10_000)]
    pub num_points: usize,
}

/// Run one parsed command; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Mine(args) => cmd_mine(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let (spec, snapshot) = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(data_err)?;
            (config::orchard_spec_from_str(&text)?, text)
        }
        None => (OrchardSpec::default(), String::from("# defaults\n")),
    };
    spec.validate()?;

    std::fs::create_dir_all(&args.out).map_err(runtime_err)?;
    let mut manifest = RunManifest::new(
        vec!["generate".into(), args.out.display().to_string()],
        snapshot,
    )
    .with_seed("orchard", spec.seed);
    if let Some(path) = &args.spec {
        manifest.hash_input(path)?;
    }
    // keep the manifest outside the sequence directory so identical seeds
    // produce byte-identical directory contents
    manifest.save(&args.out.with_extension("manifest.json"))?;

    let (records, meta) = generate(&spec)?;
    save_sequence(&args.out, &records)?;
    println!(
        "generated {} frames, {} segments -> {}",
        meta.frame_count,
        meta.num_segments,
        args.out.display()
    );
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let (records, meta) = load_sequence(&args.data)?;
    for record in &records {
        record.cloud.validate()?;
        record.pose.validate(record.cloud.frame_index)?;
    }
    println!(
        "ok: {} frames, {} segments, {} points total",
        meta.frame_count,
        meta.num_segments,
        records.iter().map(|r| r.cloud.len()).sum::<usize>()
    );
    Ok(())
}

fn cmd_mine(args: MineArgs) -> Result<(), CliError> {
    let settings = match &args.config {
        Some(path) => config::load_train_settings(path)?,
        None => TrainSettings::default(),
    };
    let mut mining: MiningConfig = (&settings.mining).into();
    if let Some(seed) = args.seed {
        mining.seed = seed;
    }

    let (records, _) = load_sequence(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(runtime_err)?;
    let mut manifest = RunManifest::new(
        vec!["mine".into(), args.data.display().to_string()],
        serde_json::to_string_pretty(&settings.mining).expect("config serializes"),
    )
    .with_seed("mining", mining.seed);
    manifest.hash_input_dir(&args.data)?;
    manifest.save(&args.out.join("manifest.json"))?;

    let outcome = mine_tuples(&records, &mining)?;
    let gt = build_ground_truth(&records, &mining, true);
    write_tuples_csv(&args.out.join("tuples.csv"), &outcome.tuples)?;
    write_ground_truth_csv(&args.out.join("ground_truth.csv"), &gt)?;
    println!(
        "mined {} tuples ({} anchors without a valid positive) -> {}",
        outcome.tuples.len(),
        outcome.anchors_without_positive,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut settings = match &args.config {
        Some(path) => config::load_train_settings(path)?,
        None => TrainSettings::default(),
    };
    if args.no_slc {
        settings.loss.slc_enabled = false;
    }
    if let Some(agg) = &args.aggregator {
        settings.model.aggregator = agg
            .parse::<Aggregator>()
            .map_err(|e| data_err(format!("--aggregator: {e}")))?;
    }
    if let Some(seed) = args.seed {
        settings.optim.seed = seed;
    }

    let mut manifest = RunManifest::new(
        command_line("train", &args.out),
        serde_json::to_string_pretty(&settings).expect("config serializes"),
    )
    .with_seed("optim", settings.optim.seed)
    .with_seed("mining", settings.mining.seed);
    for dir in &args.data {
        manifest.hash_input_dir(dir)?;
    }
    manifest.hash_input_dir(&args.val)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(runtime_err)?;
        }
    }
    manifest.save(&args.out.with_extension("manifest.json"))?;

    let mut train_data = Vec::new();
    for dir in &args.data {
        train_data.push(load_sequence(dir)?);
    }
    let val_data = load_sequence(&args.val)?;

    let outcome = train(&train_data, &val_data, &settings, |stats| {
        println!(
            "epoch {} L={:.6} L_T={:.6} L_S={:.6} val_recall@1={:.4}",
            stats.epoch, stats.loss, stats.triplet_loss, stats.slc_loss, stats.val_recall_at_1
        );
    })?;

    save_checkpoint(
        &args.out,
        &outcome.model,
        settings.optim.seed,
        outcome.best_epoch,
        &outcome.history,
    )?;
    write_history_csv(&args.out.with_extension("history.csv"), &outcome.history)?;
    println!(
        "best epoch {} val_recall@1={:.4} -> {}",
        outcome.best_epoch,
        outcome.best_recall,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (model, _header) = load_checkpoint(&args.ckpt)?;
    let (records, meta) = load_sequence(&args.data)?;
    let mining = MiningConfig {
        eval_radius: args.eval_radius,
        revisit_exclusion_window: args.window,
        ..MiningConfig::default()
    };

    let mut manifest = RunManifest::new(
        command_line("evaluate", &args.out),
        format!(
            "segment_aware = {}\nnum_points = {}\neval_radius = {}\nwindow = {}",
            args.segment_aware, args.num_points, args.eval_radius, args.window
        ),
    );
    manifest.hash_input(&args.ckpt)?;
    manifest.hash_input_dir(&args.data)?;
    manifest.save(&args.out.with_extension("manifest.json"))?;

    let db = describe_sequence(&model, &records, args.num_points)?;
    let gt = build_ground_truth(&records, &mining, args.segment_aware);
    let report = evaluate(&db, &gt)?;
    write_report(&args.out, &report)?;
    println!(
        "{}: recall@1={:.4} recall@1%={:.4} over {} queries",
        meta.name,
        report.recall_at(1),
        report.recall_at_1pct,
        report.query_count
    );
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<(), CliError> {
    if args.batch < 1 || args.reps < 1 || args.points < 1 {
        return Err(data_err("--batch, --reps, and --points must all be >= 1"));
    }
    let (model, _header) = load_checkpoint(&args.ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE9C);
    let scans: Vec<Tensor> = (0..args.batch)
        .map(|_| {
            let data: Vec<f64> = (0..args.points * 3)
                .map(|_| rng.gen_range(-10.0..10.0))
                .collect();
            Tensor::new(vec![args.points, 3], data).expect("well-formed scan")
        })
        .collect();
    let report = benchmark_runtime(&model, &scans, args.reps)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::write(out, &json).map_err(runtime_err)?;
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let (model, _header) = load_checkpoint(&args.ckpt)?;
    let (records, meta) = load_sequence(&args.data)?;
    let db = describe_sequence(&model, &records, args.num_points)?;
    save_descriptor_dump(&args.out, &db, &meta.name)?;
    println!(
        "exported {} descriptors of dim {} -> {}",
        db.len(),
        model.config.descriptor_dim,
        args.out.display()
    );
    Ok(())
}

/// Deterministic per-frame downsample + forward pass over a whole sequence.
fn describe_sequence(
    model: &crate::model::Model,
    records: &[ScanRecord],
    num_points: usize,
) -> Result<DescriptorDatabase, CliError> {
    let clouds: Vec<Tensor> = records
        .iter()
        .map(|r| eval_cloud(r, num_points))
        .collect::<Result<_, _>>()?;
    let descriptors = crate::parallel::map(&clouds, |c| model.describe(c));
    let mut db = DescriptorDatabase::new();
    for (record, d) in records.iter().zip(descriptors) {
        db.append(
            record.cloud.frame_index,
            record.pose.position,
            record.segment,
            &d?,
        )?;
    }
    Ok(db)
}

fn command_line(name: &str, out: &Path) -> Vec<String> {
    vec![name.to_string(), out.display().to_string()]
}

/// Parse and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for argv in [
            vec!["pgap", "generate", "--out", "d"],
            vec!["pgap", "validate", "--data", "d"],
            vec!["pgap", "mine", "--data", "d", "--out", "o"],
            vec![
                "pgap", "train", "--data", "a", "b", "--val", "v", "--out", "c.ckpt",
            ],
            vec![
                "pgap", "evaluate", "--data", "d", "--ckpt", "c", "--out", "r",
            ],
            vec!["pgap", "benchmark", "--ckpt", "c"],
            vec!["pgap", "export", "--data", "d", "--ckpt", "c", "--out", "f"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
    }

    #[test]
    fn missing_required_flag_is_usage_error() {
        assert!(Cli::try_parse_from(["pgap", "train", "--val", "v"]).is_err());
        assert!(Cli::try_parse_from(["pgap", "nonsense"]).is_err());
    }

    #[test]
    fn benchmark_defaults_match_contract() {
        let cli = Cli::try_parse_from(["pgap", "benchmark", "--ckpt", "c"]).unwrap();
        match cli.command {
            Command::Benchmark(args) => {
                assert_eq!(args.batch, 20);
                assert_eq!(args.reps, 10);
            }
            _ => unreachable!(),
        }
    }
}
