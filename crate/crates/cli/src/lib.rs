//! The `qplan` command line.
//!
//! Every command resolves its arguments (flags over an optional TOML config
//! file), runs inside a thread pool of `--jobs` workers, and writes a
//! [`RunManifest`] recording the resolved arguments, the seed and the hash
//! of every file read or written. `qplan replay` re-runs a manifest into a
//! fresh directory and checks that every output is bit-identical.

pub mod commands;
pub mod config;
pub mod context;
pub mod error;
pub mod inputs;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use commands::data::{BuildPairsArgs, GenConfigsArgs, GenPlansArgs, LinearizeArgs, ParseArgs, SmatchArgs};
use commands::report::ReportArgs;
use commands::tasks::{ClassifyInferArgs, ClassifyTrainArgs, LatencyInferArgs, LatencyTrainArgs};
use commands::train::{FinetuneArgs, PretrainPerfArgs, PretrainStructureArgs};
use commands::Step;
use config::ConfigFile;
use context::{absolute, Ctx, RunManifest, MANIFEST_FORMAT};
pub use error::{CliError, EXIT_CHECKPOINT, EXIT_DATA, EXIT_USAGE};

#[derive(Debug, Clone, Parser)]
#[command(name = "qplan", version, about = "Query-plan representation learning toolkit")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of every random choice; 0 when unset.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-item parallel work; 1 when unset.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Manifest path; next to the first output when unset.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    Parse(ParseArgs),
    Linearize(LinearizeArgs),
    Smatch(SmatchArgs),
    GenConfigs(GenConfigsArgs),
    GenPlans(GenPlansArgs),
    BuildPairs(BuildPairsArgs),
    PretrainStructure(PretrainStructureArgs),
    PretrainPerf(PretrainPerfArgs),
    Finetune(FinetuneArgs),
    /// Latency prediction from plan embeddings.
    #[command(subcommand)]
    PredictLatency(LatencyCommand),
    /// Query classification from plan embeddings.
    #[command(subcommand)]
    Classify(ClassifyCommand),
    Report(ReportArgs),
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Subcommand)]
pub enum LatencyCommand {
    Train(LatencyTrainArgs),
    Infer(LatencyInferArgs),
}

#[derive(Debug, Clone, Subcommand)]
pub enum ClassifyCommand {
    Train(ClassifyTrainArgs),
    Infer(ClassifyInferArgs),
}

/// Re-run a manifest and check its outputs are reproduced bit for bit.
#[derive(Debug, Clone, clap::Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub run_manifest: PathBuf,
    /// Directory the outputs are re-created in, as `<k>-<name>` for the k-th output argument.
    #[arg(long)]
    pub into: PathBuf,
}

/// Result of one command.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub stdout: String,
    pub manifest: RunManifest,
    /// Where the manifest was written, if anywhere.
    pub manifest_path: Option<PathBuf>,
}

fn resolve(slots: Vec<&mut Option<PathBuf>>) {
    for p in slots.into_iter().flatten() {
        *p = absolute(p);
    }
}

/// Runs resolved arguments and writes the manifest to `manifest_path`.
fn run_step<S: Step>(mut args: S, seed: u64, jobs: usize, manifest_path: Option<PathBuf>) -> Result<Outcome, CliError> {
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be positive"));
    }
    resolve(args.inputs());
    resolve(args.outputs());
    let manifest_path = manifest_path.map(|p| absolute(&p));
    let guarded: Vec<PathBuf> = args.inputs().into_iter().filter_map(|p| p.clone()).collect();
    let config = serde_json::to_value(&args).expect("arguments serialize");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let started_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    let clock = Instant::now();
    log::info!("{} (seed {seed}, {jobs} jobs)", S::NAME);
    let ctx = pool.install(|| {
        let mut ctx = Ctx::new(seed, guarded);
        args.run(&mut ctx).map(|()| ctx)
    })?;
    if let Some(p) = &manifest_path {
        ctx.check_writable(p)?;
    }
    let (manifest, stdout) = ctx.into_manifest(S::NAME, config, jobs, started_unix_ms, clock.elapsed().as_secs_f64());
    if let Some(p) = &manifest_path {
        write_manifest(p, &manifest)?;
    }
    Ok(Outcome {
        stdout,
        manifest,
        manifest_path,
    })
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    let text = commands::to_json_pretty(manifest);
    std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

struct Globals<'a> {
    seed: u64,
    jobs: usize,
    manifest: Option<&'a Path>,
    file: Option<&'a ConfigFile>,
}

fn execute<S: Step>(args: &S, g: &Globals) -> Result<Outcome, CliError> {
    let mut args = match g.file {
        Some(file) => config::merge(args, file.section(S::NAME))?,
        None => args.clone(),
    };
    // Stdout-only commands write a manifest only when asked to.
    let manifest = match g.manifest {
        Some(p) => Some(p.to_path_buf()),
        None => {
            resolve(args.outputs());
            args.default_manifest()
        }
    };
    run_step(args, g.seed, g.jobs, manifest)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    let g = Globals {
        seed: cli.seed.or(file.as_ref().and_then(|f| f.seed)).unwrap_or(0),
        jobs: cli.jobs.or(file.as_ref().and_then(|f| f.jobs)).unwrap_or(1),
        manifest: cli.manifest.as_deref(),
        file: file.as_ref(),
    };
    match &cli.command {
        Command::Parse(a) => execute(a, &g),
        Command::Linearize(a) => execute(a, &g),
        Command::Smatch(a) => execute(a, &g),
        Command::GenConfigs(a) => execute(a, &g),
        Command::GenPlans(a) => execute(a, &g),
        Command::BuildPairs(a) => execute(a, &g),
        Command::PretrainStructure(a) => execute(a, &g),
        Command::PretrainPerf(a) => execute(a, &g),
        Command::Finetune(a) => execute(a, &g),
        Command::PredictLatency(LatencyCommand::Train(a)) => execute(a, &g),
        Command::PredictLatency(LatencyCommand::Infer(a)) => execute(a, &g),
        Command::Classify(ClassifyCommand::Train(a)) => execute(a, &g),
        Command::Classify(ClassifyCommand::Infer(a)) => execute(a, &g),
        Command::Report(a) => execute(a, &g),
        Command::Replay(a) => replay(a),
    }
}

/// Re-runs the manifest's command with its outputs redirected into `into`.
fn replay_as<S: Step>(manifest: &RunManifest, into: &Path) -> Result<Outcome, CliError> {
    let mut args: S = serde_json::from_value(manifest.config.clone())
        .map_err(|e| CliError::data(format!("manifest config does not fit {}: {e}", manifest.command)))?;
    let mut moved = Vec::new();
    for (k, slot) in args.outputs().into_iter().enumerate() {
        if let Some(old) = slot {
            let name = old.file_name().map_or_else(|| OsString::from("out"), |n| n.to_os_string());
            let mut file = OsString::from(format!("{k}-"));
            file.push(name);
            let new = into.join(file);
            moved.push((old.clone(), new.clone()));
            *old = new;
        }
    }
    let outcome = run_step(args, manifest.seed, manifest.jobs, None)?;
    let relocate = |p: &Path| {
        moved
            .iter()
            .find_map(|(old, new)| p.strip_prefix(old).ok().map(|rest| if rest.as_os_str().is_empty() { new.clone() } else { new.join(rest) }))
    };
    let mut mismatches = Vec::new();
    for rec in &manifest.outputs {
        let Some(target) = relocate(&rec.path) else {
            mismatches.push(format!("{}: not an output argument", rec.path.display()));
            continue;
        };
        match outcome.manifest.outputs.iter().find(|r| r.path == target) {
            Some(r) if r.sha256 == rec.sha256 => {}
            Some(_) => mismatches.push(format!("{}: content differs", rec.path.display())),
            None => mismatches.push(format!("{}: not re-created", rec.path.display())),
        }
    }
    if outcome.manifest.outputs.len() != manifest.outputs.len() {
        mismatches.push(format!(
            "{} outputs recorded, {} re-created",
            manifest.outputs.len(),
            outcome.manifest.outputs.len()
        ));
    }
    if outcome.manifest.stdout_sha256 != manifest.stdout_sha256 {
        mismatches.push("standard output differs".into());
    }
    if !mismatches.is_empty() {
        return Err(CliError::data(format!("replay diverged: {}", mismatches.join("; "))));
    }
    let mut stdout = format!("reproduced {} outputs", manifest.outputs.len());
    if manifest.stdout_sha256.is_some() {
        stdout.push_str(" and standard output");
    }
    stdout.push('\n');
    Ok(Outcome { stdout, ..outcome })
}

fn replay(a: &ReplayArgs) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(&a.run_manifest).map_err(|e| CliError::data(format!("{}: {e}", a.run_manifest.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", a.run_manifest.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(CliError::data(format!("unsupported manifest format {:?}", manifest.format)));
    }
    let into = absolute(&a.into);
    match manifest.command.as_str() {
        ParseArgs::NAME => replay_as::<ParseArgs>(&manifest, &into),
        LinearizeArgs::NAME => replay_as::<LinearizeArgs>(&manifest, &into),
        SmatchArgs::NAME => replay_as::<SmatchArgs>(&manifest, &into),
        GenConfigsArgs::NAME => replay_as::<GenConfigsArgs>(&manifest, &into),
        GenPlansArgs::NAME => replay_as::<GenPlansArgs>(&manifest, &into),
        BuildPairsArgs::NAME => replay_as::<BuildPairsArgs>(&manifest, &into),
        PretrainStructureArgs::NAME => replay_as::<PretrainStructureArgs>(&manifest, &into),
        PretrainPerfArgs::NAME => replay_as::<PretrainPerfArgs>(&manifest, &into),
        FinetuneArgs::NAME => replay_as::<FinetuneArgs>(&manifest, &into),
        LatencyTrainArgs::NAME => replay_as::<LatencyTrainArgs>(&manifest, &into),
        LatencyInferArgs::NAME => replay_as::<LatencyInferArgs>(&manifest, &into),
        ClassifyTrainArgs::NAME => replay_as::<ClassifyTrainArgs>(&manifest, &into),
        ClassifyInferArgs::NAME => replay_as::<ClassifyInferArgs>(&manifest, &into),
        ReportArgs::NAME => replay_as::<ReportArgs>(&manifest, &into),
        other => Err(CliError::data(format!("unknown command {other:?} in manifest"))),
    }
}

/// Parses and runs an argument list (program name first).
pub fn run_args<I, T>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage(e.to_string()))?;
    run(&cli)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            0
        }
        Err(e) => {
            eprintln!("qplan: {e}");
            e.exit_code()
        }
    }
}
