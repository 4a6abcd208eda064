//! `wavecycle`: train, convert, evaluate and inspect from the command line.
//!
//! Settings resolve in this order, later winning: built-in desk defaults,
//! the `--config` file, `--variant`, then the individual override flags.
//!
//! Exit codes: 0 ok, 1 finished with skipped utterances, 2 usage or input
//! error, 3 training diverged, 4 checkpoint does not fit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wavecycle_core::data::{read_manifest, UtterancePool};
use wavecycle_core::dsp::{load_wav, prepare, save_wav};
use wavecycle_core::losses::LossReport;
use wavecycle_core::metrics::{evaluate_corpus, EvalPair};
use wavecycle_core::train::{
    epoch_length, load_checkpoint, load_checkpoint_for, save_checkpoint, train_loop, Ablation, Direction, TrainConfig,
    TrainState,
};
use wavecycle_core::Error;

const EXIT_SKIPPED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "wavecycle", version, about = "Cycle-consistent mel-to-waveform voice conversion")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train both conversion directions from two WAV manifests.
    Train(TrainArgs),
    /// Convert one WAV file with a trained checkpoint.
    Convert(ConvertArgs),
    /// Score converted WAVs against targets with matching file names.
    Evaluate(EvaluateArgs),
    /// Print the architecture hash and parameter counts.
    Inspect(InspectArgs),
}

/// Config selection shared by `train` and `inspect`.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config; missing keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Ablation variant 4 to 7; overrides the config's `[ablation]` table.
    #[arg(long, value_parser = clap::value_parser!(u8).range(4..=7))]
    variant: Option<u8>,

    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides `train.iterations`.
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Manifest of source-domain WAVs, one path per line.
    #[arg(long = "x-manifest", value_name = "FILE")]
    x_manifest: PathBuf,

    /// Manifest of target-domain WAVs.
    #[arg(long = "y-manifest", value_name = "FILE")]
    y_manifest: PathBuf,

    /// Output directory for the resolved config, loss log and checkpoints.
    #[arg(long)]
    out: PathBuf,

    /// Continue from a checkpoint whose architecture matches the config.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    #[value(name = "x2y")]
    X2y,
    #[value(name = "y2x")]
    Y2x,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::X2y => Direction::XToY,
            DirectionArg::Y2x => Direction::YToX,
        }
    }
}

#[derive(Debug, Args)]
struct ConvertArgs {
    checkpoint: PathBuf,
    input: PathBuf,

    #[arg(long, value_enum)]
    direction: DirectionArg,

    /// Output WAV, 16-bit PCM at 22 050 Hz.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    target_dir: PathBuf,
    converted_dir: PathBuf,

    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Inspect a checkpoint instead of a config.
    #[arg(long, conflicts_with_all = ["config", "variant", "seed", "iterations"])]
    checkpoint: Option<PathBuf>,

    /// Also print the fully resolved config as TOML.
    #[arg(long)]
    print_config: bool,
}

/// A failed command: exit code plus the message for stderr.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGED,
            Error::IncompatibleCheckpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).parse_default_env().init();

    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Evaluate(a) => cmd_evaluate(a, cli.quiet),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            TrainConfig::from_toml(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::desk(),
    };
    if let Some(v) = args.variant {
        cfg.ablation = Ablation::variant(v).expect("clap restricts the range");
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn load_pool(manifest: &Path, cfg: &TrainConfig) -> Result<UtterancePool, Failure> {
    let paths = read_manifest(manifest).map_err(|e| Failure::usage(e.to_string()))?;
    if paths.is_empty() {
        return Err(Failure::usage(format!("{}: manifest lists no files", manifest.display())));
    }
    let mut audio = Vec::with_capacity(paths.len());
    for p in &paths {
        let buf = load_wav(p)
            .and_then(|b| prepare(&b, cfg.train.silence_threshold_db))
            .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        audio.push(buf);
    }
    UtterancePool::new(audio, cfg.train.segment_frames).map_err(|e| Failure::usage(format!("{}: {e}", manifest.display())))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:07}.wck")
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    // everything that can be rejected up front is checked before the
    // output directory is touched
    let config = resolve_config(&args.config)?;
    let pool_x = load_pool(&args.x_manifest, &config)?;
    let pool_y = load_pool(&args.y_manifest, &config)?;
    let per_epoch = epoch_length(&pool_x, &pool_y, config.train.batch_size);
    let mut state = match &args.resume {
        Some(p) => load_checkpoint_for(p, &config)?,
        None => TrainState::new(config.clone(), per_epoch)?,
    };
    let total = config.train.iterations;
    let remaining = total.saturating_sub(state.iteration());

    std::fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let cfg_path = args.out.join("config.toml");
    std::fs::write(&cfg_path, config.to_toml()).map_err(|e| io_failure(&cfg_path, e))?;
    let log_path = args.out.join("losses.csv");
    let file = File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let mut log_file = BufWriter::new(file);
    writeln!(log_file, "{}", LossReport::LOG_HEADER).map_err(|e| io_failure(&log_path, e))?;

    log::info!(
        "training {} iterations from {} ({} X / {} Y utterances, {per_epoch} per epoch, {} parameters)",
        remaining,
        state.iteration(),
        pool_x.len(),
        pool_y.len(),
        state.num_params()
    );
    let log_every = config.train.log_every.max(1);
    let ckpt_every = config.train.checkpoint_every;
    let out = args.out.clone();
    let run = train_loop(&mut state, &pool_x, &pool_y, remaining, |st, rep| {
        let it = rep.iteration;
        if it % log_every == 0 || it == total {
            writeln!(log_file, "{rep}")?;
            log::info!("iter {it}: L_D {:.4}  L_G {:.4}  cyc {:.4}  lr {:.3e}", rep.l_d, rep.l_g, rep.cyc(), st.learning_rate());
        }
        if ckpt_every > 0 && it % ckpt_every == 0 && it != total {
            save_checkpoint(st, &out.join(checkpoint_name(it)))?;
        }
        Ok(())
    });
    log_file.flush().map_err(|e| io_failure(&log_path, e))?;
    match run {
        Ok(()) => {}
        Err(e @ Error::Divergence { .. }) => {
            return Err(Failure {
                code: EXIT_DIVERGED,
                message: format!("{e}\nloss log so far: {}", log_path.display()),
            })
        }
        Err(e) => return Err(e.into()),
    }
    let final_path = args.out.join("final.wck");
    save_checkpoint(&state, &final_path)?;
    log::info!("wrote {}", final_path.display());
    Ok(0)
}

fn checkpoint_failure(path: &Path, e: Error) -> Failure {
    match e {
        Error::File { .. } | Error::Io(_) => Failure::usage(e.to_string()),
        other => Failure { code: EXIT_CHECKPOINT, message: format!("{}: {other}", path.display()) },
    }
}

fn cmd_convert(args: ConvertArgs) -> CmdResult {
    let state = load_checkpoint(&args.checkpoint).map_err(|e| checkpoint_failure(&args.checkpoint, e))?;
    let input = load_wav(&args.input).map_err(|e| Failure::usage(format!("{}: {e}", args.input.display())))?;
    let output = state.convert(&input, args.direction.into())?;
    save_wav(&args.out, &output)?;
    log::info!("wrote {} ({} samples)", args.out.display(), output.len());
    Ok(0)
}

/// `.wav` files directly inside `dir`, keyed by file name.
fn list_wavs(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| io_failure(dir, e))?.path();
        let is_wav = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
        if !is_wav || !path.is_file() {
            continue;
        }
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            out.insert(name.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn cmd_evaluate(args: EvaluateArgs, quiet: bool) -> CmdResult {
    let targets = list_wavs(&args.target_dir)?;
    let converted = list_wavs(&args.converted_dir)?;
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (name, t) in &targets {
        match converted.get(name) {
            Some(c) => {
                let stem = Path::new(name).file_stem().map_or(name.clone(), |s| s.to_string_lossy().into_owned());
                pairs.push(EvalPair { name: stem, target: t.clone(), converted: c.clone() });
            }
            None => unmatched.push(args.target_dir.join(name)),
        }
    }
    unmatched.extend(converted.iter().filter(|(n, _)| !targets.contains_key(*n)).map(|(_, p)| p.clone()));
    if pairs.is_empty() {
        return Err(Failure::usage(format!(
            "no file names shared by {} and {}",
            args.target_dir.display(),
            args.converted_dir.display()
        )));
    }
    for p in &unmatched {
        eprintln!("unmatched, skipped: {}", p.display());
    }

    let report = evaluate_corpus(&pairs)?;
    for s in &report.skipped {
        eprintln!("failed, skipped: {}: {}", s.name, s.reason);
    }
    std::fs::write(&args.out, report.to_csv()).map_err(|e| io_failure(&args.out, e))?;
    if !quiet {
        if let Some(m) = report.mean() {
            println!(
                "{} utterances: MCD {:.4} dB  fwSNRseg {:.4} dB  RMSE(log F0) {:.4}",
                report.count(),
                m.mcd_db,
                m.fwsnrseg_db,
                m.rmse_logf0
            );
        }
    }
    if unmatched.is_empty() && report.skipped.is_empty() {
        Ok(0)
    } else {
        Ok(EXIT_SKIPPED)
    }
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    let (config, iteration) = match &args.checkpoint {
        Some(p) => {
            let state = load_checkpoint(p).map_err(|e| checkpoint_failure(p, e))?;
            let it = state.iteration();
            (state.config().clone(), Some(it))
        }
        None => (resolve_config(&args.config)?, None),
    };
    let g = config.generator_config().count_params();
    let d = config.discriminator.count_params();
    let discriminators = if config.ablation.enable_adv2 { 4 } else { 2 };
    println!("schema_version {}", config.schema_version);
    println!("architecture_hash {}", config.architecture_hash_hex());
    let a = &config.ablation;
    println!("ablation masking={} adv2={} glu_encoder={}", a.enable_masking, a.enable_adv2, a.enable_glu_encoder);
    println!("generator_params {g}");
    println!("discriminator_params {d}");
    println!("generators 2");
    println!("discriminators {discriminators}");
    println!("total_params {}", 2 * g + discriminators * d);
    if let Some(it) = iteration {
        println!("iteration {it}");
    }
    if args.print_config {
        print!("{}", config.to_toml());
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn checkpoint_names_sort_by_iteration() {
        assert!(checkpoint_name(999) < checkpoint_name(1000));
        assert_eq!(checkpoint_name(500), "ckpt_0000500.wck");
    }
}
