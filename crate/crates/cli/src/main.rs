//! `sav`: generate data, train, stylize, deflicker and evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sav_core::config::RunConfig;
use sav_core::dataset::{build_dataset, load_corpus, save_corpus, Style};
use sav_core::io;
use sav_core::metrics::{evaluate, Embedder};
use sav_core::numerics::FloatGrid;
use sav_core::sampler::{stylize_video, MeanConvention};
use sav_core::structure::StructureMode;
use sav_core::temporal::flicker_score;
use sav_core::video::FrameSequence;
use sav_core::workflow;
use sav_core::Error;

const EXIT_INPUT: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn defaults_help() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "Default configuration (override with --config and per-command flags):\n{}\n\n\
             Exit codes: 0 success, 1 malformed input, 2 numerical failure, 3 configuration error.\n\
             SAV_THREADS sets the worker count (default 1).",
            RunConfig::default().to_json()
        )
    })
}

#[derive(Parser)]
#[command(name = "sav", version, about = "Condition-guided diffusion video stylization", after_help = defaults_help())]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic content corpus.
    GenData(GenData),
    /// Train the frame autoencoder.
    TrainAe(TrainAe),
    /// Train the conditional denoiser.
    Train(Train),
    /// Train the deflicker network on flickered oracle-styled videos.
    TrainDeflicker(TrainDeflicker),
    /// Stylize a frame sequence.
    Stylize(Stylize),
    /// Run the deflicker network over a sequence.
    Deflicker(DeflickerCmd),
    /// Score an output sequence against its input.
    Eval(Eval),
    /// Print the noise schedule as CSV.
    InspectSchedule(InspectSchedule),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainAe {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainDeflicker {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct Stylize {
    /// `[F, C, H, W]` tensor container.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    style: Option<Style>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noising_strength: Option<f64>,
    #[arg(long = "scale-i")]
    scale_i: Option<f64>,
    #[arg(long = "scale-t")]
    scale_t: Option<f64>,
    #[arg(long = "scale-m")]
    scale_m: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    structure: Option<StructureMode>,
    #[arg(long)]
    mean_convention: Option<MeanConvention>,
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Deflicker weights; ignored with `--no-deflicker`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    no_deflicker: bool,
    /// Directory for per-frame `[steps + 1, C, h, w]` latent trajectories.
    #[arg(long)]
    dump_latents: Option<PathBuf>,
    /// Directory for per-frame `[steps, 1, h, w]` saliency masks.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    /// Directory for PGM previews of the output frames.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct DeflickerCmd {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Content video whose static pixels define the flicker score.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    style: Option<Style>,
    /// Corpus directory the embedder is fitted on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = ["json", "csv"], default_value = "json")]
    format: String,
}

#[derive(Args)]
struct InspectSchedule {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_INPUT,
        };
        Self { code, error }
    }
}

fn config_error(error: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn threads() -> CliResult<usize> {
    match std::env::var("SAV_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| config_error(Error::Config(format!("SAV_THREADS must be a positive integer, got '{v}'")))),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error(Error::Config(format!("{}: {e}", p.display()))))?;
            RunConfig::from_json(&text).map_err(config_error)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_sequence(path: &Path) -> CliResult<FrameSequence> {
    let named = |e: Error| Failure {
        code: EXIT_INPUT,
        error: Error::Format(format!("{}: {e}", path.display())),
    };
    FrameSequence::new(io::load_tensor(path).map_err(named)?).map_err(named)
}

fn gen_data(mut cfg: RunConfig, a: GenData) -> CliResult<Value> {
    set(&mut cfg.data.videos, a.videos);
    set(&mut cfg.data.frames, a.frames);
    set(&mut cfg.data.size, a.size);
    set(&mut cfg.data.seed, a.seed);
    cfg.validate().map_err(config_error)?;
    let dir = a.out.unwrap_or(cfg.paths.data.clone());
    let corpus = build_dataset(&cfg.data)?;
    save_corpus(&corpus, &cfg.data, &dir)?;
    Ok(json!({
        "command": "gen-data",
        "out": dir,
        "videos": corpus.content.len(),
        "frames": cfg.data.frames,
        "size": cfg.data.size,
        "train_videos": corpus.train_videos,
        "heldout_videos": corpus.heldout_videos,
    }))
}

fn train_ae(mut cfg: RunConfig, a: TrainAe) -> CliResult<Value> {
    set(&mut cfg.training.autoencoder.steps, a.steps);
    let (_, corpus) = load_corpus(&a.data.unwrap_or(cfg.paths.data.clone()))?;
    let out = a.out.unwrap_or(cfg.paths.autoencoder.clone());
    let start = Instant::now();
    let (ae, report) = workflow::fit_autoencoder(&corpus, &cfg)?;
    io::save_params(&out, &ae)?;
    Ok(json!({
        "command": "train-ae",
        "out": out,
        "report": report,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn train(mut cfg: RunConfig, a: Train) -> CliResult<Value> {
    set(&mut cfg.training.denoiser.steps, a.steps);
    set(&mut cfg.training.denoiser.lr, a.lr);
    let (_, corpus) = load_corpus(&a.data.unwrap_or(cfg.paths.data.clone()))?;
    let ae = workflow::load_autoencoder(&cfg, &a.autoencoder.unwrap_or(cfg.paths.autoencoder.clone()))?;
    let out = a.out.unwrap_or(cfg.paths.denoiser.clone());
    let start = Instant::now();
    let (model, report) = workflow::fit_denoiser(&corpus, &ae, &cfg, threads()?)?;
    io::save_params(&out, &model)?;
    Ok(json!({
        "command": "train",
        "out": out,
        "steps": report.losses.len(),
        "final_batch_loss": report.losses.last(),
        "heldout_initial": report.heldout_initial,
        "heldout_final": report.heldout_final,
        "heldout_ratio": report.heldout_final / report.heldout_initial,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn train_deflicker(mut cfg: RunConfig, a: TrainDeflicker) -> CliResult<Value> {
    set(&mut cfg.training.deflicker.steps, a.steps);
    let (_, corpus) = load_corpus(&a.data.unwrap_or(cfg.paths.data.clone()))?;
    let out = a.out.unwrap_or(cfg.paths.deflicker.clone());
    let start = Instant::now();
    let (net, losses) = workflow::fit_deflicker(&corpus, &cfg)?;
    io::save_params(&out, &net)?;
    let (mut before, mut after) = (0.0, 0.0);
    let held = workflow::flicker_examples(&corpus, &corpus.heldout_videos, &cfg, 1)?;
    for ex in &held {
        before += flicker_score(&ex.raw, Some(&ex.original), cfg.temporal.tau)?;
        after += flicker_score(&net.refine_sequence(&ex.raw)?, Some(&ex.original), cfg.temporal.tau)?;
    }
    let n = held.len().max(1) as f64;
    Ok(json!({
        "command": "train-deflicker",
        "out": out,
        "steps": losses.len(),
        "final_loss": losses.last(),
        "heldout_flicker_before": before / n,
        "heldout_flicker_after": after / n,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn save_stacked(dir: &Path, f: usize, grids: Vec<FloatGrid>) -> CliResult<()> {
    io::save_tensor(&dir.join(format!("frame_{f:03}.savt")), &FloatGrid::stack(&grids)?)?;
    Ok(())
}

fn stylize(mut cfg: RunConfig, a: Stylize) -> CliResult<Value> {
    let s = &mut cfg.sampler;
    set(&mut s.style, a.style);
    set(&mut s.steps, a.steps);
    set(&mut s.seed, a.seed);
    set(&mut s.noising_strength, a.noising_strength);
    set(&mut s.lambda, a.lambda);
    set(&mut s.structure, a.structure);
    set(&mut s.mean_convention, a.mean_convention);
    set(&mut cfg.guidance.s_i, a.scale_i);
    set(&mut cfg.guidance.s_t, a.scale_t);
    set(&mut cfg.guidance.s_m, a.scale_m);
    set(&mut cfg.paths.autoencoder, a.autoencoder);
    set(&mut cfg.paths.denoiser, a.denoiser);
    set(&mut cfg.paths.deflicker, a.weights);
    cfg.validate().map_err(config_error)?;
    let seq = read_sequence(&a.input)?;
    let pipe = workflow::load_pipeline(&cfg, !a.no_deflicker)?;
    let sampler = cfg.sampler_config();
    let record = a.dump_latents.is_some() || a.dump_masks.is_some();
    let start = Instant::now();
    let out = stylize_video(&seq, &sampler, &pipe, threads()?, record)?;
    let seconds = start.elapsed().as_secs_f64();
    io::save_tensor(&a.out, out.refined.grid())?;
    for (f, trace) in out.traces.into_iter().enumerate() {
        if let Some(dir) = &a.dump_latents {
            save_stacked(dir, f, trace.latents.into_iter().map(|(_, z)| z).collect())?;
        }
        if let Some(dir) = &a.dump_masks {
            if !trace.masks.is_empty() {
                save_stacked(dir, f, trace.masks.into_iter().map(|(_, m)| m).collect())?;
            }
        }
    }
    if let Some(dir) = &a.pgm {
        io::export_pgm(out.refined.grid(), dir, "frame")?;
    }
    let bytes = std::fs::read(&a.out).map_err(Error::from)?;
    Ok(json!({
        "command": "stylize",
        "out": a.out,
        "frames": out.refined.len(),
        "style": sampler.style,
        "start_step": sampler.start_step(),
        "deflicker": pipe.deflicker.is_some(),
        "crc32": format!("{:08x}", crc32(&bytes)),
        "seconds": seconds,
    }))
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(bytes);
    h.finalize()
}

fn deflicker(mut cfg: RunConfig, a: DeflickerCmd) -> CliResult<Value> {
    set(&mut cfg.paths.deflicker, a.weights);
    let seq = read_sequence(&a.input)?;
    let reference = a.reference.as_deref().map(read_sequence).transpose()?;
    let net = workflow::load_deflicker(&cfg, &cfg.paths.deflicker)?;
    let out = net.refine_sequence(&seq)?;
    io::save_tensor(&a.out, out.grid())?;
    let tau = cfg.temporal.tau;
    let scores = if seq.len() >= 2 {
        Some((
            flicker_score(&seq, reference.as_ref(), tau)?,
            flicker_score(&out, reference.as_ref(), tau)?,
        ))
    } else {
        None
    };
    Ok(json!({
        "command": "deflicker",
        "out": a.out,
        "frames": out.len(),
        "flicker_before": scores.map(|s| s.0),
        "flicker_after": scores.map(|s| s.1),
    }))
}

fn eval(cfg: RunConfig, a: Eval) -> CliResult<(Value, String)> {
    let style = a.style.unwrap_or(cfg.sampler.style);
    let input = read_sequence(&a.input)?;
    let output = read_sequence(&a.output)?;
    let (_, corpus) = load_corpus(&a.data.unwrap_or(cfg.paths.data.clone()))?;
    let emb = Embedder::fit(&corpus)?;
    let m = evaluate(&input, &output, style.id(), &emb)?;
    let csv = format!(
        "temporal_consistency,prompt_consistency,frame_accuracy\n{},{},{}\n",
        m.temporal_consistency, m.prompt_consistency, m.frame_accuracy
    );
    Ok((json!({ "command": "eval", "style": style, "metrics": m }), csv))
}

fn inspect_schedule(mut cfg: RunConfig, a: InspectSchedule) -> CliResult<String> {
    set(&mut cfg.schedule.steps, a.steps);
    set(&mut cfg.schedule.beta_start, a.beta_start);
    set(&mut cfg.schedule.beta_end, a.beta_end);
    Ok(cfg.schedule().map_err(config_error)?.to_csv())
}

fn run(cli: Cli) -> CliResult<String> {
    let cfg = load_config(cli.config.as_deref())?;
    let summary = match cli.command {
        Command::GenData(a) => gen_data(cfg, a)?,
        Command::TrainAe(a) => train_ae(cfg, a)?,
        Command::Train(a) => train(cfg, a)?,
        Command::TrainDeflicker(a) => train_deflicker(cfg, a)?,
        Command::Stylize(a) => stylize(cfg, a)?,
        Command::Deflicker(a) => deflicker(cfg, a)?,
        Command::Eval(a) => {
            let csv_out = a.format == "csv";
            let (summary, csv) = eval(cfg, a)?;
            if csv_out {
                return Ok(csv);
            }
            summary
        }
        Command::InspectSchedule(a) => return inspect_schedule(cfg, a),
    };
    Ok(format!("{summary}\n"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
