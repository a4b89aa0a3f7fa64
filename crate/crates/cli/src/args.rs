use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vragent_core::dataset::SamplerKind;
use vragent_core::sim::map::Profile;
use vragent_core::Signal;

#[derive(Debug, Parser)]
#[command(
    name = "vragent",
    version,
    about = "Chunked-policy rhythm game agent toolkit",
    args_override_self = true
)]
pub struct Cli {
    /// Key-value config file with one [section] per command. Flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic note map.
    GenMap(GenMapArgs),
    /// Record noisy expert demonstrations on one or more maps.
    Record(RecordArgs),
    /// Train a chunked policy (or the single-step baseline) on a dataset.
    Train(TrainArgs),
    /// Play maps in closed loop and report accuracy and max combo.
    Eval(EvalArgs),
    /// Mode and signal comparison tables.
    Ablate(AblateArgs),
    /// Time the control pipeline stage by stage.
    Bench(BenchArgs),
    /// Pace executed frames onto a byte transport.
    Stream(StreamArgs),
    /// Re-run a command from its manifest and compare output hashes.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenMap(_) => "gen-map",
            Command::Record(_) => "record",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Bench(_) => "bench",
            Command::Stream(_) => "stream",
            Command::Rerun(_) => "rerun",
        }
    }
}

fn parse_with<T: std::str::FromStr<Err = String>>(s: &str) -> Result<String, String> {
    s.parse::<T>().map(|_| s.to_string())
}

fn signal_name(s: &str) -> Result<String, String> {
    parse_with::<Signal>(s)
}

fn profile_name(s: &str) -> Result<String, String> {
    parse_with::<Profile>(s)
}

fn sampler_name(s: &str) -> Result<String, String> {
    parse_with::<SamplerKind>(s)
}

fn signal_list(s: &str) -> Result<String, String> {
    for part in split_list(s) {
        part.parse::<Signal>()?;
    }
    Ok(s.to_string())
}

fn mode_name(s: &str) -> Result<String, String> {
    match s {
        "sw" | "nosw" | "fixed" => Ok(s.to_string()),
        _ => Err(format!("unknown mode '{s}' (expected sw|nosw|fixed)")),
    }
}

fn mode_list(s: &str) -> Result<String, String> {
    let parts = split_list(s);
    if parts.is_empty() {
        return Err("at least one mode is required".into());
    }
    for p in parts {
        mode_name(p)?;
    }
    Ok(s.to_string())
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be positive, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be >= 0, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

/// Comma-separated items, blanks dropped.
pub fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect()
}

#[derive(Debug, Args, Serialize)]
pub struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = ".", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenMapArgs {
    /// Mean notes per second.
    #[arg(long, value_parser = non_negative_f64)]
    pub density: f64,
    /// Seconds of notes.
    #[arg(long, default_value_t = 60.0, value_parser = non_negative_f64)]
    pub duration: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "uniform", value_parser = profile_name)]
    pub profile: String,
    /// Probability that consecutive notes switch hands.
    #[arg(long, default_value_t = 0.8)]
    pub alternation: f64,
    /// Map id; defaults to `map-<density>-s<seed>`. Also names the file.
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct RecordArgs {
    /// Map file(s), comma-separated; episodes cycle through them.
    #[arg(long, value_name = "PATHS")]
    pub map: String,
    /// Hand position noise of the expert, meters.
    #[arg(long, default_value_t = 0.02, value_parser = non_negative_f64)]
    pub noise: f64,
    /// Total demonstration time to record.
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub hours: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = vragent_core::DEFAULT_BUTTONS)]
    pub buttons: usize,
    #[arg(long, default_value_t = 60.0, value_parser = positive_f64)]
    pub physics_hz: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    /// Fraction of episodes kept for training; the rest validate. 1 disables
    /// validation.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Total optimizer iterations (including any resumed ones).
    #[arg(long, default_value_t = 2000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 3e-5, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 10.0, value_parser = non_negative_f64)]
    pub lambda_kl: f64,
    #[arg(long, default_value = "episodic", value_parser = sampler_name)]
    pub sampler: String,
    /// `chunked` or `baseline` (single-step).
    #[arg(long, default_value = "chunked", value_parser = ["chunked", "baseline"])]
    pub model: String,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    #[arg(long, default_value_t = 8)]
    pub latent: usize,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub dec_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn: usize,
    #[arg(long, default_value_t = 1)]
    pub history: usize,
    #[arg(long, default_value_t = 100)]
    pub val_every: u64,
    #[arg(long, default_value_t = 2)]
    pub prefetch: usize,
    /// Continue from a checkpoint; its model shape replaces the shape flags.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Who produces the actions.
#[derive(Debug, Args, Serialize)]
pub struct AgentArgs {
    /// Policy blob or training checkpoint; overrides `--agent`.
    #[arg(long, value_name = "PATH")]
    pub policy: Option<PathBuf>,
    /// Built-in agent when no policy is given.
    #[arg(long, default_value = "noisy", value_parser = ["oracle", "noisy", "identity", "toy"])]
    pub agent: String,
    /// Oracle position noise, meters.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative_f64)]
    pub noise: f64,
    /// Noisy oracle playback-rate error std.
    #[arg(long, default_value_t = vragent_core::sim::NoisyOracleAgent::DEFAULT_RATE_SIGMA, value_parser = non_negative_f64)]
    pub rate_sigma: f64,
    /// Noisy oracle per-frame jitter, meters.
    #[arg(long, default_value_t = vragent_core::sim::NoisyOracleAgent::DEFAULT_JITTER, value_parser = non_negative_f64)]
    pub jitter: f64,
    /// Chunk length of built-in agents.
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    #[arg(long, default_value_t = vragent_core::DEFAULT_BUTTONS)]
    pub buttons: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ModeArgs {
    /// sw (adaptive window), nosw (open loop) or fixed.
    #[arg(long, default_value = "sw", value_parser = mode_name)]
    pub mode: String,
    /// Signal driving the adaptive window.
    #[arg(long, default_value = "motion", value_parser = signal_name)]
    pub signal: String,
    /// Window of the fixed mode.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// Decay of the fixed mode.
    #[arg(long, default_value_t = 0.1, value_parser = non_negative_f64)]
    pub decay: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Map file(s), comma-separated.
    #[arg(long, value_name = "PATHS")]
    pub map: String,
    #[command(flatten)]
    pub agent: AgentArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 60.0, value_parser = positive_f64)]
    pub physics_hz: f64,
    /// Also write the per-step trace of each map's first run.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Map file(s), comma-separated. Defaults to the five preset maps.
    #[arg(long, value_name = "PATHS")]
    pub map: Option<String>,
    /// Length of generated preset maps, seconds.
    #[arg(long, default_value_t = 60.0, value_parser = positive_f64)]
    pub duration: f64,
    /// Seed of the first generated preset map.
    #[arg(long, default_value_t = 7)]
    pub map_seed: u64,
    /// Modes of the first table.
    #[arg(long, default_value = "sw,nosw", value_parser = mode_list)]
    pub modes: String,
    /// Signals of the second table; empty skips it.
    #[arg(long, default_value = "motion,entropy,variance,consistency", value_parser = signal_list)]
    pub signals: String,
    #[command(flatten)]
    pub agent: AgentArgs,
    /// Signal of the `sw` mode.
    #[arg(long, default_value = "motion", value_parser = signal_name)]
    pub signal: String,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, default_value_t = 0.1, value_parser = non_negative_f64)]
    pub decay: f64,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Table cells evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 60.0, value_parser = positive_f64)]
    pub physics_hz: f64,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SceneArgs {
    /// Map file; a map is generated from `--density` when absent.
    #[arg(long, value_name = "PATH")]
    pub map: Option<PathBuf>,
    #[arg(long, default_value_t = 5.35, value_parser = non_negative_f64)]
    pub density: f64,
    #[arg(long, default_value_t = 30.0, value_parser = non_negative_f64)]
    pub duration: f64,
    #[arg(long, default_value_t = 3)]
    pub map_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub agent: AgentArgs,
    /// Steps to run.
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    /// Per-step deadline.
    #[arg(long, default_value_t = 1000.0 / 60.0, value_parser = positive_f64)]
    pub budget_ms: f64,
    /// Count deadline misses but never shrink the window.
    #[arg(long)]
    pub no_fallback: bool,
    #[arg(long, default_value = "motion", value_parser = signal_name)]
    pub signal: String,
    /// Required for the noisy and toy agents.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct StreamArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub agent: AgentArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// Frames to send.
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    /// Frames per second.
    #[arg(long, default_value_t = 60.0, value_parser = positive_f64)]
    pub rate: f64,
    /// memory (in-process validator), tcp (connect to --addr) or stdout.
    #[arg(long, default_value = "memory", value_parser = ["memory", "tcp", "stdout"])]
    pub transport: String,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    #[arg(long, default_value_t = 60.0, value_parser = positive_f64)]
    pub physics_hz: f64,
    /// Required for the noisy and toy agents.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct RerunArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}
