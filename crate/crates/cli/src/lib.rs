//! The `pad` command line: data generation, training, rollouts, evaluation,
//! ablations, FLOP accounting and a self-test.

mod commands;
mod config;
mod selftest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{apply_override, resolve, RunConfig};

/// Bad arguments or configuration; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "pad", version, about = "Joint image and action diffusion policy on a block-world simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config (or a manifest from an earlier run) layered over defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root. Defaults to $PAD_OUT, then `runs`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sets every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted override such as `train.adapt.batch=8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Model preset (XL/2, XL/4, XL/8, L/2, B/2, mini, mini-64, mini-256,
    /// mini-depth, tiny).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Parallel evaluation rollouts.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted expert episodes into `<out>/data`.
    GenData {
        /// `all`, or a comma list of families (reach, push, ...) or
        /// instruction ids.
        #[arg(long)]
        tasks: Option<String>,
        /// Robot episodes with poses.
        #[arg(long)]
        episodes: Option<usize>,
        /// Video-only episodes.
        #[arg(long)]
        video_episodes: Option<usize>,
    },
    /// Pretrain on video, then co-train; writes `<out>/train`.
    Train {
        /// Dataset directory. Defaults to `<out>/data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// One closed-loop episode; writes `<out>/rollout`.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        instruction: usize,
        #[arg(long, default_value_t = 0)]
        env_seed: u64,
        /// Save a PNG strip per plan cycle.
        #[arg(long)]
        strip: bool,
    },
    /// Success rates over the evaluation tasks; writes `<out>/eval`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Save a PNG strip of the first plan of every episode.
        #[arg(long)]
        strip: bool,
    },
    /// Train and evaluate ablation variants; writes `<out>/ablate`.
    Ablate {
        /// full, no_img, no_cotrain, with_depth, or all.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also run the model-size sweep (mini-64, mini, mini-256).
        #[arg(long)]
        scaling: bool,
    },
    /// Token counts and GFLOPs of the presets (or of `--preset`).
    Flops,
    /// Fast numerical and bookkeeping invariants.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Rollout { .. } => "rollout",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Flops => "flops",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Serialize)]
struct Seeds {
    data: u64,
    init: u64,
    pretrain: u64,
    adapt: u64,
    eval_noise: u64,
    eval_seed_base: u64,
}

/// Written before a command does any work.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: String,
    out: String,
    seeds: Seeds,
    config: &'a RunConfig,
}

fn write_manifest(out: &Path, command: &str, argv: &[String], cfg: &RunConfig) -> anyhow::Result<()> {
    let m = RunManifest {
        command,
        argv: argv.to_vec(),
        version: format!("pad {}", env!("CARGO_PKG_VERSION")),
        out: out.display().to_string(),
        seeds: Seeds {
            data: cfg.data.seed,
            init: cfg.train.init_seed,
            pretrain: cfg.train.pretrain.seed,
            adapt: cfg.train.adapt.seed,
            eval_noise: cfg.eval.noise_seed,
            eval_seed_base: cfg.eval.seed_base,
        },
        config: cfg,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("manifest-{command}.json")), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn out_root(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os("PAD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code: 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli, argv: &[String]) -> anyhow::Result<()> {
    let g = cli.global;
    let mut cfg = resolve(g.config.as_deref(), g.preset.as_deref(), &g.set, g.seed, g.jobs)?;
    let out = out_root(g.out);
    let name = cli.command.name();
    match cli.command {
        Command::GenData {
            tasks,
            episodes,
            video_episodes,
        } => {
            if let Some(t) = tasks {
                cfg.data.instructions = commands::parse_tasks(&t)?;
            }
            if let Some(n) = episodes {
                cfg.data.robot_episodes = n;
            }
            if let Some(n) = video_episodes {
                cfg.data.video_episodes = n;
            }
            write_manifest(&out, name, argv, &cfg)?;
            commands::gen_data(&cfg, &out)
        }
        Command::Train { data, resume } => {
            write_manifest(&out, name, argv, &cfg)?;
            let data = data.unwrap_or_else(|| out.join("data"));
            commands::train(&cfg, &out, &data, resume.as_deref())
        }
        Command::Rollout {
            checkpoint,
            instruction,
            env_seed,
            strip,
        } => {
            write_manifest(&out, name, argv, &cfg)?;
            commands::rollout(&cfg, &out, &checkpoint, instruction, env_seed, strip)
        }
        Command::Eval { checkpoint, strip } => {
            write_manifest(&out, name, argv, &cfg)?;
            commands::eval(&cfg, &out, &checkpoint, strip)
        }
        Command::Ablate { variant, data, scaling } => {
            let variants = commands::parse_variants(&variant)?;
            write_manifest(&out, name, argv, &cfg)?;
            let data = data.unwrap_or_else(|| out.join("data"));
            commands::ablate(&cfg, &out, &data, &variants, scaling)
        }
        Command::Flops => {
            write_manifest(&out, name, argv, &cfg)?;
            commands::flops(&out, g.preset.as_deref())
        }
        Command::Selftest => {
            write_manifest(&out, name, argv, &cfg)?;
            selftest::run(&out, cfg.train.init_seed)
        }
    }
}
