mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use endosr_core::Error;
use toml::Value;

use config::parse_value;

#[derive(Parser, Debug)]
#[command(name = "endosr", version, about = "Attention U-Net GAN super-resolution toolkit")]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every configurable command.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file (nested tables or flat dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled settings: desk-8x, desk-10x or desk-12x.
    #[arg(long)]
    preset: Option<String>,
    /// Override any key, e.g. `--set train.loss.alpha=0.5`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    Full,
    NoContent,
    NoTexture,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize LR images from an HR tree.
    Degrade {
        #[command(flatten)]
        common: Common,
        /// HR input directory.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Train the generator and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        /// HR dataset root with one directory per class.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scale: Option<usize>,
        /// Stop after this many steps.
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        no_attention: bool,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// LR cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score a model, a directory of SR images and the bicubic baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Precomputed SR images with the same relative paths as the HR images.
        #[arg(long)]
        sr_dir: Option<PathBuf>,
        /// Name of the `--sr-dir` method.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Also write SSIM and gradient-similarity map PNGs.
        #[arg(long)]
        maps: bool,
    },
    /// Signed-rank tests and z-score summaries from per-image metric CSVs.
    Stats {
        #[command(flatten)]
        common: Common,
        /// CSV with columns image_id, method, metric, value. Repeatable.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Method pair `A,B` to compare. Repeatable; default is every pair.
        #[arg(long = "pair", value_name = "A,B")]
        pairs: Vec<String>,
        /// Comma-separated metric names.
        #[arg(long)]
        metrics: Option<String>,
        /// Opinion-score CSV with columns method, question, score.
        #[arg(long)]
        mos: Option<PathBuf>,
    },
    /// Train one model per loss-weight set and rank them by validation PSNR.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Weight sets `a,b,g;a,b,g;...`; default is the ten standard sets.
        #[arg(long)]
        sets: Option<String>,
        /// Steps per configuration (phase-1 length; later phases are dropped).
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Print the records and metadata of a checkpoint file.
    InspectCheckpoint {
        path: PathBuf,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

fn set_flag(flags: &mut BTreeMap<String, Value>, key: &str, value: Value) {
    flags.insert(key.to_string(), value);
}

fn path_value(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn common_flags(common: &Common) -> Result<BTreeMap<String, Value>, Error> {
    let mut flags = BTreeMap::new();
    if let Some(p) = &common.preset {
        set_flag(&mut flags, "preset", Value::String(p.clone()));
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        set_flag(&mut flags, k.trim(), parse_value(v.trim()));
    }
    Ok(flags)
}

fn scale_flags(flags: &mut BTreeMap<String, Value>, scale: Option<usize>) {
    if let Some(s) = scale {
        set_flag(flags, "degradation.scale", Value::Integer(s as i64));
        set_flag(flags, "train.generator.scale", Value::Integer(s as i64));
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let progress = !cli.quiet;
    match cli.command {
        Command::Degrade {
            common,
            input,
            scale,
            seed,
            noise_sigma,
        } => {
            let mut flags = common_flags(&common)?;
            if let Some(p) = &input {
                set_flag(&mut flags, "data.root", path_value(p));
            }
            if let Some(s) = scale {
                set_flag(&mut flags, "degradation.scale", Value::Integer(s as i64));
            }
            if let Some(s) = seed {
                set_flag(&mut flags, "degradation.seed", Value::Integer(s as i64));
            }
            if let Some(s) = noise_sigma {
                set_flag(&mut flags, "degradation.noise_sigma", Value::Float(s));
            }
            let resolved = config::resolve(common.config.as_deref(), &flags)?;
            commands::degrade(&resolved, &common.out, progress)
        }
        Command::Train {
            common,
            data,
            scale,
            iters,
            seed,
            ablation,
            no_attention,
            resume,
            cache,
        } => {
            let mut flags = common_flags(&common)?;
            if let Some(p) = &data {
                set_flag(&mut flags, "data.root", path_value(p));
            }
            scale_flags(&mut flags, scale);
            if let Some(n) = iters {
                set_flag(&mut flags, "run.max_steps", Value::Integer(n as i64));
            }
            if let Some(s) = seed {
                set_flag(&mut flags, "train.seed", Value::Integer(s as i64));
            }
            if let Some(a) = ablation {
                let name = match a {
                    AblationArg::Full => "full",
                    AblationArg::NoContent => "without_content",
                    AblationArg::NoTexture => "without_texture",
                };
                set_flag(&mut flags, "train.loss.ablation", Value::String(name.into()));
            }
            if no_attention {
                set_flag(&mut flags, "train.generator.use_attention", Value::Boolean(false));
            }
            if let Some(p) = &resume {
                set_flag(&mut flags, "run.resume", path_value(p));
            }
            if let Some(p) = &cache {
                set_flag(&mut flags, "data.cache", path_value(p));
            }
            let resolved = config::resolve(common.config.as_deref(), &flags)?;
            commands::train(&resolved, &common.out, progress)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            sr_dir,
            method,
            scale,
            split,
            maps,
        } => {
            let mut flags = common_flags(&common)?;
            if let Some(p) = &data {
                set_flag(&mut flags, "data.root", path_value(p));
            }
            if let Some(p) = &checkpoint {
                set_flag(&mut flags, "eval.checkpoint", path_value(p));
            }
            if let Some(p) = &sr_dir {
                set_flag(&mut flags, "eval.sr_dir", path_value(p));
            }
            if let Some(m) = method {
                set_flag(&mut flags, "eval.method", Value::String(m));
            }
            if let Some(s) = scale {
                set_flag(&mut flags, "degradation.scale", Value::Integer(s as i64));
            }
            if let Some(s) = split {
                let name = match s {
                    SplitArg::All => "all",
                    SplitArg::Train => "train",
                    SplitArg::Val => "val",
                    SplitArg::Test => "test",
                };
                set_flag(&mut flags, "eval.split", Value::String(name.into()));
            }
            if maps {
                set_flag(&mut flags, "eval.maps", Value::Boolean(true));
            }
            let resolved = config::resolve(common.config.as_deref(), &flags)?;
            commands::eval(&resolved, &common.out, progress)
        }
        Command::Stats {
            common,
            inputs,
            pairs,
            metrics,
            mos,
        } => {
            let mut flags = common_flags(&common)?;
            if !inputs.is_empty() {
                let v = inputs.iter().map(|p| path_value(p)).collect();
                set_flag(&mut flags, "stats.inputs", Value::Array(v));
            }
            if !pairs.is_empty() {
                let mut v = Vec::new();
                for p in &pairs {
                    let (a, b) = p
                        .split_once(',')
                        .ok_or_else(|| Error::config(format!("--pair expects A,B, got '{p}'")))?;
                    v.push(Value::Array(vec![
                        Value::String(a.trim().into()),
                        Value::String(b.trim().into()),
                    ]));
                }
                set_flag(&mut flags, "stats.pairs", Value::Array(v));
            }
            if let Some(m) = metrics {
                let v = m.split(',').map(|s| Value::String(s.trim().into())).collect();
                set_flag(&mut flags, "stats.metrics", Value::Array(v));
            }
            if let Some(p) = &mos {
                set_flag(&mut flags, "stats.mos", path_value(p));
            }
            let resolved = config::resolve(common.config.as_deref(), &flags)?;
            commands::stats(&resolved, &common.out, progress)
        }
        Command::Sweep {
            common,
            data,
            sets,
            iters,
        } => {
            let mut flags = common_flags(&common)?;
            if let Some(p) = &data {
                set_flag(&mut flags, "data.root", path_value(p));
            }
            if let Some(s) = sets {
                let mut v = Vec::new();
                for set in s.split(';').filter(|x| !x.trim().is_empty()) {
                    let nums: Vec<f64> = set
                        .split(',')
                        .map(|x| x.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| Error::config(format!("bad weight set '{set}'")))?;
                    if nums.len() != 3 {
                        return Err(Error::config(format!("weight set '{set}' needs three values")));
                    }
                    v.push(Value::Array(nums.into_iter().map(Value::Float).collect()));
                }
                set_flag(&mut flags, "sweep.sets", Value::Array(v));
            }
            if let Some(n) = iters {
                set_flag(&mut flags, "train.iters_phase1", Value::Integer(n as i64));
                set_flag(&mut flags, "train.iters_phase2", Value::Integer(0));
                set_flag(&mut flags, "train.finetune_iters", Value::Integer(0));
            }
            let resolved = config::resolve(common.config.as_deref(), &flags)?;
            commands::sweep(&resolved, &common.out, progress)
        }
        Command::InspectCheckpoint { path, json } => commands::inspect(&path, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
