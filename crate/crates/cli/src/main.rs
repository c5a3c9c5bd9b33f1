mod commands;
mod failure;
mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmcseg::config::parse_entries;
use cmcseg::network::MODEL_KEYS;

use commands::EvalInputs;
use failure::{Failure, Outcome, EXIT_USAGE};
use run_config::RunConfig;

/// Multi-modal volume segmentation with cross-modality convolution and
/// convLSTM slice sequences.
#[derive(Parser, Debug)]
#[command(name = "cmcseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic multi-modal phantom cases.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Depth, height and width.
        #[arg(long, default_value = "32,64,64", value_parser = parse_dims)]
        dims: (usize, usize, usize),
    },
    /// Run two-phase training; writes model.mmck, train.log and config.txt.
    Train {
        #[command(flatten)]
        settings: Settings,
        /// Directory of `case_<i>_img.mmv` / `case_<i>_lbl.mmv` pairs; overrides `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict every case in a directory and write an aggregate metrics report.
    Eval {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Label one volume and write it as a label volume file.
    Predict {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every layer's gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args, Debug)]
struct Settings {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [d, h, w] => Ok((d, h, w)),
        _ => Err(format!("expected D,H,W, got `{s}`")),
    }
}

/// Resolved configuration plus the model keys the user set explicitly.
fn resolve(settings: &Settings) -> Result<(RunConfig, Vec<(String, String)>), Failure> {
    let usage = |e: anyhow::Error| Failure::usage(e);
    let mut cfg = RunConfig::default();
    let mut model_keys = Vec::new();
    if let Some(path) = &settings.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            usage(anyhow::anyhow!(
                "cannot read config {}: {e}",
                path.display()
            ))
        })?;
        cfg.apply_text(&text)
            .map_err(|e| usage(anyhow::anyhow!("{}: {e}", path.display())))?;
        for e in parse_entries(&text).map_err(|e| usage(e.into()))? {
            if MODEL_KEYS.contains(&e.key.as_str()) {
                model_keys.push((e.key, e.value));
            }
        }
    }
    let mut assignments: Vec<String> = settings.overrides.clone();
    if let Some(seed) = settings.seed {
        assignments.push(format!("seed={seed}"));
    }
    for a in &assignments {
        cfg.apply_override(a).map_err(|e| usage(e.into()))?;
        let key = a.split_once('=').map_or("", |(k, _)| k.trim());
        if MODEL_KEYS.contains(&key) {
            model_keys.retain(|(k, _)| k != key);
            model_keys.push((
                key.to_string(),
                a.split_once('=').map_or("", |(_, v)| v.trim()).to_string(),
            ));
        }
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    Ok((cfg, model_keys))
}

fn with_path(slot: &mut Option<PathBuf>, flag: Option<&Path>) {
    if let Some(p) = flag {
        *slot = Some(p.to_path_buf());
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen {
            out,
            count,
            seed,
            dims,
        } => commands::gen(&out, count, seed, dims),
        Command::Train {
            settings,
            data,
            out,
        } => {
            let (mut cfg, _) = resolve(&settings)?;
            with_path(&mut cfg.data_dir, data.as_deref());
            with_path(&mut cfg.out_dir, out.as_deref());
            commands::train(&cfg)
        }
        Command::Eval {
            settings,
            model,
            data,
            report,
            oracle,
        } => {
            let (cfg, model_keys) = resolve(&settings)?;
            let inputs = EvalInputs {
                model: model.as_deref(),
                data: &data,
                report: &report,
                oracle,
            };
            commands::eval(&cfg, &model_keys, inputs)
        }
        Command::Predict {
            settings,
            model,
            volume,
            out,
        } => {
            let (cfg, model_keys) = resolve(&settings)?;
            commands::predict(&cfg, &model_keys, &model, &volume, &out)
        }
        Command::Gradcheck { seed, tol } => commands::gradcheck(seed, tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
