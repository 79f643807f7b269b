use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use istaple::experiment::{parse_config, run_experiment, simulate_instance, write_instance, ExperimentConfig};
use istaple::grid::{build_annotation, Annotation};
use istaple::inference::{fuse, Method};
use istaple::io;
use istaple::metrics::{evaluate, ranking_quality};

#[derive(Parser)]
#[command(name = "istaple", version, about = "Image-aware fusion of crowd segmentations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom and run the simulated crowd protocol on it.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Repetition index whose seeds are used.
        #[arg(long, default_value_t = 0)]
        repetition: usize,
    },
    /// Fuse polygon annotations into one segmentation.
    Fuse {
        #[arg(long)]
        image: PathBuf,
        /// Polygon JSON records.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying learner and protocol settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare a predicted labeling with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Mask of covered pixels for the covered-only block.
        #[arg(long)]
        coverage: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean absolute rank difference between two worker score tables.
    Rank {
        #[arg(long)]
        estimated: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run a full annotation-fraction sweep.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: istaple::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(parse_config(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn reading(p: &Path) -> String {
    format!("reading {}", p.display())
}

#[derive(Serialize)]
struct FuseMeta {
    method: Method,
    seed: u64,
    config_sha256: String,
    annotations: usize,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            repetition,
        } => {
            let cfg = parse_config(&config)?;
            let inst = simulate_instance(&cfg, repetition)?;
            write_instance(&out, &inst)?;
            io::write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            println!(
                "{} cells, {} tasks, {} annotations written to {}",
                inst.phantom.cells.len(),
                inst.protocol.tasks.len(),
                inst.protocol.annotations.len(),
                out.display()
            );
        }
        Command::Fuse {
            image,
            annotations,
            method,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let x = io::read_image_pgm(&image).with_context(|| reading(&image))?;
            let records = io::read_polygons(&annotations).with_context(|| reading(&annotations))?;
            let anns = records
                .iter()
                .map(|r| Ok(build_annotation(&r.worker_id, &r.polygons, cfg.protocol.ring_width, x.dims())?.0))
                .collect::<Result<Vec<Annotation>>>()?;
            let result = fuse(Some(&x), &anns, method, &cfg.fusion(), seed)?;
            io::write_label_pgm(&out.join("labels.pgm"), &result.labeling)?;
            io::write_marginals(&out.join("marginals.bin"), &result.marginals)?;
            io::write_mask_pgm(&out.join("coverage.pgm"), &result.coverage)?;
            io::write_confusions(&out.join("confusions.csv"), &result.confusions)?;
            if !result.history.is_empty() {
                io::write_history(&out.join("history.csv"), &result.history)?;
            }
            if let Some(m) = &result.model {
                io::write_model(&out.join("model.json"), m)?;
            }
            io::write_json(
                &out.join("meta.json"),
                &FuseMeta {
                    method,
                    seed,
                    config_sha256: cfg.sha256()?,
                    annotations: anns.len(),
                },
            )?;
        }
        Command::Eval {
            pred,
            gt,
            coverage,
            report,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let p = io::read_label_pgm(&pred).with_context(|| reading(&pred))?;
            let g = io::read_label_pgm(&gt).with_context(|| reading(&gt))?;
            let m = coverage
                .map(|c| io::read_mask_pgm(&c).with_context(|| reading(&c)))
                .transpose()?;
            let r = evaluate(&p, &g, m.as_ref(), &cfg.metrics)?;
            io::write_json(&report, &r)?;
            println!(
                "pixel_accuracy {:.6} f1 {:.6} voi {:.6}",
                r.full.pixel_accuracy, r.full.f1, r.full.voi
            );
        }
        Command::Rank { estimated, truth } => {
            let e = io::read_scores(&estimated).with_context(|| reading(&estimated))?;
            let t = io::read_scores(&truth).with_context(|| reading(&truth))?;
            println!("{}", ranking_quality(&e, &t)?);
        }
        Command::Experiment { config, out, jobs } => {
            let cfg = parse_config(&config)?;
            let s = run_experiment(&cfg, &out, jobs)?;
            println!(
                "{} runs, {} failed; results in {}",
                s.runs,
                s.failed_runs,
                out.display()
            );
        }
    }
    Ok(())
}

/// Context chain down to the first library error, whose message already
/// embeds its source.
fn message(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for c in e.chain() {
        parts.push(c.to_string());
        if c.is::<istaple::Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<istaple::Error>())
                .is_some_and(|ie| ie.is_validation());
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
