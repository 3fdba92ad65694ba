use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gwa_core::controller::{labelwave, select_finetune, select_scratch, FinetuneConfig, StopDecision};
use gwa_core::ingest::{ingest_stream, EngineConfig};
use gwa_core::moments::GwaSeries;
use gwa_core::projection::ProjectionConfig;
use gwa_core::trace::{read_alignment_rows, AlignmentRow};
use gwa_harness::analysis::{compare_gradient_norm, rank_samples};
use gwa_harness::plots::emit_plots;
use gwa_harness::trainer::{
    train_to_dir, ALIGNMENT_FILE, DECISION_FILE, EPOCHS_FILE, FLIPPED_FILE, PREDICTIONS_FILE,
    REPORT_FILE,
};
use gwa_harness::{RunReport, TrainerConfig};

#[derive(Parser)]
#[command(name = "gwa", version, about = "Gradient-weight alignment telemetry tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a telemetry trace and write epoch summaries and a decision.
    Ingest(IngestArgs),
    /// Train the reference model described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze an ingest or train output directory.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Render CSV and SVG plots from a run report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// Defaults to a `plots` directory next to the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Scratch,
    Finetune,
    Labelwave,
}

#[derive(Args)]
struct IngestArgs {
    /// Trace file, or `-` for stdin.
    #[arg(long)]
    trace: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = gwa_core::moments::DEFAULT_BETA)]
    beta: f64,
    /// Append the bias to the head and a constant 1 to every latent.
    #[arg(long)]
    include_bias: bool,
    /// Skip writing per-sample alignment rows.
    #[arg(long)]
    no_per_sample: bool,
    /// Project latents to this dimension before scoring.
    #[arg(long)]
    project: Option<usize>,
    #[arg(long, default_value_t = gwa_core::projection::DEFAULT_SEED)]
    project_seed: u64,
    #[arg(long, value_enum, default_value = "scratch")]
    criterion: Rule,
    #[arg(long, default_value_t = gwa_core::controller::DEFAULT_WARMUP_FRACTION)]
    warmup: f64,
    /// Keep all scores per epoch and cross-check the streaming moments.
    #[arg(long)]
    retain: bool,
}

#[derive(Subcommand)]
enum Analysis {
    /// Select a stopping epoch from the epoch summaries.
    Stop {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "scratch")]
        criterion: Rule,
        #[arg(long, default_value_t = gwa_core::controller::DEFAULT_WARMUP_FRACTION)]
        warmup: f64,
    },
    /// Rank samples of one epoch by ascending alignment.
    Rank {
        #[arg(long)]
        trace: PathBuf,
        /// Defaults to the epoch in decision.json, else the last epoch.
        #[arg(long)]
        epoch: Option<u32>,
        /// Number of lowest-alignment samples to print.
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Correlate alignment with per-sample gradient norm.
    Compare {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest(args) => ingest(args),
        Command::Train { config, out } => train(&config, out),
        Command::Analyze { what } => analyze(what),
        Command::Plot { report, out } => plot(&report, out),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, value)
        .map_err(io::Error::from)
        .and_then(|_| writeln!(out));
    match written {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// Epoch picked in `decision.json`: a single decision from `ingest`, or
/// the scratch decision from `train`.
fn decided_epoch(path: &Path) -> Result<Option<u32>> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    let d = v.get("gwa_scratch").unwrap_or(&v);
    Ok(d.get("selected_epoch").and_then(|e| e.as_u64()).map(|e| e as u32))
}

fn decide(series: &GwaSeries, rule: Rule, warmup: f64, dir: &Path) -> Result<StopDecision> {
    Ok(match rule {
        Rule::Scratch => select_scratch(series, warmup)?,
        Rule::Finetune => select_finetune(
            series,
            FinetuneConfig {
                fallback_warmup_fraction: warmup,
                ..FinetuneConfig::default()
            },
        )?,
        Rule::Labelwave => {
            let path = dir.join(PREDICTIONS_FILE);
            let preds: Vec<Vec<u32>> = serde_json::from_reader(BufReader::new(
                File::open(&path).with_context(|| format!("labelwave needs {}", path.display()))?,
            ))?;
            labelwave(&preds, warmup)?.1
        }
    })
}

fn ingest(args: IngestArgs) -> Result<()> {
    let cfg = EngineConfig {
        alignment: gwa_core::AlignmentConfig {
            include_bias: args.include_bias,
        },
        beta: args.beta,
        retain_scores: args.retain,
        projection: ProjectionConfig {
            enabled: args.project.is_some(),
            dim: args.project.unwrap_or(gwa_core::projection::DEFAULT_TARGET_DIM),
            seed: args.project_seed,
        },
        ..EngineConfig::default()
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let source: Box<dyn Read> = if args.trace == "-" {
        Box::new(io::stdin().lock())
    } else {
        Box::new(File::open(&args.trace).with_context(|| format!("opening {}", args.trace))?)
    };
    let mut rows = if args.no_per_sample {
        None
    } else {
        Some(BufWriter::new(File::create(args.out.join(ALIGNMENT_FILE))?))
    };
    let out = ingest_stream(
        BufReader::with_capacity(1 << 20, source),
        &cfg,
        rows.as_mut().map(|w| w as &mut dyn Write),
    )
    .with_context(|| format!("ingesting {}", args.trace))?;

    let mut epochs = BufWriter::new(File::create(args.out.join(EPOCHS_FILE))?);
    out.series.write_jsonl(&mut epochs)?;
    epochs.flush()?;
    match decide(&out.series, args.criterion, args.warmup, &args.out) {
        Ok(d) => {
            fs::write(args.out.join(DECISION_FILE), serde_json::to_vec_pretty(&d)?)?;
            eprintln!(
                "{} steps, {} samples, {} epochs; selected epoch {}",
                out.steps,
                out.samples,
                out.series.len(),
                d.selected_epoch
            );
        }
        Err(e) => eprintln!(
            "{} steps, {} samples, {} epochs; no decision: {e:#}",
            out.steps,
            out.samples,
            out.series.len()
        ),
    }
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = TrainerConfig::from_file(config).with_context(|| format!("loading {}", config.display()))?;
    let dir = out
        .or_else(|| cfg.out_dir.clone())
        .context("no output directory: pass --out or set out_dir")?;
    let mut run = train_to_dir(&cfg, &dir)?;
    let plots = emit_plots(&run.report, Some(&run.rows), Some(&run.flipped), &dir.join("plots"))?;
    run.report.artifacts.plots = plots
        .iter()
        .map(|p| p.strip_prefix(&dir).unwrap_or(p).to_path_buf())
        .collect();
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&run.report)?)?;

    let r = &run.report;
    let last = r.epochs.last().context("run produced no epochs")?;
    match &r.decisions.gwa_scratch {
        Some(d) => eprintln!(
            "selected epoch {} (test accuracy {:?}); last epoch {} (test accuracy {:?})",
            d.selected_epoch,
            r.test_accuracy_at(d.selected_epoch),
            last.epoch,
            last.test_accuracy
        ),
        None => eprintln!("no gwa decision; see notes in {}", dir.join(REPORT_FILE).display()),
    }
    Ok(())
}

fn load_rows(dir: &Path) -> Result<Vec<AlignmentRow>> {
    let path = dir.join(ALIGNMENT_FILE);
    let file = File::open(&path).with_context(|| {
        format!("{} not found; per-sample output must be enabled", path.display())
    })?;
    Ok(read_alignment_rows(BufReader::new(file))?)
}

fn load_flipped(dir: &Path) -> Result<Option<Vec<bool>>> {
    let path = dir.join(FLIPPED_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(BufReader::new(File::open(path)?))?))
}

fn load_series(dir: &Path) -> Result<GwaSeries> {
    let path = dir.join(EPOCHS_FILE);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(GwaSeries::read_jsonl(BufReader::new(file))?)
}

fn analyze(what: Analysis) -> Result<()> {
    match what {
        Analysis::Stop {
            trace,
            criterion,
            warmup,
        } => {
            let series = load_series(&trace)?;
            print_json(&decide(&series, criterion, warmup, &trace)?)
        }
        Analysis::Rank { trace, epoch, top } => {
            let rows = load_rows(&trace)?;
            let epoch = match epoch {
                Some(e) => e,
                None => {
                    let decision = trace.join(DECISION_FILE);
                    let chosen = if decision.exists() { decided_epoch(&decision)? } else { None };
                    match chosen {
                        Some(e) => e,
                        None => rows.iter().map(|r| r.epoch).max().context("no rows")?,
                    }
                }
            };
            let flipped = load_flipped(&trace)?;
            let mut ranking = rank_samples(&rows, epoch, flipped.as_deref())?;
            ranking.samples.truncate(top);
            print_json(&ranking)
        }
        Analysis::Compare { trace } => print_json(&compare_gradient_norm(&load_rows(&trace)?)?),
    }
}

fn plot(report_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let report: RunReport = serde_json::from_slice(
        &fs::read(report_path).with_context(|| format!("reading {}", report_path.display()))?,
    )?;
    let dir = report_path.parent().unwrap_or(Path::new("."));
    let rows = match &report.artifacts.alignment {
        Some(p) if dir.join(p).exists() => Some(read_alignment_rows(BufReader::new(File::open(dir.join(p))?))?),
        _ => None,
    };
    let flipped = match &report.artifacts.flipped {
        Some(p) if dir.join(p).exists() => Some(serde_json::from_slice::<Vec<bool>>(&fs::read(dir.join(p))?)?),
        _ => None,
    };
    let out = out.unwrap_or_else(|| dir.join("plots"));
    if report.epochs.is_empty() && rows.is_none() {
        eprintln!("report has no epochs; writing header-only series");
    }
    let files = emit_plots(&report, rows.as_deref(), flipped.as_deref(), &out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
