use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use timesteer::corpus::{save_jsonl, JsonlOptions};
use timesteer::model::{CheckpointMeta, ModelCheckpoint, TrainingStage};
use timesteer::steering::{self, extract, extract_lowrank, Direction};
use timesteer_harness::config::{parse_alpha_grid, CorpusSource};
use timesteer_harness::error::exit;
use timesteer_harness::experiments::check_report;
use timesteer_harness::report::Format;
use timesteer_harness::workbench::build_corpus;
use timesteer_harness::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport, HarnessError, Result, Workbench};

/// Temporal steering experiments on a small transformer classifier.
#[derive(Debug, Parser)]
#[command(name = "timesteer", version)]
struct Cli {
    /// Experiment config (JSON); the subcommand's preset when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated α values, e.g. `-2,-1,1,2`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    alpha_grid: Option<String>,
    /// Comma-separated hook sites, e.g. `ffn@2,ffn@3`.
    #[arg(long, global = true)]
    sites: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Read the corpus from a JSONL file instead of generating it.
    #[arg(long, global = true)]
    jsonl: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ShiftKind {
    Label,
    Vocab,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    Rank,
    Site,
    Size,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the corpus of every seed as JSONL.
    GenCorpus,
    /// Train a model on one period and save the checkpoint.
    Train {
        #[arg(long)]
        period: i64,
    },
    /// Extract a steering vector set and save it in binary form.
    Extract {
        #[arg(long)]
        source: i64,
        #[arg(long)]
        target: i64,
        /// Low-rank extraction at this rank.
        #[arg(long)]
        rank: Option<usize>,
        /// Use this checkpoint instead of training on the source period.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Accuracy of every training period's model on every period.
    EvalMatrix,
    /// Label-shift or vocabulary-shift series.
    ShiftExp {
        #[arg(long, value_enum)]
        kind: ShiftKind,
    },
    /// Exact, interpolated and extrapolated vectors along the timeline.
    Timeline {
        #[arg(long, value_enum, default_value = "forward")]
        direction: DirectionArg,
    },
    /// Steering with an estimated period on all periods at once.
    Dynamic,
    /// Rank, site or pool-size ablation.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Re-emit a JSON report, optionally regenerating its rows to check them.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        check: bool,
    },
}

fn config(cli: &Cli, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(kind),
    };
    cfg.experiment = kind;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(g) = &cli.alpha_grid {
        cfg.alpha_grid = parse_alpha_grid(g)?;
    }
    if let Some(s) = &cli.sites {
        cfg.sites = Some(s.clone());
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(p) = &cli.jsonl {
        cfg.corpus = CorpusSource::Jsonl {
            path: p.clone(),
            options: JsonlOptions::new(cfg.model.vocab_size),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn experiment(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(cfg)?;
    for p in report.emit(&cfg.out_dir, &Format::ALL)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus => {
            let cfg = config(&cli, ExperimentKind::Matrix)?;
            create_dir(&cfg.out_dir)?;
            for &seed in &cfg.seeds {
                let corpus = build_corpus(&cfg.corpus, seed)?;
                let path = cfg.out_dir.join(format!("corpus_seed{seed}.jsonl"));
                save_jsonl(&corpus, &path)?;
                println!("{}\t{} examples", path.display(), corpus.examples.len());
            }
            Ok(())
        }
        Command::Train { period } => {
            let cfg = config(&cli, ExperimentKind::Matrix)?;
            create_dir(&cfg.out_dir)?;
            for &seed in &cfg.seeds {
                let mut bench = Workbench::new(&cfg, seed)?;
                let model = bench.model(*period)?;
                let report = bench.train_report(*period)?;
                let meta = CheckpointMeta {
                    stage: TrainingStage::Base,
                    period: Some(*period),
                    train_config: Some(report.config.clone()),
                    final_loss: Some(report.final_loss()),
                    train_accuracy: Some(report.final_accuracy()),
                };
                let path = cfg.out_dir.join(format!("model_seed{seed}_p{period}.json"));
                ModelCheckpoint::new((*model).clone(), meta).save(&path)?;
                println!(
                    "{}\tval accuracy {}",
                    path.display(),
                    report.val_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default()
                );
            }
            Ok(())
        }
        Command::Extract {
            source,
            target,
            rank,
            model,
        } => {
            let cfg = config(&cli, ExperimentKind::Matrix)?;
            create_dir(&cfg.out_dir)?;
            let pool = cfg.extraction_pool.split();
            for &seed in &cfg.seeds {
                let mut bench = Workbench::new(&cfg, seed)?;
                let m = match model {
                    Some(p) => ModelCheckpoint::load(p)?.model,
                    None => (*bench.model(*source)?).clone(),
                };
                let sites = cfg.resolve_sites(m.config())?;
                let a = bench.slice(*source, pool)?;
                let b = bench.slice(*target, pool)?;
                let set = match rank {
                    Some(k) => extract_lowrank(&m, &a, &b, &sites, *k)?,
                    None => extract(&m, &a, &b, &sites)?,
                };
                let path = cfg
                    .out_dir
                    .join(format!("steer_seed{seed}_{source}_{target}.stvs"));
                steering::save(&set, &path)?;
                println!("{}\t{} sites, method {}", path.display(), set.vectors.len(), set.method);
            }
            Ok(())
        }
        Command::EvalMatrix => experiment(&config(&cli, ExperimentKind::Matrix)?),
        Command::ShiftExp { kind } => experiment(&config(
            &cli,
            match kind {
                ShiftKind::Label => ExperimentKind::LabelShift,
                ShiftKind::Vocab => ExperimentKind::VocabShift,
            },
        )?),
        Command::Timeline { direction } => {
            let mut cfg = config(&cli, ExperimentKind::Timeline)?;
            cfg.direction = match direction {
                DirectionArg::Forward => Direction::Forward,
                DirectionArg::Backward => Direction::Backward,
            };
            experiment(&cfg)
        }
        Command::Dynamic => experiment(&config(&cli, ExperimentKind::Dynamic)?),
        Command::Ablate { axis } => experiment(&config(
            &cli,
            match axis {
                Axis::Rank => ExperimentKind::AblateRank,
                Axis::Site => ExperimentKind::AblateSite,
                Axis::Size => ExperimentKind::AblateSize,
            },
        )?),
        Command::Report { input, check } => {
            let report = ExperimentReport::load(input)?;
            if *check {
                let bad = check_report(&report)?;
                if !bad.is_empty() {
                    return Err(HarnessError::data(format!(
                        "regenerated rows differ for seeds {bad:?}"
                    )));
                }
                println!("all {} rows regenerate bit-identically", report.rows.len());
            }
            let dir = match &cli.out_dir {
                Some(d) => d.clone(),
                None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            for p in report.emit(&dir, &Format::ALL)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
