//! Command-line front end: `gen-data`, `train`, `eval`, `gradcheck`, `ablate`, `report`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, ExperimentConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    ablation_grid, default_grid, evaluate, normalize_table, parse_tasks, read_reports, render_table, write_reports,
    AblationMetrics, AblationRow, EvalData, ScoreMapRecord,
};
use crate::exec::Execution;
use crate::gradcheck::{run_suite, SuiteConfig};
use crate::json::to_string_pretty_sig17;
use crate::synthgen::{generate_corpus, read_corpus, split_corpus, write_corpus, write_prompts, Corpus};
use crate::trainer::{csv_err, write_log, Checkpoint, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "milrep", version, about = "Image-document score functions on synthetic multimodal bags")]
pub struct Cli {
    /// Run all per-document work on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its class prompts.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoders and aggregators on the training split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write `checkpoint_step<N>.json` every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "zs,probe,grounding,retrieval")]
        tasks: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every aggregator configuration of the ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated seeds; defaults to the config's `seeds`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a plain-text summary of the CSV files in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Exit status for a library error: 1 for bad input, 2 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::DimensionMismatch { .. }
        | Error::Empty(_)
        | Error::Parse { .. }
        | Error::Checkpoint(_) => EXIT_INVALID,
        Error::Io(_) | Error::Json(_) | Error::NonFiniteLoss { .. } | Error::NonFiniteProbe { .. } => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match &cli.command {
        Command::GenData { config, out } => gen_data(config, out).map(|()| EXIT_OK),
        Command::Train {
            config,
            corpus,
            out,
            resume,
            checkpoint_every,
        } => train_cmd(config, corpus, out, resume.as_deref(), *checkpoint_every, exec).map(|()| EXIT_OK),
        Command::Eval {
            config,
            checkpoint,
            corpus,
            tasks,
            out,
        } => eval_cmd(config, checkpoint, corpus, tasks, out, exec).map(|()| EXIT_OK),
        Command::Gradcheck {
            tolerance,
            step,
            instances,
            seed,
        } => gradcheck_cmd(&SuiteConfig {
            instances: *instances,
            step: *step,
            tolerance: *tolerance,
            seed: *seed,
        }),
        Command::Ablate {
            config,
            corpus,
            seeds,
            out,
        } => ablate_cmd(config, corpus, seeds.as_deref(), out, exec),
        Command::Report { input } => report_cmd(input).map(|()| EXIT_OK),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let config = parse_config(path)?;
    let fp = config.fingerprint()?;
    Ok((config, fp))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config_fingerprint: &'a str,
    config: &'a ExperimentConfig,
}

fn prepare_out(out: &Path, config: &ExperimentConfig, fp: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let echo = ConfigEcho {
        config_fingerprint: fp,
        config,
    };
    std::fs::write(out.join("config.json"), to_string_pretty_sig17(&echo)? + "\n")?;
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    require_file(path, "corpus")?;
    let corpus = read_corpus(path)?;
    if corpus.documents.is_empty() {
        return Err(Error::Empty("corpus documents"));
    }
    Ok(corpus)
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let (config, fp) = load_config(config)?;
    let mut corpus = generate_corpus(&config.corpus)?;
    let bank = corpus.bank()?.clone();
    if let Some(h) = corpus.header.as_mut() {
        h.config_fingerprint = Some(fp.clone());
    }
    let mut prompts = bank.prompts();
    prompts.config_fingerprint = Some(fp.clone());
    prepare_out(out, &config, &fp)?;
    write_corpus(&out.join("corpus.jsonl"), &corpus)?;
    write_prompts(&out.join("prompts.json"), &prompts)?;
    println!(
        "wrote {} documents and {} prompts to {} (config {fp})",
        corpus.documents.len(),
        bank.concepts(),
        out.display()
    );
    Ok(())
}

fn train_cmd(
    config_path: &Path,
    corpus_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: Option<usize>,
    exec: Execution,
) -> Result<()> {
    let (config, fp) = load_config(config_path)?;
    let corpus = load_corpus(corpus_path)?;
    let (train_docs, _) = split_corpus(&corpus.documents, config.eval.train_fraction, config.eval.split_seed)?;
    let trainer = match resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != config.train {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different train config",
                    path.display()
                )));
            }
            info!("resuming from step {}", ckpt.step);
            Trainer::resume(&train_docs, &ckpt)?
        }
        None => Trainer::new(&train_docs, &config.train)?,
    };
    let mut trainer = trainer.with_fingerprint(fp.clone()).with_execution(exec);
    if checkpoint_every == Some(0) {
        return Err(invalid("--checkpoint-every must be at least 1"));
    }
    prepare_out(out, &config, &fp)?;
    let chunk = checkpoint_every.unwrap_or(usize::MAX);
    let mut log = Vec::new();
    while !trainer.is_finished() {
        let entries = trainer.run_steps(chunk)?;
        if let Some(last) = entries.last() {
            info!("step {} loss {:.4} gamma {:.3}", last.step, last.loss, last.gamma);
        }
        log.extend(entries);
        if checkpoint_every.is_some() {
            let name = format!("checkpoint_step{}.json", trainer.step_index());
            trainer.checkpoint()?.save(&out.join(name))?;
        }
    }
    trainer.checkpoint()?.save(&out.join("checkpoint.json"))?;
    write_log(&out.join("train_log.csv"), &log, &fp)?;
    match log.last() {
        Some(last) => println!(
            "trained {} steps (total {}): final loss {:.4}, gamma {:.3} (config {fp})",
            log.len(),
            trainer.total_steps(),
            last.loss,
            last.gamma
        ),
        None => println!("nothing to train: checkpoint is already at step {}", trainer.step_index()),
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoreMapFile<'a> {
    config_fingerprint: &'a str,
    maps: &'a [ScoreMapRecord],
}

fn eval_cmd(
    config_path: &Path,
    checkpoint: &Path,
    corpus_path: &Path,
    tasks: &str,
    out: &Path,
    exec: Execution,
) -> Result<()> {
    let (config, fp) = load_config(config_path)?;
    let tasks = parse_tasks(tasks)?;
    require_file(checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_fingerprint != fp {
        warn!(
            "checkpoint was trained under config {} but evaluating under {fp}",
            ckpt.config_fingerprint
        );
    }
    let model = ckpt.model()?;
    let corpus = load_corpus(corpus_path)?;
    let header = corpus
        .header
        .as_ref()
        .ok_or_else(|| invalid("corpus has no header with a concept bank"))?;
    let (train_docs, test_docs) =
        split_corpus(&corpus.documents, config.eval.train_fraction, config.eval.split_seed)?;
    let data = EvalData {
        bank: &header.bank,
        spec: &header.spec,
        train: &train_docs,
        test: &test_docs,
    };
    let outcome = evaluate(&model, &ckpt.config.objective, &data, &config.eval, &tasks, exec)?;
    prepare_out(out, &config, &fp)?;
    let reports = outcome.reports(&fp, ckpt.config.seed);
    write_reports(&out.join("eval.csv"), &reports)?;
    if !outcome.score_maps.is_empty() {
        let file = ScoreMapFile {
            config_fingerprint: &fp,
            maps: &outcome.score_maps,
        };
        std::fs::write(out.join("score_maps.json"), to_string_pretty_sig17(&file)? + "\n")?;
    }
    for (task, metric, value) in &outcome.metrics {
        println!("{task:<10} {metric:<18} {value:.4}");
    }
    Ok(())
}

fn gradcheck_cmd(cfg: &SuiteConfig) -> Result<i32> {
    let report = run_suite(cfg)?;
    println!(
        "{:<28} {:>9} {:>14}  status (tolerance {:e}, step {:e})",
        "op", "instances", "max rel err", cfg.tolerance, cfg.step
    );
    for c in &report {
        println!(
            "{:<28} {:>9} {:>14.3e}  {}",
            c.name,
            c.instances,
            c.max_relative_error,
            if c.pass { "ok" } else { "FAIL" }
        );
    }
    let failed = report.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        println!("all {} operations passed", report.len());
        Ok(EXIT_OK)
    } else {
        println!("{failed} of {} operations failed", report.len());
        Ok(EXIT_FAILURE)
    }
}

fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let seeds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| invalid(format!("seed {s:?} is not an unsigned integer"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(invalid("no seeds given"));
    }
    Ok(seeds)
}

/// One line of `ablation.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub label: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub cnr: Option<f64>,
    pub medr: Option<f64>,
    pub norm_auc: Option<f64>,
    pub norm_cnr: Option<f64>,
    pub norm_medr: Option<f64>,
    pub error: Option<String>,
    pub config_fingerprint: String,
}

pub fn ablation_csv_rows(rows: &[AblationRow], fingerprint: &str) -> Vec<AblationCsvRow> {
    rows.iter()
        .zip(normalize_table(rows))
        .map(|(r, n)| AblationCsvRow {
            label: r.label.clone(),
            seed: r.seed,
            auc: r.metrics.map(|m| m.auc),
            cnr: r.metrics.map(|m| m.cnr),
            medr: r.metrics.map(|m| m.medr),
            norm_auc: n.auc,
            norm_cnr: n.cnr,
            norm_medr: n.medr,
            error: r.error.clone(),
            config_fingerprint: fingerprint.to_string(),
        })
        .collect()
}

fn ablation_rows_from_csv(rows: &[AblationCsvRow]) -> Vec<AblationRow> {
    rows.iter()
        .map(|r| AblationRow {
            label: r.label.clone(),
            seed: r.seed,
            metrics: match (r.auc, r.cnr, r.medr) {
                (Some(auc), Some(cnr), Some(medr)) => Some(AblationMetrics { auc, cnr, medr }),
                _ => None,
            },
            error: r.error.clone(),
        })
        .collect()
}

fn ablate_cmd(config_path: &Path, corpus_path: &Path, seeds: Option<&str>, out: &Path, exec: Execution) -> Result<i32> {
    let (config, fp) = load_config(config_path)?;
    let seeds = match seeds {
        Some(list) => parse_seeds(list)?,
        None => config.seeds.clone(),
    };
    let corpus = load_corpus(corpus_path)?;
    let header = corpus
        .header
        .as_ref()
        .ok_or_else(|| invalid("corpus has no header with a concept bank"))?;
    let (train_docs, test_docs) =
        split_corpus(&corpus.documents, config.eval.train_fraction, config.eval.split_seed)?;
    let data = EvalData {
        bank: &header.bank,
        spec: &header.spec,
        train: &train_docs,
        test: &test_docs,
    };
    let grid = default_grid(&config.train.objective);
    info!("ablation: {} configurations x {} seeds", grid.len(), seeds.len());
    let rows = ablation_grid(&grid, &seeds, &config.train, &data, &config.eval, exec);
    prepare_out(out, &config, &fp)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv")).map_err(csv_err)?;
    for row in ablation_csv_rows(&rows, &fp) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    let table = format!("config {fp}\n{}", render_table(&rows));
    std::fs::write(out.join("ablation_table.txt"), &table)?;
    print!("{table}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed == rows.len() {
        eprintln!("error: every ablation row failed");
        return Ok(EXIT_FAILURE);
    }
    if failed > 0 {
        warn!("{failed} of {} ablation rows failed", rows.len());
    }
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct LogCsvRow {
    step: usize,
    loss: f64,
    gamma: f64,
}

fn csv_headers(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    Ok(r.headers().map_err(csv_err)?.iter().map(str::to_string).collect())
}

/// Renders every recognised CSV in `dir` (eval reports, ablation tables,
/// training logs) as plain text.
pub fn render_report(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(invalid(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut s = String::new();
    for path in &files {
        let headers = csv_headers(path)?;
        let has = |h: &str| headers.iter().any(|x| x == h);
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        if has("task") && has("metric") && has("value") {
            let rows = read_reports(path)?;
            let _ = writeln!(s, "== {name} ==");
            if let Some(r) = rows.first() {
                let _ = writeln!(s, "config {}  seed {}", r.config_fingerprint, r.seed);
            }
            for r in &rows {
                let _ = writeln!(s, "{:<10} {:<18} {:>10.4}", r.task, r.metric, r.value);
            }
        } else if has("label") && has("norm_cnr") {
            let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
            let rows: Vec<AblationCsvRow> = reader.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
            let _ = writeln!(s, "== {name} ==");
            if let Some(r) = rows.first() {
                let _ = writeln!(s, "config {}", r.config_fingerprint);
            }
            s.push_str(&render_table(&ablation_rows_from_csv(&rows)));
        } else if has("step") && has("loss") {
            let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
            let rows: Vec<LogCsvRow> = reader.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
            let _ = writeln!(s, "== {name} ==");
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                let _ = writeln!(
                    s,
                    "steps {}..={}  loss {:.4} -> {:.4}  gamma {:.3}",
                    first.step, last.step, first.loss, last.loss, last.gamma
                );
            }
        } else {
            continue;
        }
        s.push('\n');
    }
    if s.is_empty() {
        return Err(invalid(format!("no recognised CSV files in {}", dir.display())));
    }
    Ok(s)
}

fn report_cmd(dir: &Path) -> Result<()> {
    print!("{}", render_report(dir)?);
    Ok(())
}
