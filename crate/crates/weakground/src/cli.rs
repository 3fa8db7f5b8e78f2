//! Command-line front end.
//!
//! One subcommand per pipeline stage: `gen`, `train`, `eval`, `infer`,
//! `parse`, `ablate`, `report`. Settings resolve as built-in defaults, then
//! the `--config` file, then `--set key=value` overrides. Every command is
//! reproducible from its flags alone; the only environment input is
//! `WEAKGROUND_THREADS`, which caps evaluation parallelism (absent means 1).
//!
//! Exit status: 0 success, 1 usage error, 2 runtime error.

use std::fmt::Write as _;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::{
    gen_config_from, model_config_from, train_config_from, ConfigError, ConfigMap,
};
use crate::engine::{self, EngineError, EvalMode};
use crate::model::{Model, ModelError};
use crate::queryparse;
use crate::synthworld::{
    build_dataset, load_dataset, load_meta, CategoryVocab, GenError, LoadMode,
};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

fn write_file(path: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_string(),
        source,
    })
}

#[derive(Parser)]
#[command(
    name = "weakground",
    version,
    about = "Weakly supervised grounding of referring expressions in synthetic 3D scenes"
)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<String>,
    /// Override one configuration key (repeatable); wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for generation and training.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Gen {
        /// Dataset path; a `<path>.meta.json` sidecar is written next to it.
        #[arg(long)]
        out: String,
    },
    /// Train a model on a dataset's train split (weak supervision only).
    Train {
        #[arg(long)]
        data: String,
        /// Checkpoint path.
        #[arg(long)]
        out: String,
        /// Also write the per-epoch loss log here.
        #[arg(long)]
        log: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    ///
    /// WEAKGROUND_THREADS caps parallel query evaluation (default 1).
    Eval {
        #[arg(long)]
        data: String,
        #[arg(long)]
        ckpt: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Detector)]
        mode: ModeArg,
        /// Write the summary here and the per-query records to `<path>.csv`.
        #[arg(long)]
        report: Option<String>,
    },
    /// Ground one query in one scene.
    Infer {
        #[arg(long)]
        ckpt: String,
        /// Dataset supplying the scene's detector proposals.
        #[arg(long)]
        data: String,
        #[arg(long)]
        scene_id: String,
        #[arg(long)]
        query: String,
    },
    /// Show how a query parses: tokens, noun phrases, relation triples.
    Parse {
        #[arg(long)]
        query: String,
    },
    /// Train and evaluate the four cumulative component configurations.
    Ablate {
        #[arg(long)]
        data: String,
        /// Ablation table CSV path.
        #[arg(long)]
        out: String,
    },
    /// Summarize a file produced by train/eval/ablate.
    Report {
        #[arg(long = "in")]
        input: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Detector,
    Gt,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> EvalMode {
        match m {
            ModeArg::Detector => EvalMode::Detector,
            ModeArg::Gt => EvalMode::Gt,
        }
    }
}

/// Merges the config file (if any) with `--set` overrides.
fn resolve_config(file: Option<&str>, sets: &[String]) -> Result<ConfigMap, ConfigError> {
    let mut map = match file {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::new(),
    };
    map.apply_overrides(sets)?;
    Ok(map)
}

fn eval_threads() -> Result<usize, CliError> {
    match std::env::var("WEAKGROUND_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(CliError::Other(format!("WEAKGROUND_THREADS: {e}"))),
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| CliError::Other(format!("WEAKGROUND_THREADS: {v:?} is not a thread count")))
            .map(|n| n.max(1)),
    }
}

/// Runs the CLI against `args` (including the program name), writing user
/// output to `out`. Returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successes; everything else is a usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            2
        }
    }
}

/// Entry point for the binary: real argv, stdout, process exit code.
pub fn main_entry() -> i32 {
    let mut stdout = std::io::stdout();
    run(std::env::args_os(), &mut stdout)
}

fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let map = resolve_config(cli.config.as_deref(), &cli.set)?;
    let emit = |out: &mut dyn std::io::Write, text: &str| -> Result<(), CliError> {
        out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
            path: "<stdout>".into(),
            source,
        })
    };

    match cli.command {
        Command::Gen { out: path } => {
            let gen = gen_config_from(&map)?;
            let summary = build_dataset(&gen, cli.seed, &path)?;
            emit(
                out,
                &format!(
                    "wrote {} ({} train scenes, {} test scenes, {} queries, {} skipped)\nmeta: {}\n",
                    summary.path,
                    summary.train_scenes,
                    summary.test_scenes,
                    summary.queries,
                    summary.skipped,
                    summary.meta_path,
                ),
            )
        }
        Command::Train {
            data,
            out: ckpt,
            log,
        } => {
            let model_cfg = model_config_from(&map)?;
            let mut train_cfg = train_config_from(&map)?;
            train_cfg.seed = cli.seed;
            let outcome = engine::train(&data, &model_cfg, &train_cfg)?;
            let mut log_text = String::new();
            for epoch in &outcome.epochs {
                let _ = writeln!(log_text, "{}", epoch.log_line());
            }
            emit(out, &log_text)?;
            emit(
                out,
                &format!(
                    "queries: {} used / {} total ({} parse failures, {} corrupted)\n",
                    outcome.counters.queries_used,
                    outcome.counters.queries_total,
                    outcome.counters.parse_failures,
                    outcome.counters.corrupted_targets,
                ),
            )?;
            if let Some(log_path) = log {
                write_file(&log_path, &log_text)?;
            }
            outcome.model.save(&ckpt)?;
            emit(out, &format!("checkpoint: {ckpt}\n"))
        }
        Command::Eval {
            data,
            ckpt,
            mode,
            report,
        } => {
            let model = Model::load(&ckpt)?;
            let threads = eval_threads()?;
            let result = engine::evaluate(&data, &model, mode.into(), threads)?;
            let summary = result.summary_text();
            emit(out, &summary)?;
            if let Some(path) = report {
                write_file(&path, &summary)?;
                write_file(&format!("{path}.csv"), &result.records_csv())?;
            }
            Ok(())
        }
        Command::Infer {
            ckpt,
            data,
            scene_id,
            query,
        } => {
            let model = Model::load(&ckpt)?;
            let scenes = load_dataset(&data, LoadMode::Weak)?;
            let meta = load_meta(&data)?;
            let scene = scenes
                .iter()
                .find(|s| s.scene_id == scene_id)
                .ok_or_else(|| CliError::Other(format!("scene {scene_id:?} not in {data}")))?;
            let result = engine::infer(&model, &meta.vocab, &scene.proposals, &query)?;
            let b = &scene.proposals[result.proposal].box3;
            emit(
                out,
                &format!(
                    "proposal {}  branch {}  center [{}, {}, {}]  size [{}, {}, {}]\n",
                    result.proposal,
                    result.branch.as_str(),
                    b.center[0],
                    b.center[1],
                    b.center[2],
                    b.size[0],
                    b.size[1],
                    b.size[2],
                ),
            )
        }
        Command::Parse { query } => {
            let gen = gen_config_from(&map)?;
            let vocab = CategoryVocab::builtin(gen.categories, gen.appearance_dim)?;
            match queryparse::parse(&query, &vocab) {
                Err(e) => Err(CliError::Other(e.to_string())),
                Ok(parsed) => {
                    let mut text = String::new();
                    let _ = writeln!(text, "tokens: [{}]", parsed.tokens.join(", "));
                    let _ = writeln!(text, "noun_phrases: {}", parsed.noun_phrases.len());
                    for (i, np) in parsed.noun_phrases.iter().enumerate() {
                        let _ = writeln!(
                            text,
                            "  {i}: {} (category {}) span {}..{}",
                            np.surface, np.category, np.span.0, np.span.1
                        );
                    }
                    let _ = writeln!(text, "target: {}", parsed.target_phrase().surface);
                    for t in &parsed.relation_triples {
                        let _ = writeln!(
                            text,
                            "triple: {:?}({}, {})",
                            t.relation,
                            parsed.noun_phrases[t.subject].surface,
                            parsed.noun_phrases[t.anchor].surface
                        );
                    }
                    if parsed.dropped_phrases > 0 {
                        let _ = writeln!(text, "dropped_phrases: {}", parsed.dropped_phrases);
                    }
                    emit(out, &text)
                }
            }
        }
        Command::Ablate { data, out: path } => {
            let model_cfg = model_config_from(&map)?;
            let mut train_cfg = train_config_from(&map)?;
            train_cfg.seed = cli.seed;
            let threads = eval_threads()?;
            let table = engine::ablate(&data, &model_cfg, &train_cfg, threads)?;
            let csv = table.to_csv();
            emit(out, &csv)?;
            write_file(&path, &csv)?;
            Ok(())
        }
        Command::Report { input } => {
            let contents = std::fs::read_to_string(&input).map_err(|source| CliError::Io {
                path: input.clone(),
                source,
            })?;
            emit(out, &digest_report(&input, &contents))
        }
    }
}

/// Renders a human-readable digest of any CSV/log this tool produces,
/// keyed off the header line.
fn digest_report(path: &str, contents: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{path}:");
    let mut lines = contents.lines();
    let Some(header) = lines.next() else {
        let _ = writeln!(out, "  empty file");
        return out;
    };

    if header == "c1,c2,i1,i2,Acc@.25,Acc@.50,Acc" {
        let _ = writeln!(out, "  ablation table");
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                continue;
            }
            let mut label = Vec::new();
            for (cell, name) in cells.iter().zip(["c1", "c2", "i1", "i2"]) {
                if *cell == "1" {
                    label.push(name);
                }
            }
            let _ = writeln!(
                out,
                "  {:<11} Acc@.25 {:>7}  Acc@.50 {:>7}  Acc {:>7}",
                format!("{{{}}}", label.join(",")),
                cells[4],
                cells[5],
                cells[6]
            );
        }
    } else if header.starts_with("scene_id,query,branch") {
        let rows: Vec<Vec<String>> = lines.map(parse_csv_line).collect();
        let total = rows.len();
        let count = |idx: usize| rows.iter().filter(|r| r.get(idx).map(String::as_str) == Some("true")).count();
        let branch = |name: &str| {
            rows.iter().filter(|r| r.get(2).map(String::as_str) == Some(name)).count()
        };
        let _ = writeln!(out, "  per-query evaluation records: {total}");
        if total > 0 {
            let _ = writeln!(out, "  Acc@.25: {:.4}", count(5) as f64 / total as f64);
            let _ = writeln!(out, "  Acc@.50: {:.4}", count(6) as f64 / total as f64);
            let _ = writeln!(
                out,
                "  branches: {} category, {} instance",
                branch("category"),
                branch("instance")
            );
        }
    } else if header.starts_with("epoch ") {
        let all: Vec<&str> = std::iter::once(header).chain(lines).collect();
        let _ = writeln!(out, "  training log: {} epochs", all.len());
        if let (Some(first), Some(last)) = (all.first(), all.last()) {
            let _ = writeln!(out, "  first: {first}");
            let _ = writeln!(out, "  last:  {last}");
        }
    } else if header.starts_with("mode: ") {
        let _ = writeln!(out, "  evaluation summary");
        for line in std::iter::once(header).chain(lines) {
            let _ = writeln!(out, "  {line}");
        }
    } else {
        let _ = writeln!(out, "  unrecognized format; first line: {header}");
    }
    out
}

/// Minimal CSV field splitter understanding the double-quote escaping used
/// by the writers in this crate.
fn parse_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match c {
            '"' if !quoted && field.is_empty() => quoted = true,
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    field.push('"');
                } else {
                    quoted = false;
                }
            }
            ',' if !quoted => fields.push(std::mem::take(&mut field)),
            c => field.push(c),
        }
    }
    fields.push(field);
    fields
}
