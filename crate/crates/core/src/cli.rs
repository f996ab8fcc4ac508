//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalOptions};
use crate::fkgraph::{build_graph, connected_components, graph_report};
use crate::pipeline::{generate, train, Checkpoint, RunConfig};
use crate::relschema::{ingest, write_dataset, RelationalSchema};
use crate::toy::{self, ToyConfig};

pub const THREADS_ENV: &str = "RELFLOW_THREADS";

#[derive(Parser, Debug)]
#[command(name = "relflow", version, about = "Synthesize relational databases with graph-conditional flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Fit(FitArgs),
    /// Generate a synthetic dataset from a checkpoint.
    Sample(SampleArgs),
    /// Score synthetic data against real data (fidelity and privacy).
    Eval(EvalArgs),
    /// Summarize a dataset and its foreign-key graph.
    Inspect(InspectArgs),
    /// Write the bundled two-table toy dataset.
    Toy(ToyArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed` when given.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value`, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Real data whose foreign-key graph is resampled.
    #[arg(long)]
    data: PathBuf,
    /// Schema of the real data; defaults to the checkpoint's.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory for the synthetic CSVs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Real data the model was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    synth: PathBuf,
    /// Real rows unseen in training; without it the real data is split in half.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// JSON report; a human-readable summary goes next to it with a `.txt` extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = crate::evalkit::DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Only check integrity; exit 1 on any violation.
    #[arg(long)]
    validate: bool,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ToyConfig::default().parents)]
    parents: usize,
    #[arg(long, default_value_t = ToyConfig::default().match_prob)]
    match_prob: f64,
}

/// Parse `args` (including the program name), run the command and return
/// the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        let _ = writeln!(err, "error: {e}");
        return 1;
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
        Command::Toy(a) => cmd_toy(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn report(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_fit(a: &FitArgs, out: &mut dyn Write) -> Result<()> {
    let schema = RelationalSchema::from_file(&a.schema)?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let ds = ingest(&schema, &a.data)?;
    let mut io_err = None;
    let ckpt = train(&ds, &cfg, &mut |s| {
        if let Err(e) = writeln!(out, "epoch={} train={:.6} val={:.6}", s.epoch, s.train, s.val) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io("<stdout>", e));
    }
    ckpt.save(&a.out)?;
    report(out, format_args!("best_epoch={} val={:.6} checkpoint={}", ckpt.best_epoch, ckpt.best_val, a.out.display()))
}

fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let schema = match &a.schema {
        Some(p) => RelationalSchema::from_file(p)?,
        None => ckpt.model.schema.structure(),
    };
    if schema.structure_hash() != ckpt.schema_hash() {
        return Err(Error::Schema(format!(
            "schema does not match checkpoint {}",
            a.ckpt.display()
        )));
    }
    let real = ingest(&schema, &a.data)?;
    let synth = generate(&ckpt.model, &real, a.seed)?;
    write_dataset(&synth, &a.out)?;
    for (spec, t) in synth.schema.tables.iter().zip(&synth.tables) {
        report(out, format_args!("table={} rows={}", spec.name, t.n_rows))?;
    }
    Ok(())
}

fn summary_path(report: &Path) -> PathBuf {
    if report.extension().is_some_and(|e| e == "txt") {
        report.with_extension("summary.txt")
    } else {
        report.with_extension("txt")
    }
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let schema = RelationalSchema::from_file(&a.schema)?;
    let real = ingest(&schema, &a.data)?;
    let synth = ingest(&schema, &a.synth)?;
    let holdout = a.holdout.as_deref().map(|p| ingest(&schema, p)).transpose()?;
    let opts = EvalOptions {
        alpha: a.alpha,
        seed: a.seed,
        ..EvalOptions::default()
    };
    let rep = evaluate(&real, holdout.as_ref(), &synth, &opts)?;
    std::fs::write(&a.out, rep.to_json()).map_err(|e| Error::io(&a.out, e))?;
    let txt = summary_path(&a.out);
    let summary = rep.summary();
    std::fs::write(&txt, &summary).map_err(|e| Error::io(&txt, e))?;
    write!(out, "{summary}").map_err(|e| Error::io("<stdout>", e))?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    report(out, format_args!("max_dda_accuracy={}", fmt(rep.dda.max_accuracy)))?;
    report(out, format_args!("worst_privacy_score={}", fmt(rep.worst_privacy_score)))
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let schema = RelationalSchema::from_file(&a.schema)?;
    if let Some(p) = &a.ckpt {
        let ckpt = Checkpoint::load(p)?;
        if ckpt.schema_hash() != schema.structure_hash() {
            return Err(Error::Schema(format!("checkpoint {} was trained on a different schema", p.display())));
        }
        if !a.validate {
            report(out, format_args!(
                "checkpoint: best_epoch={} val={:.6} epochs={}",
                ckpt.best_epoch,
                ckpt.best_val,
                ckpt.history.len()
            ))?;
        }
    }
    let Some(dir) = &a.data else {
        if !a.validate {
            for t in &schema.tables {
                report(out, format_args!("table {} ({} columns)", t.name, t.columns.len()))?;
            }
        }
        return Ok(());
    };
    let ds = ingest(&schema, dir)?;
    ds.validate()?;
    if a.validate {
        return report(out, format_args!("valid: {}", dir.display()));
    }
    let g = build_graph(&ds);
    let comps = connected_components(&g);
    write!(out, "{}", graph_report(&ds, &g, &comps)).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_toy(a: &ToyArgs, out: &mut dyn Write) -> Result<()> {
    let ds = toy::generate(&ToyConfig {
        parents: a.parents,
        match_prob: a.match_prob,
        seed: a.seed,
        ..ToyConfig::default()
    })?;
    write_dataset(&ds, &a.out)?;
    let path = a.out.join("schema.toml");
    std::fs::write(&path, toy::SCHEMA).map_err(|e| Error::io(&path, e))?;
    for (spec, t) in ds.schema.tables.iter().zip(&ds.tables) {
        report(out, format_args!("table={} rows={}", spec.name, t.n_rows))?;
    }
    Ok(())
}
