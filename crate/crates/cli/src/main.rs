//! `ncdlab`: dataset generation, training, evaluation and the numerical
//! checks from one binary.
//!
//! Exit codes: 0 on success, 1 on numeric or check failure, 2 on usage,
//! configuration or file errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncdlab_core::datagen::{build_split, Corruption, ShiftMode, SyntheticSpec};
use ncdlab_core::diagnostics::{gradient_suite, GRAD_TOL};
use ncdlab_core::metrics::Scores;
use ncdlab_core::separability::{counterexample_surface, DEFAULT_K};
use ncdlab_core::tensor::io as cdt1;
use ncdlab_core::trainer::{
    report_from_attempts, run_seeds, severity_sweep, sweep_csv, trace_csv, ExperimentReport, TrainConfig,
};
use ncdlab_core::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "ncdlab", version, about = "Desk-scale cross-domain novel class discovery experiments")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "ncdlab-out")]
    out: PathBuf,
    /// Flat `key = value` configuration file applied on top of the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic cross-domain split to disk.
    GenData(GenDataArgs),
    /// Train every seed and write the report, traces, predictions,
    /// features and checkpoints.
    Train(TrainArgs),
    /// Score a predictions file against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every objective.
    Gradcheck(GradcheckArgs),
    /// Overlap estimates for the surface counterexample.
    Separability(SeparabilityArgs),
    /// Severity sweep over cmix and call, with and without style removal.
    Motivation(MotivationArgs),
    /// Aggregate several experiment reports into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value = "cmix")]
    shift: String,
    #[arg(long, default_value = "gaussian_blur")]
    corruption: String,
    #[arg(long, default_value_t = 5)]
    severity: u8,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
}

/// Overrides applied after the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    num_seeds: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    severity: Option<u8>,
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    corruption: Option<String>,
    /// Repeatable `key=value` setting using the config-file keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Style-removal weight.
    #[arg(long)]
    w: Option<f64>,
    /// Style-removal objective: orth, cossimi or corr.
    #[arg(long)]
    style: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// CSV with a `prediction` column, or one integer per line.
    #[arg(long)]
    predictions: PathBuf,
    /// Ground truth in the same formats (column `label`). Defaults to the
    /// `label` column of the predictions file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    batches: u64,
}

#[derive(Args, Debug)]
struct SeparabilityArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Args, Debug)]
struct MotivationArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Weight of the orthogonality objective when the module is on.
    #[arg(long, default_value_t = 0.01)]
    w: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `report.json` files or directories containing one.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

/// Failure of a check that ran to completion.
struct CheckFailed(String);

enum Failure {
    Lib(Error),
    Check(CheckFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(Error::Json(e))
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Separability(a) => separability(cli, a),
        Command::Motivation(a) => motivation(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

fn emit(cli: &Cli, value: &Value, table: impl FnOnce() -> String) {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
    } else {
        print!("{}", table());
    }
}

fn write_json(path: impl AsRef<Path>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CmdResult {
    let spec = SyntheticSpec {
        image_size: a.image_size,
        num_classes: a.classes,
        samples_per_class: a.samples_per_class,
        corruption: Corruption::parse(&a.corruption)?,
        severity: a.severity,
        shift_mode: ShiftMode::parse(&a.shift)?,
        seed: cli.seed.unwrap_or(0),
    };
    let split = build_split(&spec)?;
    split.save(&cli.out)?;
    let value = json!({
        "out": cli.out,
        "labeled": split.labeled.len(),
        "unlabeled": split.unlabeled.len(),
        "seen_classes": spec.seen_classes().collect::<Vec<_>>(),
        "novel_classes": spec.novel_classes().collect::<Vec<_>>(),
    });
    emit(cli, &value, || {
        format!(
            "wrote {} labeled (classes {:?}) and {} unlabeled (classes {:?}) images to {}\n",
            split.labeled.len(),
            spec.seen_classes(),
            split.unlabeled.len(),
            spec.novel_classes(),
            cli.out.display()
        )
    });
    Ok(())
}

fn base_config(cli: &Cli, o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk();
    if let Some(path) = &cli.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(v) = o.epochs {
        set("epochs", v.to_string())?;
    }
    if let Some(v) = o.num_seeds {
        set("num_seeds", v.to_string())?;
    }
    if let Some(v) = o.samples_per_class {
        set("samples_per_class", v.to_string())?;
    }
    if let Some(v) = o.severity {
        set("severity", v.to_string())?;
    }
    if let Some(v) = &o.shift {
        set("shift_mode", v.clone())?;
    }
    if let Some(v) = &o.corruption {
        set("corruption", v.clone())?;
    }
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set(k.trim(), v.trim().to_string())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn summary_table(r: &ExperimentReport) -> String {
    let mut s = String::from("seed        acc      nmi      ari   |cos(z,v)| init -> final\n");
    for seed in &r.seeds {
        s.push_str(&format!(
            "{:<8} {:>7.4}  {:>7.4}  {:>7.4}   {:.4} -> {:.4}\n",
            seed.seed, seed.scores.acc, seed.scores.nmi, seed.scores.ari, seed.heldout_cos_init, seed.heldout_cos_final
        ));
    }
    s.push_str(&format!(
        "mean±std {:.4}±{:.4}  {:.4}±{:.4}  {:.4}±{:.4}\n",
        r.acc.mean, r.acc.std, r.nmi.mean, r.nmi.std, r.ari.mean, r.ari.std
    ));
    s
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut cfg = base_config(cli, &a.overrides)?;
    if let Some(style) = &a.style {
        cfg.set("style", style)?;
    }
    if let Some(w) = a.w {
        cfg.set("w", &w.to_string())?;
    }
    cfg.validate()?;
    fs::write(cli.out.join("config.txt"), cfg.to_text())?;
    let attempts = run_seeds(&cfg)?;
    for at in &attempts {
        fs::write(cli.out.join(format!("traces_seed{}.csv", at.seed)), trace_csv(&at.trace))?;
        let Ok(run) = &at.outcome else { continue };
        let mut preds = String::from("row,label,prediction\n");
        for (i, (y, p)) in run.split.unlabeled.labels.iter().zip(&run.predictions).enumerate() {
            preds.push_str(&format!("{i},{y},{p}\n"));
        }
        fs::write(cli.out.join(format!("predictions_seed{}.csv", at.seed)), preds)?;
        cdt1::write(cli.out.join(format!("features_seed{}.cdt1", at.seed)), &run.features)?;
        run.model
            .save_checkpoint(cli.out.join(format!("checkpoint_seed{}", at.seed)), serde_json::to_value(cfg)?)?;
    }
    let report = report_from_attempts(&cfg, &attempts)?;
    let value = serde_json::to_value(&report)?;
    write_json(cli.out.join("report.json"), &value)?;
    emit(cli, &value, || summary_table(&report));
    Ok(())
}

/// Integer column `name` of a CSV with a header, or the only column of a
/// headerless file.
fn read_column(path: &Path, name: &str) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let header: Vec<&str> = first.split(',').map(str::trim).collect();
    let parse = |cell: &str, line: &str| {
        cell.trim().parse::<usize>().map_err(|_| Error::Format(format!("{}: bad value in line {line:?}", path.display())))
    };
    if header.len() == 1 && header[0].parse::<usize>().is_ok() {
        return std::iter::once(first).chain(lines).map(|l| parse(l, l)).collect();
    }
    let col = header
        .iter()
        .position(|h| *h == name)
        .ok_or_else(|| Error::Format(format!("{} has no {name:?} column", path.display())))?;
    lines
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            cells.get(col).ok_or_else(|| Error::Format(format!("{}: short line {l:?}", path.display()))).and_then(|c| parse(c, l))
        })
        .collect()
}

fn eval(cli: &Cli, a: &EvalArgs) -> CmdResult {
    let pred = read_column(&a.predictions, "prediction")?;
    let truth = read_column(a.labels.as_deref().unwrap_or(&a.predictions), "label")?;
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!("{} predictions for {} labels", pred.len(), truth.len())).into());
    }
    let scores = Scores::compute(&truth, &pred)?;
    let value = serde_json::to_value(scores)?;
    write_json(cli.out.join("scores.json"), &value)?;
    emit(cli, &value, || {
        format!("n = {}  acc {:.4}  nmi {:.4}  ari {:.4}\n", scores.n, scores.acc, scores.nmi, scores.ari)
    });
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> CmdResult {
    let entries = gradient_suite(a.batches, cli.seed.unwrap_or(0))?;
    let value = serde_json::to_value(&entries)?;
    write_json(cli.out.join("gradcheck.json"), &value)?;
    emit(cli, &value, || {
        let mut s = format!("{:<20} {:>14}  (tolerance {GRAD_TOL:e})\n", "objective", "max rel error");
        for e in &entries {
            s.push_str(&format!("{:<20} {:>14.3e}  {}\n", e.name, e.max_rel_error, if e.passed() { "ok" } else { "FAIL" }));
        }
        s
    });
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(CheckFailed(format!("gradient mismatch in {}", failed.join(", ")))))
    }
}

fn separability(cli: &Cli, a: &SeparabilityArgs) -> CmdResult {
    let r = counterexample_surface(a.n, a.k, cli.seed.unwrap_or(0))?;
    let value = json!({
        "n": r.n,
        "k": r.k,
        "seed": r.seed,
        "tau_xz": r.tau_xz,
        "tau_x": r.tau_x,
        "class1_fraction": r.class1_fraction,
    });
    write_json(cli.out.join("separability.json"), &value)?;
    emit(cli, &value, || {
        format!(
            "n = {}, k = {}\ntau_xz = {:.4}  (joint (x, z) coordinates)\ntau_x  = {:.4}  (x coordinate only)\nclass-1 fraction = {:.4}\n",
            r.n, r.k, r.tau_xz, r.tau_x, r.class1_fraction
        )
    });
    Ok(())
}

fn motivation(cli: &Cli, a: &MotivationArgs) -> CmdResult {
    let base = base_config(cli, &a.overrides)?;
    let cells = severity_sweep(&base, a.w)?;
    let csv = sweep_csv(&cells);
    fs::write(cli.out.join("motivation.csv"), &csv)?;
    let value = serde_json::to_value(&cells)?;
    write_json(cli.out.join("motivation.json"), &value)?;
    emit(cli, &value, || csv.replace(',', "\t"));
    Ok(())
}

fn report(cli: &Cli, a: &ReportArgs) -> CmdResult {
    let mut rows = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() { input.join("report.json") } else { input.clone() };
        let r: ExperimentReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
        rows.push((path, r));
    }
    let mut csv = String::from("report,shift_mode,severity,w,seeds,acc_mean,acc_std,nmi_mean,nmi_std,ari_mean,ari_std\n");
    for (path, r) in &rows {
        let c = &r.config;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            path.display(),
            c.data.shift_mode.name(),
            c.data.severity,
            c.loss.w,
            r.seeds.len(),
            r.acc.mean,
            r.acc.std,
            r.nmi.mean,
            r.nmi.std,
            r.ari.mean,
            r.ari.std
        ));
    }
    fs::write(cli.out.join("summary.csv"), &csv)?;
    let value: Vec<Value> = rows
        .iter()
        .map(|(path, r)| json!({ "report": path, "acc": r.acc, "nmi": r.nmi, "ari": r.ari, "seeds": r.seeds.len() }))
        .collect();
    emit(cli, &Value::Array(value), || {
        let mut s = String::new();
        for (path, r) in &rows {
            s.push_str(&format!(
                "{}: acc {:.4}±{:.4}  nmi {:.4}±{:.4}  ari {:.4}±{:.4}\n",
                path.display(),
                r.acc.mean,
                r.acc.std,
                r.nmi.mean,
                r.nmi.std,
                r.ari.mean,
                r.ari.std
            ));
        }
        s
    });
    Ok(())
}
