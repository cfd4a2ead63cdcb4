//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or config error (nothing written),
//! 2 numeric fault during training (partial outputs flushed and flagged).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::Config;
use crate::data::{generate_synthetic_pda, load_csv_dataset, write_csv, DataError, PdaTask};
use crate::eval::{self, AblationVariant};
use crate::trainer::{self, load_checkpoint, prepare_data, save_checkpoint, MetricsRecord};
use crate::verify;

#[derive(Debug, Parser)]
#[command(
    name = "slm",
    about = "Selective partial domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override; repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic task as `data.csv`.
    GenData(Common),
    /// Train and write metrics, report and checkpoint.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the ablation sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        /// Extra rows: hard-pl, no-mix-dom, no-mix-cls, no-hausdorff.
        #[arg(long)]
        rows: Option<String>,
    },
    /// Write `features.csv` from a checkpoint.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every primitive and loss term.
    GradCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Numeric(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) | Failure::Runtime(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn build_config(c: &Common, base: Option<Config>) -> Result<Config, Failure> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &c.config {
        let text =
            fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(usage)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    for kv in &c.set {
        cfg.apply_override(kv).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn require_out(c: &Common) -> Result<PathBuf, Failure> {
    c.out.clone().ok_or_else(|| usage("--out DIR is required"))
}

/// The task a config describes: its CSV file or the synthetic generator.
pub fn load_task(cfg: &Config) -> Result<PdaTask, DataError> {
    if cfg.data_path.is_empty() {
        generate_synthetic_pda(&cfg.task_spec())
    } else {
        load_csv_dataset(Path::new(&cfg.data_path))
    }
}

fn create_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(v).map_err(runtime)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn echo_config(out: &Path, cfg: &Config) -> Result<(), Failure> {
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())
}

fn gen_data(c: &Common) -> Result<(), Failure> {
    let out = require_out(c)?;
    let cfg = build_config(c, None)?;
    let task = generate_synthetic_pda(&cfg.task_spec()).map_err(usage)?;
    create_out(&out)?;
    echo_config(&out, &cfg)?;
    let path = out.join("data.csv");
    write_csv(&task, &path).map_err(runtime)?;
    println!(
        "wrote {} ({} source, {} target rows)",
        path.display(),
        task.train.source.features.len(),
        task.train.target.features.len()
    );
    Ok(())
}

fn train(c: &Common) -> Result<(), Failure> {
    let out = require_out(c)?;
    let cfg = build_config(c, None)?;
    let task = load_task(&cfg).map_err(usage)?;
    create_out(&out)?;
    echo_config(&out, &cfg)?;
    let metrics_path = out.join("metrics.jsonl");
    let file = File::create(&metrics_path)
        .map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    let mut w = BufWriter::new(file);
    let mut sink = |r: &MetricsRecord| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
    };
    let result = trainer::train(&cfg, &task, &mut sink);
    w.flush().map_err(runtime)?;
    drop(w);
    match result {
        Ok(run) => {
            write_json(
                &out.join("report.json"),
                &json!({ "status": "ok", "report": run.report }),
            )?;
            save_checkpoint(&run.trainer.checkpoint(), &out.join("checkpoint.bin"))
                .map_err(runtime)?;
            let r = &run.report;
            println!(
                "target accuracy {:.4} -> {:.4}; selector precision {} recall {}",
                r.initial_accuracy,
                r.final_accuracy,
                fmt_opt(r.selector.precision),
                fmt_opt(r.selector.recall)
            );
            Ok(())
        }
        Err(e) => {
            let numeric = e.is_numeric();
            let status = if numeric { "numeric_fault" } else { "error" };
            write_json(
                &out.join("report.json"),
                &json!({ "status": status, "error": e.to_string() }),
            )?;
            Err(if numeric {
                Failure::Numeric(e.to_string())
            } else {
                runtime(e)
            })
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn loaded(
    c: &Common,
    checkpoint: &Path,
) -> Result<(Config, trainer::Checkpoint, PdaTask), Failure> {
    let ckpt =
        load_checkpoint(checkpoint).map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let cfg = build_config(c, Some(ckpt.config.clone()))?;
    let task = load_task(&cfg).map_err(usage)?;
    if task.train.dim() != ckpt.shapes.input_dim
        || task.train.num_classes != ckpt.shapes.num_classes
    {
        return Err(usage("dataset shape does not match the checkpoint"));
    }
    Ok((cfg, ckpt, task))
}

fn eval_cmd(c: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let out = require_out(c)?;
    let (cfg, ckpt, task) = loaded(c, checkpoint)?;
    let data = prepare_data(&cfg, &task);
    let (accuracy, selector, distances) =
        trainer::evaluate_models(&cfg, &ckpt.models, &data, &task).map_err(runtime)?;
    create_out(&out)?;
    echo_config(&out, &cfg)?;
    let report = json!({
        "status": "ok",
        "step": ckpt.step,
        "target_accuracy": accuracy,
        "selector": selector,
        "distances": distances,
    });
    write_json(&out.join("report.json"), &report)?;
    println!("target accuracy {accuracy:.4}");
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| usage(format!("--seeds `{x}`: {e}")))
        })
        .collect()
}

fn ablate(c: &Common, seeds: &str, rows: Option<&str>) -> Result<(), Failure> {
    let out = require_out(c)?;
    let cfg = build_config(c, None)?;
    let seeds = parse_seeds(seeds)?;
    if seeds.len() < 2 {
        return Err(usage("--seeds needs at least two seeds"));
    }
    let mut variants = AblationVariant::CANONICAL.to_vec();
    if let Some(r) = rows {
        for name in r.split(',').filter(|s| !s.trim().is_empty()) {
            variants.push(
                name.trim()
                    .parse()
                    .map_err(|e: String| usage(format!("--rows: {e}")))?,
            );
        }
    }
    if cfg.data_path.is_empty() {
        cfg.task_spec().validate().map_err(usage)?;
    } else {
        load_task(&cfg).map_err(usage)?;
    }
    create_out(&out)?;
    echo_config(&out, &cfg)?;
    let result = eval::run_ablation(&cfg, &seeds, &variants, |seed| {
        load_task(&Config {
            seed,
            ..cfg.clone()
        })
    });
    match result {
        Ok(rows) => {
            write_json(&out.join("ablation.json"), &rows)?;
            for r in &rows {
                println!("{:<14} mean {:.4} std {:.4}", r.name, r.mean, r.std);
            }
            Ok(())
        }
        Err(e) => {
            let numeric = matches!(&e, eval::EvalError::Row { source, .. } if source.is_numeric());
            let status = if numeric { "numeric_fault" } else { "error" };
            write_json(
                &out.join("ablation.json"),
                &json!({ "status": status, "error": e.to_string() }),
            )?;
            Err(if numeric {
                Failure::Numeric(e.to_string())
            } else {
                runtime(e)
            })
        }
    }
}

fn export(c: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let out = require_out(c)?;
    let (cfg, ckpt, task) = loaded(c, checkpoint)?;
    let data = prepare_data(&cfg, &task);
    let src = data.source_matrix();
    let selected = if cfg.select.enabled {
        eval::selector_decisions(&ckpt.models, &src).map_err(runtime)?
    } else {
        vec![true; src.rows()]
    };
    let csv = eval::features_csv(&ckpt.models, &data, &task.eval.target_labels, &selected)
        .map_err(runtime)?;
    create_out(&out)?;
    write_file(&out.join("features.csv"), csv.as_bytes())?;
    println!("wrote {} rows", src.rows() + data.target.features.len());
    Ok(())
}

fn grad_check(out: Option<&Path>, seed: u64) -> Result<(), Failure> {
    let rows = verify::run_suite(seed).map_err(runtime)?;
    println!("{:<22} {:>8} {:>12}", "check", "points", "max_rel_err");
    for r in &rows {
        println!("{:<22} {:>8} {:>12.3e}", r.name, r.points, r.max_rel_err);
    }
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if let Some(out) = out {
        create_out(out)?;
        write_json(&out.join("grad_check.json"), &rows)?;
    }
    if worst < verify::TOLERANCE {
        println!("all checks below {:e}", verify::TOLERANCE);
        Ok(())
    } else {
        Err(runtime(format!(
            "max relative error {worst:e} exceeds {:e}",
            verify::TOLERANCE
        )))
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval { common, checkpoint } => eval_cmd(common, checkpoint),
        Command::Ablate {
            common,
            seeds,
            rows,
        } => ablate(common, seeds, rows.as_deref()),
        Command::ExportFeatures { common, checkpoint } => export(common, checkpoint),
        Command::GradCheck { out, seed } => grad_check(out.as_deref(), *seed),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}
