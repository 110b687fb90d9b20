//! `kcp`: train, prune, evaluate and measure CNNs with kernel cluster pruning.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data or format error,
//! 4 numerical failure.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kcp_core::ckpt::{load_checkpoint, save_checkpoint};
use kcp_core::distill::Teacher;
use kcp_core::kcp::run_schedule;
use kcp_core::metrics::{
    conv_flops, emit_report, flops_of_graph, flops_with_masks, merge_reports, write_atomic, MetricsReport,
    ReportFormat,
};
use kcp_core::train::{evaluate, fit};
use kcp_core::{ErrorClass, MaskSet, ModelGraph, ModelState};
use serde_json::json;

use settings::{data_sources, ensure_dir, DataSource, Problems, Settings, UsageError};

#[derive(Parser)]
#[command(name = "kcp", version, about = "Kernel cluster pruning for CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from seeded initialization or a checkpoint
    Train {
        #[command(flatten)]
        settings: Settings,
        /// Print a JSON summary to stdout
        #[arg(long)]
        json: bool,
    },
    /// Prune a trained checkpoint with the cluster-center schedule
    Prune {
        /// Checkpoint to prune
        checkpoint: PathBuf,
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        json: bool,
    },
    /// Accuracy and loss of a checkpoint
    Eval {
        checkpoint: PathBuf,
        /// Samples to evaluate: idx:IMAGES,LABELS or synth:SEED,N,CLASSES,SIZE,SEP
        #[arg(long)]
        data: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// FLOPs and parameter count of an architecture spec or checkpoint
    Flops {
        /// Checkpoint; masked FLOPs are reported from its masks
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        arch: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Merge run reports into one CSV
    Report {
        /// report.json files, or run directories containing one
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output CSV; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<kcp_core::Error>() {
            return match core.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            };
        }
    }
    3
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { settings, json } => cmd_train(settings.resolve()?, json),
        Command::Prune {
            checkpoint,
            settings,
            json,
        } => cmd_prune(&checkpoint, settings.resolve()?, json),
        Command::Eval {
            checkpoint,
            data,
            limit,
            json,
        } => cmd_eval(&checkpoint, &data, limit, json),
        Command::Flops { checkpoint, arch, json } => cmd_flops(checkpoint.as_deref(), arch.as_deref(), json),
        Command::Report { reports, out } => cmd_report(&reports, out.as_deref()),
    }
}

fn write_outputs(out: &Path, ckpt_name: &str, graph: &ModelGraph, state: &ModelState, masks: Option<&MaskSet>, report: &MetricsReport) -> anyhow::Result<()> {
    ensure_dir(out)?;
    save_checkpoint(graph, state, masks, &out.join(ckpt_name))?;
    emit_report(report, ReportFormat::Json, &out.join("report.json"))?;
    emit_report(report, ReportFormat::Csv, &out.join("report.csv"))?;
    Ok(())
}

fn summary(report: &MetricsReport, checkpoint: &Path) -> serde_json::Value {
    let last = report.last();
    json!({
        "command": report.metadata.command,
        "graph": report.metadata.graph,
        "seed": report.metadata.seed,
        "epochs": report.records.len(),
        "baseline_accuracy": report.metadata.baseline_accuracy,
        "eval_accuracy": last.map(|r| r.eval_accuracy),
        "eval_loss": last.map(|r| r.eval_loss),
        "kernel_sparsity": last.map(|r| r.kernel_sparsity),
        "flops": last.map(|r| r.flops),
        "baseline_flops": report.metadata.baseline_flops,
        "checkpoint": checkpoint,
    })
}

fn cmd_train(s: Settings, json: bool) -> anyhow::Result<()> {
    let mut problems = Problems::default();
    let seed = problems.require(&s.seed, "--seed");
    let out = problems.require(&s.out, "--out");
    if s.arch.is_none() && s.resume.is_none() {
        problems.push("missing --arch (or --resume)");
    }
    problems.existing(&s.arch, "architecture spec");
    problems.existing(&s.resume, "checkpoint");
    let sources = data_sources(&s, &mut problems);
    let train_cfg = s.train_config(10);
    problems.check(train_cfg.validate());
    problems.finish()?;
    let (seed, out, (train_src, eval_src)) = (seed.unwrap(), out.unwrap(), sources.unwrap());

    let (graph, mut state) = match &s.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            (ck.graph, ck.state)
        }
        None => {
            let graph = ModelGraph::load(s.arch.as_deref().unwrap())?;
            let state = ModelState::init(&graph, seed);
            (graph, state)
        }
    };
    let train = train_src.load(s.limit)?;
    let eval = eval_src.load(s.limit)?;
    let report = fit(&graph, &mut state, &train, &eval, &train_cfg, seed, 0)?;
    write_outputs(&out, "model.ckpt", &graph, &state, None, &report)?;
    let ckpt = out.join("model.ckpt");
    if json {
        println!("{}", summary(&report, &ckpt));
    } else if let Some(last) = report.last() {
        println!(
            "trained {} for {} epochs: accuracy {:.4}, loss {:.4} -> {}",
            graph.name,
            report.records.len(),
            last.eval_accuracy,
            last.eval_loss,
            ckpt.display()
        );
    }
    Ok(())
}

fn cmd_prune(checkpoint: &Path, s: Settings, json: bool) -> anyhow::Result<()> {
    let mut problems = Problems::default();
    let seed = problems.require(&s.seed, "--seed");
    let out = problems.require(&s.out, "--out");
    problems.existing(&Some(checkpoint.to_path_buf()), "checkpoint");
    problems.existing(&s.distill, "teacher checkpoint");
    let sources = data_sources(&s, &mut problems);
    let prune_cfg = s.prune_config(seed.unwrap_or(0));
    problems.check(prune_cfg.validate());
    let train_cfg = s.train_config(prune_cfg.epochs);
    problems.check(train_cfg.validate());
    problems.finish()?;
    let (out, (train_src, eval_src)) = (out.unwrap(), sources.unwrap());

    let ck = load_checkpoint(checkpoint)?;
    let teacher = match &s.distill {
        None => None,
        Some(path) => {
            let t = load_checkpoint(path)?;
            let default_tap = ck.graph.layers.len().saturating_sub(2);
            let cfg = s.distill_config(default_tap);
            Some(Teacher::new(t.graph, t.state, cfg, &ck.graph)?)
        }
    };
    let train = train_src.load(s.limit)?;
    let eval = eval_src.load(s.limit)?;
    let result = run_schedule(&ck.graph, ck.state, &train, &eval, &prune_cfg, &train_cfg, teacher.as_ref())?;
    write_outputs(
        &out,
        "pruned.ckpt",
        &ck.graph,
        &result.state,
        Some(&result.prune_state.masks),
        &result.report,
    )?;
    let ckpt = out.join("pruned.ckpt");
    if json {
        println!("{}", summary(&result.report, &ckpt));
    } else if let Some(last) = result.report.last() {
        println!(
            "pruned {} to kernel sparsity {:.4}: accuracy {:.4} (baseline {:.4}), FLOPs {} of {} -> {}",
            ck.graph.name,
            last.kernel_sparsity,
            last.eval_accuracy,
            result.report.metadata.baseline_accuracy.unwrap_or(f64::NAN),
            last.flops,
            result.report.metadata.baseline_flops,
            ckpt.display()
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &str, limit: Option<usize>, json: bool) -> anyhow::Result<()> {
    let source = DataSource::parse(data).map_err(|e| UsageError(vec![e]))?;
    let ck = load_checkpoint(checkpoint)?;
    let dataset = source.load(limit)?;
    let stats = evaluate(&ck.graph, &ck.state, &dataset, 256)?;
    if json {
        println!(
            "{}",
            json!({ "accuracy": stats.accuracy, "loss": stats.loss, "samples": dataset.len() })
        );
    } else {
        println!("accuracy {:.6} loss {:.6} over {} samples", stats.accuracy, stats.loss, dataset.len());
    }
    Ok(())
}

fn cmd_flops(checkpoint: Option<&Path>, arch: Option<&Path>, json: bool) -> anyhow::Result<()> {
    let (graph, masks) = match (checkpoint, arch) {
        (Some(c), None) => {
            let ck = load_checkpoint(c)?;
            (ck.graph, Some(ck.masks))
        }
        (None, Some(a)) => (ModelGraph::load(a)?, None),
        _ => return Err(UsageError(vec!["give a checkpoint or --arch".into()]).into()),
    };
    let flops = flops_of_graph(&graph)?;
    let conv = conv_flops(&graph)?;
    let masked = masks.as_ref().map(|m| flops_with_masks(&graph, m)).transpose()?;
    let params = graph.param_count();
    if json {
        println!(
            "{}",
            json!({
                "graph": graph.name,
                "flops": flops,
                "conv_flops": conv,
                "params": params,
                "masked_flops": masked,
            })
        );
    } else {
        println!("graph        {}", graph.name);
        println!("flops        {flops} ({flops:.2E})");
        println!("conv flops   {conv}");
        println!("params       {params}");
        if let Some(m) = masked {
            println!("masked flops {m} ({m:.2E})");
        }
    }
    Ok(())
}

fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let run = if p.is_dir() {
            p.file_name().map(|n| n.to_string_lossy().into_owned())
        } else {
            p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned())
        }
        .unwrap_or_else(|| p.display().to_string());
        let report = MetricsReport::load(&file).with_context(|| format!("loading {}", file.display()))?;
        reports.push((run, report));
    }
    let csv = merge_reports(&reports);
    match out {
        Some(path) => write_atomic(path, &csv)?,
        None => print!("{}", String::from_utf8(csv).expect("csv is UTF-8")),
    }
    Ok(())
}
