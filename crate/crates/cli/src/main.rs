use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use contlearn::analysis::{
    aggregate_metrics, compare_families, comparison_figure, figure_data, fit_probes, simultaneous_figure,
    write_curves, write_figures, write_fits, write_metric_table, FigureData, FitRow, MetricTable,
};
use contlearn::config::{PlanKind, RunConfig, RunManifest};
use contlearn::curriculum::{make_batch_plan, write_allocations_csv, write_batch_plans_csv};
use contlearn::design::{heterogeneous_plan, homogeneous_design, homogeneous_plan, ReplicationPlan, RunSpec, RunVariant};
use contlearn::engine::{
    read_jsonl, read_trial_log, run_sequence, run_simultaneous, write_outputs, ProbeRecord, RunOptions, RunOutcome,
    TrialLog, Workspace, MATERIALIZE_LIMIT, PROBE_LOG, TRIAL_LOG,
};
use contlearn::scenegen::{Dataset, Split};
use contlearn::{Error, Result};

const CONFIG_FILE: &str = "config.toml";
const SCENES: &str = "dataset/scenes.jsonl";

/// Continual-learning experiments: data generation, training runs, forgetting
/// probes and analysis.
#[derive(Parser)]
#[command(name = "contlearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scene dataset and write its manifest and tensors.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Skip the raw pixel tensors; the scene manifest alone reproduces them.
        #[arg(long)]
        no_tensors: bool,
    },
    /// Write the replication plan, allocations and batch plans.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Execute every run of the plan.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Execute the plan with forgetting probes enabled.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Fit forgetting curves and aggregate metrics over run logs.
    Analyze {
        /// Directory holding run logs (searched recursively).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only logs whose run id starts with this prefix (e.g. `shape-`).
        #[arg(long, default_value = "")]
        run_prefix: String,
    },
    /// Write figure-data CSVs and SVG plots.
    ExportFigures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "")]
        run_prefix: String,
        /// Logs of a baseline condition; adds a difference figure.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: paper or desk.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Select {
    /// Worker threads for independent runs.
    #[arg(long)]
    parallel: Option<usize>,
    /// Continue runs from their latest checkpoints.
    #[arg(long)]
    resume: bool,
    /// Only these run ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    run_id: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::desk(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Infeasible(_) => "infeasible",
        Error::Balance(_) => "balance",
        Error::Stratification { .. } => "stratification",
        Error::Shape(_) => "shape",
        Error::NonFinite { .. } => "non_finite",
        Error::NotConverged { .. } => "not_converged",
        Error::Degenerate(_) => "degenerate",
        Error::MixedConfig(_) => "mixed_config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
        Error::Format(_) => "format",
    }
}

struct Failure {
    error: Error,
    run_id: Option<String>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { error, run_id: None }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rec = json!({"error": "usage", "message": e.to_string().trim()});
            eprintln!("{rec}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut rec = json!({"error": error_kind(&f.error), "message": f.error.to_string()});
            if let Some(id) = f.run_id {
                rec["run_id"] = json!(id);
            }
            eprintln!("{rec}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Generate { common, no_tensors } => generate(&common.load()?, !no_tensors)?,
        Command::Plan { common } => plan(&common.load()?)?,
        Command::Run { common, select } => run(common.load()?, &select)?,
        Command::Probe { common, select } => {
            let mut cfg = common.load()?;
            cfg.probes.enabled = true;
            run(cfg, &select)?
        }
        Command::Analyze { input, out, run_prefix } => {
            analyze(&input, &out.unwrap_or_else(|| input.join("analysis")), &run_prefix)?
        }
        Command::ExportFigures { input, out, run_prefix, baseline } => export_figures(
            &input,
            &out.unwrap_or_else(|| input.join("figures")),
            &run_prefix,
            baseline.as_deref(),
        )?,
    }
    Ok(())
}

fn seeds(cfg: &RunConfig, runs: &[RunSpec]) -> BTreeMap<String, u64> {
    let mut s: BTreeMap<String, u64> = runs.iter().map(|r| (r.run_id.clone(), r.seed)).collect();
    s.insert("master".into(), cfg.seed);
    s
}

fn finish(dir: &Path, cfg: &RunConfig, seeds: BTreeMap<String, u64>) -> Result<()> {
    RunManifest::build(dir, cfg, seeds)?.write(dir)
}

fn generate(cfg: &RunConfig, tensors: bool) -> Result<()> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out.join("dataset"))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let ws = Workspace::new(cfg.clone())?;
    ws.dataset.write_manifest(&out.join(SCENES))?;
    if tensors {
        ws.dataset.write_tensors(Split::Train, &out.join("dataset/train.f32"))?;
        ws.dataset.write_tensors(Split::Holdout, &out.join("dataset/holdout.f32"))?;
    }
    finish(out, cfg, seeds(cfg, &[]))?;
    println!(
        "{}",
        json!({"command": "generate", "train": ws.dataset.len(Split::Train), "holdout": ws.dataset.len(Split::Holdout), "dir": out})
    );
    Ok(())
}

fn build_plan(cfg: &RunConfig) -> Result<ReplicationPlan> {
    let catalog = cfg.generator.catalog()?;
    let variant = RunVariant {
        curriculum: cfg.curriculum,
        task_mod_layer: cfg.model.task_mod_layer,
        maml: cfg.maml.enabled,
    };
    match (cfg.plan.kind, cfg.plan.dimension) {
        (PlanKind::Homogeneous, Some(d)) => homogeneous_plan(&catalog, d, cfg.plan.n_blocks, cfg.seed, &variant),
        (PlanKind::Homogeneous, None) => homogeneous_design(&catalog, cfg.plan.n_blocks, cfg.seed, &variant),
        (PlanKind::Heterogeneous, _) => heterogeneous_plan(&catalog, cfg.n_episodes, cfg.plan.n_blocks, cfg.seed, &variant),
    }
}

fn plan(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let dir = out.join("plan");
    std::fs::create_dir_all(&dir)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let p = build_plan(cfg)?;
    std::fs::write(dir.join("plan.json"), p.to_json()?)?;
    p.write_csv(File::create(dir.join("plan.csv"))?)?;
    let allocs = (1..=cfg.n_episodes)
        .map(|e| cfg.curriculum.allocate(e, cfg.epoch_size))
        .collect::<Result<Vec<_>>>()?;
    write_allocations_csv(File::create(dir.join("allocations.csv"))?, &allocs)?;
    let plans = allocs
        .iter()
        .map(|a| make_batch_plan(a, cfg.n_batches, cfg.batch_size))
        .collect::<Result<Vec<_>>>()?;
    write_batch_plans_csv(File::create(dir.join("batch_plans.csv"))?, &plans)?;
    finish(out, cfg, seeds(cfg, &p.runs))?;
    println!("{}", json!({"command": "plan", "runs": p.runs.len(), "dir": dir}));
    Ok(())
}

/// Loads the generated dataset when present; otherwise regenerates it.
fn workspace(cfg: &RunConfig) -> Result<Workspace> {
    let scenes = cfg.output_dir.join(SCENES);
    if !scenes.exists() {
        return Workspace::new(cfg.clone());
    }
    let mut ds = Dataset::read_manifest(&scenes, cfg.generator.clone())?;
    if (ds.len(Split::Train) + ds.len(Split::Holdout)) * ds.image_len() * 4 <= MATERIALIZE_LIMIT {
        ds.materialize();
    }
    Workspace::with_dataset(cfg.clone(), ds)
}

fn run(cfg: RunConfig, select: &Select) -> Result<(), Failure> {
    let mut cfg = cfg;
    if let Some(p) = select.parallel {
        cfg.parallelism = p;
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let mut runs = build_plan(&cfg)?.runs;
    if !select.run_id.is_empty() {
        if let Some(id) = select.run_id.iter().find(|id| !runs.iter().any(|r| &r.run_id == *id)) {
            return Err(Error::Config(format!("run id '{id}' is not in the plan")).into());
        }
        runs.retain(|r| select.run_id.contains(&r.run_id));
    }
    let ws = workspace(&cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<TrialLog, Failure>> = pool.install(|| {
        runs.par_iter()
            .map(|spec| {
                execute(&ws, spec, select.resume).map_err(|error| Failure {
                    error,
                    run_id: Some(spec.run_id.clone()),
                })
            })
            .collect()
    });
    let mut logs = Vec::with_capacity(results.len());
    for r in results {
        logs.push(r?);
    }
    finish(&out, &cfg, seeds(&cfg, &runs))?;
    for log in &logs {
        let epochs: Vec<usize> = log.episodes.iter().map(|e| e.epochs).collect();
        println!(
            "{}",
            json!({"run_id": log.run_id, "status": log.status, "converged": log.converged(), "epochs": epochs})
        );
    }
    Ok(())
}

fn execute(ws: &Workspace, spec: &RunSpec, resume: bool) -> Result<TrialLog> {
    let cfg = &ws.config;
    let dir = cfg.output_dir.join("runs").join(&spec.run_id);
    let log = if cfg.simultaneous {
        let n = cfg.n_episodes.min(spec.order.len());
        let log = run_simultaneous(ws, &spec.run_id, &spec.order[..n], spec.seed)?;
        write_outputs(&dir, &RunOutcome { log: log.clone(), probes: Vec::new() })?;
        log
    } else {
        let opts = RunOptions {
            out_dir: Some(dir.clone()),
            resume,
            stop_after: None,
        };
        run_sequence(ws, spec, &opts)?.log
    };
    finish(&dir, cfg, seeds(cfg, std::slice::from_ref(spec)))?;
    Ok(log)
}

fn find_files(dir: &Path, name: &str, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n == "checkpoints") {
                continue;
            }
            find_files(&p, name, found)?;
        } else if p.file_name().is_some_and(|n| n == name) {
            found.push(p);
        }
    }
    Ok(())
}

struct Logs {
    trials: Vec<TrialLog>,
    probes: Vec<ProbeRecord>,
}

fn collect_logs(input: &Path, prefix: &str) -> Result<Logs> {
    let mut paths = Vec::new();
    find_files(input, TRIAL_LOG, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::MixedConfig(format!("no {TRIAL_LOG} files under {}", input.display())));
    }
    let mut trials = paths.iter().map(|p| read_trial_log(p)).collect::<Result<Vec<_>>>()?;
    trials.retain(|l| l.run_id.starts_with(prefix));
    if trials.is_empty() {
        return Err(Error::MixedConfig(format!("no run ids under {} start with '{prefix}'", input.display())));
    }
    let mut probe_paths = Vec::new();
    find_files(input, PROBE_LOG, &mut probe_paths)?;
    let mut probes = Vec::new();
    for p in &probe_paths {
        probes.extend(read_jsonl::<ProbeRecord>(p)?.into_iter().filter(|r| r.run_id.starts_with(prefix)));
    }
    Ok(Logs { trials, probes })
}

fn fits_for(logs: &Logs) -> Result<Vec<FitRow>> {
    if logs.probes.is_empty() {
        eprintln!("{}", json!({"notice": "no probe logs; forgetting fits skipped"}));
        return Ok(Vec::new());
    }
    fit_probes(&logs.probes)
}

fn analyze(input: &Path, out: &Path, prefix: &str) -> Result<()> {
    let logs = collect_logs(input, prefix)?;
    let table = aggregate_metrics(&logs.trials)?;
    std::fs::create_dir_all(out)?;
    write_metric_table(File::create(out.join("metrics.csv"))?, &table)?;
    write_curves(File::create(out.join("curves.csv"))?, &table)?;
    let fits = fits_for(&logs)?;
    if !fits.is_empty() {
        write_fits(File::create(out.join("fits.csv"))?, &fits)?;
        std::fs::write(out.join("families.json"), serde_json::to_string_pretty(&compare_families(&fits))?)?;
    }
    let figs = figure_data(&logs.trials, &logs.probes, &fits)?;
    write_figures(&out.join("figures"), &figs)?;
    println!(
        "{}",
        json!({"command": "analyze", "logs": table.n_logs, "cells": table.cells.len(), "fits": fits.len(), "dir": out})
    );
    Ok(())
}

fn export_figures(input: &Path, out: &Path, prefix: &str, baseline: Option<&Path>) -> Result<()> {
    let logs = collect_logs(input, prefix)?;
    let fits = fits_for(&logs)?;
    let mut figs: Vec<FigureData> = figure_data(&logs.trials, &logs.probes, &fits)?;
    for log in logs.trials.iter().filter(|l| l.episodes.len() == 1 && l.order.len() > 1) {
        let mut f = simultaneous_figure(log);
        f.name = format!("{}_{}", f.name, log.run_id);
        figs.push(f);
    }
    if let Some(b) = baseline {
        let base: MetricTable = aggregate_metrics(&collect_logs(b, prefix)?.trials)?;
        let cond = aggregate_metrics(&logs.trials)?;
        figs.push(comparison_figure("trials_increase_vs_baseline", &base, &cond));
    }
    write_figures(out, &figs)?;
    println!("{}", json!({"command": "export-figures", "figures": figs.len(), "dir": out}));
    Ok(())
}
