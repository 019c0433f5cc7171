use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ackt_core::backbone::GruBackbone;
use ackt_core::config::DataSource;
use ackt_core::data::{generate_synthetic, write_csv, Dataset};
use ackt_core::pipeline::{
    self, cross_pair, load_dataset, run_cluster, run_eval, run_pretrain, run_source_stage, run_sweep, run_train,
    run_with_source, split_plan, write_report, write_run, StageManifest, SweepSpec, BACKBONE_CKPT, CATEGORY_CKPT,
    TRANSFER_CKPT,
};
use ackt_core::{AcktError, EvalReport, ExperimentConfig, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser, Debug)]
#[command(version, about = "Cross-discipline cold-start knowledge tracing experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config (`key = value` lines).
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, manifests and reports.
    #[arg(long, value_name = "DIR", default_value = "runs/ackt", global = true)]
    out: PathBuf,
    /// Interaction CSV; synthetic data is used when absent.
    #[arg(long, value_name = "CSV", global = true, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Synthetic generator settings (`key = value`, `synth.` prefix optional).
    #[arg(long, value_name = "PATH", global = true)]
    synth: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Default)]
struct Artifacts {
    /// Backbone checkpoint [default: <out>/backbone.ckpt].
    #[arg(long, value_name = "PATH")]
    backbone: Option<PathBuf>,
    /// Category checkpoint [default: <out>/categories.ckpt].
    #[arg(long, value_name = "PATH")]
    categories: Option<PathBuf>,
    /// Stage-2 checkpoint [default: <out>/transfer.ckpt].
    #[arg(long, value_name = "PATH")]
    transfer: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic dataset as CSV.
    Synth,
    /// Pretrain the source backbone.
    Pretrain,
    /// Cluster source students with a pretrained backbone.
    Cluster(#[command(flatten)] Artifacts),
    /// Train the stage-2 mapping on the overlap students.
    Train(#[command(flatten)] Artifacts),
    /// Evaluate a trained mapping on the cold-start test students.
    Eval(#[command(flatten)] Artifacts),
    /// Run every stage and write a full run manifest.
    Run,
    /// One run per value over a shared source stage.
    Sweep {
        /// `param=v1,v2,...` with param one of overlap_frac, experts, n_samples, lambda.
        #[arg(long)]
        spec: String,
    },
    /// Dump source, mapped and target state vectors as TSV.
    ExportStates(#[command(flatten)] Artifacts),
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut text = match &g.config {
        Some(path) => fs::read_to_string(path)?,
        None => String::new(),
    };
    text.push('\n');
    if let Some(path) = &g.synth {
        for line in fs::read_to_string(path)?.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with("synth.") {
                text.push_str(line);
            } else {
                text.push_str("synth.");
                text.push_str(line);
            }
            text.push('\n');
        }
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| AcktError::Config(format!("--set `{kv}`: expected key=value")))?;
        text.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    if let Some(seed) = g.seed {
        text.push_str(&format!("seed = {seed}\n"));
    }
    if let Some(data) = &g.data {
        text.push_str(&format!("data = {}\n", data.display()));
    }
    ExperimentConfig::parse_str(&text)
}

fn or_default(path: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(name))
}

fn print_report(report: &EvalReport) {
    println!("{}", EvalReport::TSV_HEADER);
    println!("{}", report.tsv_row());
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(AcktError::Config("`synth` needs a synthetic data source, not a CSV".into()));
    };
    fs::create_dir_all(out)?;
    let ds = generate_synthetic(s)?;
    let path = out.join("data.csv");
    write_csv(&ds, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let started = Instant::now();
    let (pretrained, _) = run_pretrain(cfg, ds)?;
    let bb = GruBackbone {
        params: pretrained.params,
        index: pretrained.index,
    };
    let mut manifest = StageManifest::new("pretrain", cfg);
    manifest
        .checkpoints
        .insert("backbone".into(), pipeline::save_backbone(out, &bb)?);
    manifest.pretrain_history = pretrained.history;
    manifest.seconds = started.elapsed().as_secs_f64();
    manifest.write(out)?;
    match pretrained.best_val_auc {
        Some(auc) => println!("validation auc {auc:.4}"),
        None => println!("no pretraining epochs run"),
    }
    Ok(())
}

fn cluster(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, a: &Artifacts) -> Result<()> {
    let started = Instant::now();
    let bb = pipeline::load_backbone(&or_default(&a.backbone, out, BACKBONE_CKPT))?;
    let model = run_cluster(cfg, ds, &bb)?;
    let mut manifest = StageManifest::new("cluster", cfg);
    manifest
        .checkpoints
        .insert("categories".into(), pipeline::save_categories(out, &model)?);
    manifest.seconds = started.elapsed().as_secs_f64();
    manifest.write(out)?;
    print!("{}", model.silhouette_tsv());
    println!("k={}", model.k);
    Ok(())
}

fn train(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, a: &Artifacts) -> Result<()> {
    let bb = pipeline::load_backbone(&or_default(&a.backbone, out, BACKBONE_CKPT))?;
    let categories = pipeline::load_categories(&or_default(&a.categories, out, CATEGORY_CKPT))?;
    let plan = split_plan(cfg, &cross_pair(cfg, ds)?)?;
    let stage = run_train(cfg, ds, &plan, &bb, &categories)?;
    let mut manifest = StageManifest::new("train", cfg);
    let path = a.transfer.clone().unwrap_or_else(|| out.join(TRANSFER_CKPT));
    let dir = path.parent().unwrap_or(out);
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or(TRANSFER_CKPT);
    manifest
        .checkpoints
        .insert("transfer".into(), pipeline::save_transfer(dir, name, &stage.trained)?);
    manifest.checkpoints.insert(
        "untrained".into(),
        pipeline::save_transfer(out, "transfer_untrained.ckpt", &stage.untrained)?,
    );
    manifest.train_history = stage.history;
    manifest.seconds = stage.seconds;
    manifest.write(out)?;
    if let Some(epoch) = stage.best_epoch {
        println!("best epoch {epoch}");
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, a: &Artifacts) -> Result<()> {
    let bb = pipeline::load_backbone(&or_default(&a.backbone, out, BACKBONE_CKPT))?;
    let categories = pipeline::load_categories(&or_default(&a.categories, out, CATEGORY_CKPT))?;
    let model = pipeline::load_transfer(cfg, &or_default(&a.transfer, out, TRANSFER_CKPT))?;
    let plan = split_plan(cfg, &cross_pair(cfg, ds)?)?;
    let (report, audit) = run_eval(cfg, ds, &plan, &bb, &categories, &model)?;
    info!(
        "evaluation read {} source interactions and {} target queries, {} target responses",
        audit.source_interactions, audit.target_queries, audit.target_responses
    );
    write_report(out, &report)?;
    print_report(&report);
    Ok(())
}

fn run(cfg: &ExperimentConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let source = run_source_stage(cfg, ds)?;
    let mut outcome = run_with_source(cfg, ds, &source)?;
    write_run(out, &source, &mut outcome)?;
    print_report(&outcome.report);
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, spec: &str) -> Result<()> {
    let spec = SweepSpec::parse(spec)?;
    let source = run_source_stage(cfg, ds)?;
    let rows = run_sweep(cfg, ds, &source, &spec)?;
    let tsv = pipeline::sweep_tsv(&rows);
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn export_states(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, a: &Artifacts) -> Result<()> {
    let bb = pipeline::load_backbone(&or_default(&a.backbone, out, BACKBONE_CKPT))?;
    let categories = pipeline::load_categories(&or_default(&a.categories, out, CATEGORY_CKPT))?;
    let model = pipeline::load_transfer(cfg, &or_default(&a.transfer, out, TRANSFER_CKPT))?;
    let plan = split_plan(cfg, &cross_pair(cfg, ds)?)?;
    let tsv = pipeline::export_states(cfg, ds, &plan, &bb, &categories, &model)?;
    fs::create_dir_all(out)?;
    let path = out.join("states.tsv");
    fs::write(&path, tsv)?;
    println!("{}", path.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = cli.global.out.as_path();
    if let Command::Synth = cli.command {
        return synth(&cfg, out);
    }
    let ds = load_dataset(&cfg)?;
    match &cli.command {
        Command::Synth => unreachable!(),
        Command::Pretrain => pretrain(&cfg, &ds, out),
        Command::Cluster(a) => cluster(&cfg, &ds, out, a),
        Command::Train(a) => train(&cfg, &ds, out, a),
        Command::Eval(a) => eval(&cfg, &ds, out, a),
        Command::Run => run(&cfg, &ds, out),
        Command::Sweep { spec } => sweep(&cfg, &ds, out, spec),
        Command::ExportStates(a) => export_states(&cfg, &ds, out, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
