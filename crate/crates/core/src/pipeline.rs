//! End-to-end orchestration: pretrain, cluster, train, evaluate, sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{self, Backbone, EpochLog, GruBackbone, Pretrained};
use crate::cluster::{self, CategoryModel};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    build_splits, generate_synthetic, load_csv, mask_target_history, overlap_training_view, CrossPair, Dataset,
    SplitPlan, StudentId,
};
use crate::error::{AcktError, Result};
use crate::metrics::EvalReport;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transfer::{self, InputAudit, StudentFeatures, TransferEpoch, TransferModel};

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data {
        DataSource::Csv(path) => load_csv(path)?,
        DataSource::Synthetic(s) => generate_synthetic(s)?,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn cross_pair<'a>(cfg: &ExperimentConfig, ds: &'a Dataset) -> Result<CrossPair<'a>> {
    ds.pair(&cfg.source, &cfg.target)
}

pub fn split_plan(cfg: &ExperimentConfig, pair: &CrossPair<'_>) -> Result<SplitPlan> {
    build_splits(pair, cfg.seed, &cfg.splits)
}

/// Stage 1: source pretraining plus clustering of every source student.
#[derive(Clone, Debug)]
pub struct SourceStage {
    pub backbone: GruBackbone,
    pub categories: CategoryModel,
    pub pretrain_history: Vec<EpochLog>,
    pub pretrain_best_val_auc: Option<f64>,
    pub pretrain_seconds: f64,
    pub cluster_seconds: f64,
    /// Students the backbone saw; later stages must use the same split.
    pub pretrain_students: Vec<StudentId>,
}

pub fn run_pretrain(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Pretrained, SplitPlan)> {
    let pair = cross_pair(cfg, ds)?;
    let plan = split_plan(cfg, &pair)?;
    let pretrained = backbone::pretrain(&pair, &plan, &cfg.pretrain_config())?;
    Ok((pretrained, plan))
}

/// Clusters the final states of every student with source records.
pub fn run_cluster(cfg: &ExperimentConfig, ds: &Dataset, bb: &GruBackbone) -> Result<CategoryModel> {
    let pair = cross_pair(cfg, ds)?;
    let students: Vec<StudentId> = pair.source.sequences.keys().copied().collect();
    let (states, _) = bb.final_states(pair.source, &students)?;
    if states.len() < 2 {
        return Err(AcktError::Data(format!(
            "clustering needs at least 2 students with source records, got {}",
            states.len()
        )));
    }
    let ids: Vec<StudentId> = states.iter().map(|s| s.student).collect();
    let points: Vec<Vec<f64>> = states.into_iter().map(|s| s.vector).collect();
    let mut model = cluster::select_k(&ids, &points, cfg.k_max, &cfg.kmeans_config())?;
    model.centroids.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
    model.silhouette_by_k.values_mut().for_each(|v| *v = *v as f32 as f64);
    info!("selected K={} categories", model.k);
    Ok(model)
}

pub fn run_source_stage(cfg: &ExperimentConfig, ds: &Dataset) -> Result<SourceStage> {
    let started = Instant::now();
    let (pretrained, plan) = run_pretrain(cfg, ds)?;
    let pretrain_seconds = started.elapsed().as_secs_f64();
    let backbone = GruBackbone {
        params: pretrained.params,
        index: pretrained.index,
    };
    let started = Instant::now();
    let categories = run_cluster(cfg, ds, &backbone)?;
    Ok(SourceStage {
        backbone,
        categories,
        pretrain_history: pretrained.history,
        pretrain_best_val_auc: pretrained.best_val_auc,
        pretrain_seconds,
        cluster_seconds: started.elapsed().as_secs_f64(),
        pretrain_students: plan.pretrain,
    })
}

/// Stage-2 output plus the untrained model it started from.
#[derive(Clone, Debug)]
pub struct TargetStage {
    pub trained: TransferModel,
    pub untrained: TransferModel,
    pub history: Vec<TransferEpoch>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

pub fn run_train(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    plan: &SplitPlan,
    bb: &GruBackbone,
    categories: &CategoryModel,
) -> Result<TargetStage> {
    let started = Instant::now();
    let pair = cross_pair(cfg, ds)?;
    let train = overlap_training_view(plan, &pair);
    if train.is_empty() {
        return Err(AcktError::Data(format!(
            "overlap-training set is empty at overlap_frac = {}; raise overlap_frac",
            cfg.splits.overlap
        )));
    }
    let validation = mask_target_history(plan, &pair, false);
    let out = transfer::train_transfer(
        bb,
        pair.source,
        categories,
        &train,
        &validation,
        &plan.non_overlap_pool(),
        &cfg.transfer_config(),
    )?;
    Ok(TargetStage {
        trained: out.model,
        untrained: out.initial,
        history: out.history,
        best_epoch: out.best_epoch,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Cold-start evaluation on the test students.
pub fn run_eval(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    plan: &SplitPlan,
    bb: &GruBackbone,
    categories: &CategoryModel,
    model: &TransferModel,
) -> Result<(EvalReport, InputAudit)> {
    let started = Instant::now();
    let pair = cross_pair(cfg, ds)?;
    let view = mask_target_history(plan, &pair, true);
    let features = StudentFeatures::build(bb, pair.source, categories, &plan.test, cfg.max_seq_len)?;
    let (mut report, audit) = model.evaluate(&features, &view)?;
    if audit.target_responses != 0 {
        return Err(AcktError::Invalid("evaluation consumed target responses as inputs".into()));
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((report, audit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub variant: String,
    pub k: usize,
    pub silhouette_by_k: BTreeMap<usize, f64>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub pretrain_history: Vec<EpochLog>,
    pub train_history: Vec<TransferEpoch>,
    pub report: EvalReport,
    pub untrained_report: EvalReport,
    pub audit: InputAudit,
    pub phase_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AcktError::Data(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Record written by a single CLI stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config: ExperimentConfig,
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub pretrain_history: Vec<EpochLog>,
    #[serde(default)]
    pub train_history: Vec<TransferEpoch>,
    pub seconds: f64,
}

impl StageManifest {
    pub fn new(stage: &str, config: &ExperimentConfig) -> Self {
        StageManifest {
            stage: stage.to_string(),
            config: config.clone(),
            checkpoints: BTreeMap::new(),
            pretrain_history: Vec::new(),
            train_history: Vec::new(),
            seconds: 0.0,
        }
    }

    /// Writes `<stage>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.stage));
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| AcktError::Data(format!("manifest: {e}")))
    }
}

/// Everything one run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub plan: SplitPlan,
    pub target: TargetStage,
    pub report: EvalReport,
    pub untrained_report: EvalReport,
    pub audit: InputAudit,
    pub manifest: RunManifest,
}

/// Stage 2 and evaluation on top of a shared source stage.
pub fn run_with_source(cfg: &ExperimentConfig, ds: &Dataset, source: &SourceStage) -> Result<RunOutcome> {
    cfg.validate()?;
    let pair = cross_pair(cfg, ds)?;
    let plan = split_plan(cfg, &pair)?;
    if plan.pretrain != source.pretrain_students {
        return Err(AcktError::Invalid(
            "source stage was trained on a different split; reuse requires the same seed and fractions".into(),
        ));
    }
    let target = run_train(cfg, ds, &plan, &source.backbone, &source.categories)?;
    let (report, audit) = run_eval(cfg, ds, &plan, &source.backbone, &source.categories, &target.trained)?;
    let (untrained_report, _) = run_eval(cfg, ds, &plan, &source.backbone, &source.categories, &target.untrained)?;
    info!(
        "{}: test auc {:.4} (untrained {:.4})",
        cfg.ablation.label(),
        report.auc,
        untrained_report.auc
    );
    let phase_seconds = BTreeMap::from([
        ("pretrain".to_string(), source.pretrain_seconds),
        ("cluster".to_string(), source.cluster_seconds),
        ("train".to_string(), target.seconds),
        ("eval".to_string(), report.wall_clock_seconds),
    ]);
    let manifest = RunManifest {
        config: cfg.clone(),
        variant: cfg.ablation.label(),
        k: source.categories.k,
        silhouette_by_k: source.categories.silhouette_by_k.clone(),
        checkpoints: BTreeMap::new(),
        pretrain_history: source.pretrain_history.clone(),
        train_history: target.history.clone(),
        report: report.clone(),
        untrained_report: untrained_report.clone(),
        audit,
        phase_seconds,
    };
    Ok(RunOutcome {
        plan,
        target,
        report,
        untrained_report,
        audit,
        manifest,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(SourceStage, RunOutcome)> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let source = run_source_stage(cfg, &ds)?;
    let outcome = run_with_source(cfg, &ds, &source)?;
    Ok((source, outcome))
}

pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const CATEGORY_CKPT: &str = "categories.ckpt";
pub const TRANSFER_CKPT: &str = "transfer.ckpt";
pub const MANIFEST: &str = "manifest.json";

pub fn save_backbone(dir: &Path, bb: &GruBackbone) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(BACKBONE_CKPT);
    bb.to_params().save(&path)?;
    Ok(path)
}

pub fn load_backbone(path: &Path) -> Result<GruBackbone> {
    GruBackbone::from_params(&ParamStore::load(path)?)
}

/// Writes the category checkpoint, a `k=<K>` sidecar and the silhouette
/// table.
pub fn save_categories(dir: &Path, model: &CategoryModel) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(CATEGORY_CKPT);
    model.to_params().save(&path)?;
    fs::write(dir.join("categories.k"), format!("k={}\n", model.k))?;
    fs::write(dir.join("silhouette.tsv"), model.silhouette_tsv())?;
    Ok(path)
}

pub fn load_categories(path: &Path) -> Result<CategoryModel> {
    CategoryModel::from_params(&ParamStore::load(path)?)
}

pub fn save_transfer(dir: &Path, name: &str, model: &TransferModel) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    model.to_params().save(&path)?;
    Ok(path)
}

pub fn load_transfer(cfg: &ExperimentConfig, path: &Path) -> Result<TransferModel> {
    TransferModel::from_params(&ParamStore::load(path)?, &cfg.transfer_config().cmoe)
}

/// Saves checkpoints, manifest and report of a finished run into `dir`.
pub fn write_run(dir: &Path, source: &SourceStage, outcome: &mut RunOutcome) -> Result<()> {
    let mut ckpts = BTreeMap::new();
    ckpts.insert("backbone".to_string(), save_backbone(dir, &source.backbone)?);
    ckpts.insert("categories".to_string(), save_categories(dir, &source.categories)?);
    ckpts.insert("transfer".to_string(), save_transfer(dir, TRANSFER_CKPT, &outcome.target.trained)?);
    ckpts.insert(
        "untrained".to_string(),
        save_transfer(dir, "transfer_untrained.ckpt", &outcome.target.untrained)?,
    );
    outcome.manifest.checkpoints = ckpts;
    fs::write(dir.join(MANIFEST), outcome.manifest.to_json())?;
    fs::write(dir.join("config.txt"), outcome.manifest.config.to_config_string())?;
    write_report(dir, &outcome.report)?;
    Ok(())
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json())?;
    fs::write(
        dir.join("report.tsv"),
        format!("{}\n{}\n", EvalReport::TSV_HEADER, report.tsv_row()),
    )?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    OverlapFrac,
    Experts,
    NSamples,
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = AcktError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap_frac" => Ok(SweepParam::OverlapFrac),
            "experts" => Ok(SweepParam::Experts),
            "n_samples" => Ok(SweepParam::NSamples),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(AcktError::Config(format!("cannot sweep `{other}`"))),
        }
    }
}

impl SweepParam {
    pub fn key(&self) -> &'static str {
        match self {
            SweepParam::OverlapFrac => "overlap_frac",
            SweepParam::Experts => "experts",
            SweepParam::NSamples => "n_samples",
            SweepParam::Lambda => "lambda",
        }
    }

    /// `cfg` with this parameter set to `value`.
    pub fn apply(&self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(AcktError::Config(format!("{} must be a positive integer, got {v}", self.key())))
            }
        };
        match self {
            SweepParam::OverlapFrac => out.splits.overlap = value,
            SweepParam::Experts => out.experts = as_count(value)?,
            SweepParam::NSamples => out.n_samples = as_count(value)?,
            SweepParam::Lambda => out.lambda = value,
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl SweepSpec {
    /// Parses `param=v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let (param, values) = text
            .split_once('=')
            .ok_or_else(|| AcktError::Config(format!("sweep spec `{text}`: expected param=v1,v2,...")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| AcktError::Config(format!("sweep value `{v}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(AcktError::Config("sweep needs at least one value".into()));
        }
        Ok(SweepSpec {
            param: param.trim().parse()?,
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub variant: String,
    pub report: EvalReport,
}

pub const SWEEP_TSV_HEADER: &str = "param\tvalue\tseed\tvariant\tauc\tacc\trmse\tn\tseconds";

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_TSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.param, r.value, r.seed, r.variant, r.report.tsv_row());
    }
    out
}

/// One run per value, all sharing the source stage.
pub fn run_sweep(cfg: &ExperimentConfig, ds: &Dataset, source: &SourceStage, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let cells: Vec<ExperimentConfig> = spec
        .values
        .iter()
        .map(|&v| spec.param.apply(cfg, v))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, &value) in cells.iter().zip(&spec.values) {
        let outcome = run_with_source(cell, ds, source)?;
        rows.push(SweepRow {
            param: spec.param.key().to_string(),
            value,
            seed: cell.seed,
            variant: cell.ablation.label(),
            report: outcome.report,
        });
    }
    Ok(rows)
}

/// Rows `student kind category v0 .. v{d-1}` with `kind` one of `source`,
/// `mapped` and `target`. The target state of a student with target
/// records is the mapped state refined to best explain their observed
/// target responses under the trained head.
pub fn export_states(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    plan: &SplitPlan,
    bb: &GruBackbone,
    categories: &CategoryModel,
    model: &TransferModel,
) -> Result<String> {
    let pair = cross_pair(cfg, ds)?;
    let mut students: Vec<StudentId> = plan.test.iter().chain(&plan.overlap_train).copied().collect();
    students.sort_unstable();
    let features = StudentFeatures::build(bb, pair.source, categories, &students, cfg.max_seq_len)?;
    let present: Vec<StudentId> = students.into_iter().filter(|&s| features.contains(s)).collect();
    let mapped = model.mapped_states(&features, &present)?;
    let dim = bb.dim();
    let mut out = String::from("student\tkind\tcategory");
    for j in 0..dim {
        let _ = write!(out, "\tv{j}");
    }
    out.push('\n');
    let mut row = |s: StudentId, kind: &str, v: &[f64]| {
        let _ = write!(out, "{}\t{kind}\t{}", ds.students.name(s), features.categories[&s]);
        for x in v {
            let _ = write!(out, "\t{x:.6}");
        }
        out.push('\n');
    };
    for (&s, m) in present.iter().zip(&mapped) {
        row(s, "source", &features.states[&s]);
        row(s, "mapped", m);
        if let Some(seq) = pair.target.sequence(s) {
            let items: Vec<(usize, usize)> = seq.iter().map(|it| (it.question, it.concept)).collect();
            let labels: Vec<f64> = seq.iter().map(|it| it.response as f64).collect();
            row(s, "target", &fit_target_state(model, m, &items, &labels)?);
        }
    }
    Ok(out)
}

/// Refines a state vector against observed responses with the head fixed.
fn fit_target_state(model: &TransferModel, start: &[f64], items: &[(usize, usize)], labels: &[f64]) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    store.insert("state", Tensor::matrix(1, start.len(), start.to_vec())?);
    let mut adam = Adam::new(0.05)?;
    for _ in 0..50 {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, |_| false);
        let state = tape.param(store.require("state")?.clone());
        let rows = vec![0; items.len()];
        let states = tape.gather_rows(state, &rows)?;
        let qs = backbone::question_repr(&mut tape, &p, transfer::TARGET_PREFIX, &model.target_index, items)?;
        let input = tape.concat(&[states, qs])?;
        let logits = backbone::head_logits(&mut tape, &p, transfer::TARGET_PREFIX, input)?;
        let loss = tape.bce_with_logits(logits, labels, None)?;
        let grads = tape.backward(loss)?;
        let g = BTreeMap::from([("state".to_string(), grads.get_or_zeros(state))]);
        adam.step(&mut store, &g)?;
    }
    Ok(store.require("state")?.data().to_vec())
}
