//! Stage-2 training of the mapping into the target discipline, and
//! cold-start evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, AdversarialMode, PairRows};
use crate::autograd::{logistic, Tape, Var};
use crate::backbone::{self, Backbone, TokenIndex};
use crate::cluster::CategoryModel;
use crate::cmoe::{self, CmoeConfig, MapBatch};
use crate::data::{Discipline, EmbeddingIndex, EvalView, LabeledStudent, StudentId};
use crate::error::{AcktError, Result};
use crate::metrics::{self, EvalReport};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const TARGET_PREFIX: &str = "target.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub patience: usize,
    pub lambda: f64,
    pub n_samples: usize,
    pub mode: AdversarialMode,
    /// Drop the alignment loss entirely.
    pub no_gan: bool,
    /// Keep the attention's concept embeddings at their pretrained values.
    pub freeze_source_embed: bool,
    /// Most recent source interactions attended over.
    pub max_seq_len: usize,
    pub cmoe: CmoeConfig,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            epochs: 100,
            batch_size: 64,
            lr: 0.001,
            dropout: 0.2,
            patience: 10,
            lambda: 200.0,
            n_samples: 16,
            mode: AdversarialMode::Joint,
            no_gan: false,
            freeze_source_embed: false,
            max_seq_len: crate::data::MAX_SEQ_LEN,
            cmoe: CmoeConfig::default(),
            seed: 0,
        }
    }
}

impl TransferConfig {
    pub fn uses_alignment(&self) -> bool {
        !self.no_gan && self.lambda > 0.0
    }
}

/// Source-side inputs of the mapping for a set of students, computed once
/// from the frozen backbone.
#[derive(Clone, Debug, Default)]
pub struct StudentFeatures {
    pub states: BTreeMap<StudentId, Vec<f64>>,
    pub concept_rows: BTreeMap<StudentId, Vec<usize>>,
    pub categories: BTreeMap<StudentId, usize>,
    /// Source interactions read while building the features.
    pub source_interactions: usize,
}

impl StudentFeatures {
    /// Students without source records are skipped. Categories come from
    /// the clustering when known, otherwise from the nearest centroid.
    pub fn build(
        backbone: &dyn Backbone,
        source: &Discipline,
        model: &CategoryModel,
        students: &[StudentId],
        max_seq_len: usize,
    ) -> Result<Self> {
        let (states, skipped) = backbone.final_states(source, students)?;
        if skipped > 0 {
            warn!("{skipped} students lack source interactions and get no mapped state");
        }
        let mut out = StudentFeatures::default();
        for st in states {
            let seq = source.sequence(st.student).expect("state implies a sequence");
            out.source_interactions += seq.len();
            let recent = &seq[seq.len().saturating_sub(max_seq_len.max(1))..];
            out.concept_rows
                .insert(st.student, recent.iter().map(|it| backbone.concept_row(it.concept)).collect());
            let category = match model.category_of(st.student) {
                Some(c) => c,
                None => model.assign(&st.vector)?,
            };
            out.categories.insert(st.student, category);
            out.states.insert(st.student, st.vector);
        }
        Ok(out)
    }

    pub fn contains(&self, s: StudentId) -> bool {
        self.states.contains_key(&s)
    }

    pub fn map_batch(&self, students: &[StudentId]) -> Result<MapBatch> {
        let mut batch = MapBatch::default();
        for &s in students {
            let state = self
                .states
                .get(&s)
                .ok_or_else(|| AcktError::Data(format!("student {s} has no source features")))?;
            batch.push(state.clone(), self.concept_rows[&s].clone(), self.categories[&s]);
        }
        Ok(batch)
    }
}

/// Trained (or freshly initialised) stage-2 state.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferModel {
    /// `cmoe.*`, `target.*` and `disc.*` tensors.
    pub params: ParamStore,
    pub cmoe: CmoeConfig,
    pub target_index: TokenIndex,
    pub centroids: Tensor,
}

/// Counts what evaluation consumed as model inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputAudit {
    pub source_interactions: usize,
    /// Target questions asked about (identities only).
    pub target_queries: usize,
    /// Target responses fed to the model as inputs; must stay 0.
    pub target_responses: usize,
}

impl TransferModel {
    /// Fresh stage-2 parameters; the target vocabulary comes from the
    /// overlap-training students' target questions.
    pub fn init<R: Rng>(
        rng: &mut R,
        cfg: &TransferConfig,
        backbone: &dyn Backbone,
        model: &CategoryModel,
        train: &EvalView,
    ) -> Result<Self> {
        let dim = backbone.dim();
        if model.dim() != dim {
            return Err(AcktError::shape("transfer init", &[model.dim()], &[dim]));
        }
        let target_index = TokenIndex {
            questions: EmbeddingIndex::from_ids(train.students.iter().flat_map(|s| s.queries.iter().map(|q| q.0))),
            concepts: EmbeddingIndex::from_ids(train.students.iter().flat_map(|s| s.queries.iter().map(|q| q.1))),
        };
        let mut params = cmoe::init_cmoe(rng, &cfg.cmoe, dim, backbone.concept_table()?, model.k)?;
        backbone::init_embeddings(rng, TARGET_PREFIX, &target_index, dim, &mut params);
        backbone::init_head(rng, TARGET_PREFIX, dim, &mut params);
        params.extend(&adversarial::init_discriminator(rng, dim));
        Ok(TransferModel {
            params,
            cmoe: cfg.cmoe.clone(),
            target_index,
            centroids: model.centroid_tensor(),
        })
    }

    pub fn to_params(&self) -> ParamStore {
        let mut store = self.params.clone();
        self.target_index.write_params(TARGET_PREFIX, &mut store);
        store.insert("category.centroids", self.centroids.clone());
        store
    }

    /// Restores a saved model; the expert count is read from the tensors.
    pub fn from_params(store: &ParamStore, cmoe: &CmoeConfig) -> Result<Self> {
        let target_index = TokenIndex::read_params(TARGET_PREFIX, store)?;
        let centroids = store
            .get("category.centroids")
            .cloned()
            .ok_or_else(|| AcktError::Checkpoint("missing tensor `category.centroids`".into()))?;
        let mut params = ParamStore::new();
        for prefix in [cmoe::PREFIX, TARGET_PREFIX, adversarial::PREFIX] {
            params.extend(&store.subset(prefix));
        }
        params.remove("target.index.questions");
        params.remove("target.index.concepts");
        let experts = cmoe::expert_count(&params);
        if experts == 0 {
            return Err(AcktError::Checkpoint("no `cmoe.expert*` tensors".into()));
        }
        let mut cmoe = cmoe.clone();
        cmoe.experts = experts;
        Ok(TransferModel {
            params,
            cmoe,
            target_index,
            centroids,
        })
    }

    /// Logits for every query of `students`, whose mapped states are rows
    /// `0..students.len()` of `mapped`.
    fn query_logits<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &crate::params::Bound,
        mapped: Var,
        students: &[&LabeledStudent],
        dropout: Option<(f64, &mut R)>,
    ) -> Result<(Var, Vec<f64>)> {
        let mut rows = Vec::new();
        let mut items = Vec::new();
        let mut targets = Vec::new();
        for (i, s) in students.iter().enumerate() {
            rows.extend(std::iter::repeat_n(i, s.queries.len()));
            items.extend_from_slice(&s.queries);
            targets.extend(s.labels.iter().map(|&l| l as f64));
        }
        let states = tape.gather_rows(mapped, &rows)?;
        let qs = backbone::question_repr(tape, p, TARGET_PREFIX, &self.target_index, &items)?;
        let mut input = tape.concat(&[states, qs])?;
        if let Some((rate, rng)) = dropout {
            input = tape.dropout(input, rate, rng)?;
        }
        Ok((backbone::head_logits(tape, p, TARGET_PREFIX, input)?, targets))
    }

    /// Builds the stage-2 graph for one batch: cross-entropy summed over
    /// the anchors' target labels plus, when pairs are given, the
    /// alignment loss over them.
    pub fn batch_losses<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &crate::params::Bound,
        features: &StudentFeatures,
        anchors: &[&LabeledStudent],
        pairs: Option<&adversarial::PairBatch>,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<BatchLosses> {
        let mut ids: Vec<StudentId> = anchors.iter().map(|s| s.student).collect();
        let mut row_of: BTreeMap<StudentId, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        if let Some(pb) = pairs {
            for s in pb.pool_members() {
                if let std::collections::btree_map::Entry::Vacant(e) = row_of.entry(s) {
                    e.insert(ids.len());
                    ids.push(s);
                }
            }
        }
        let batch = features.map_batch(&ids)?;
        let mapped = cmoe::map_batch(tape, p, &self.cmoe, &self.centroids, &batch)?;
        let (logits, targets) = self.query_logits(tape, p, mapped, anchors, dropout)?;
        let mean = tape.bce_with_logits(logits, &targets, None)?;
        let cross = tape.scale(mean, targets.len() as f64);
        let dis = match pairs {
            Some(pb) => {
                let rows = PairRows::resolve(pb, |s| row_of[&s]);
                Some(adversarial::dis_loss(tape, p, mapped, &rows)?)
            }
            None => None,
        };
        Ok(BatchLosses {
            cross,
            dis,
            labels: targets.len(),
        })
    }

    /// Mapped target states for `students`, in order.
    pub fn mapped_states(&self, features: &StudentFeatures, students: &[StudentId]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(students.len());
        for chunk in students.chunks(256) {
            let batch = features.map_batch(chunk)?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, |_| false);
            let mapped = cmoe::map_batch(&mut tape, &p, &self.cmoe, &self.centroids, &batch)?;
            let v = tape.value(mapped);
            out.extend((0..chunk.len()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Pooled predictions over every held-out target interaction of the
    /// view. Only source features and target question identities enter the
    /// model; responses are read afterwards as labels.
    pub fn predict_view(&self, features: &StudentFeatures, view: &EvalView) -> Result<(Vec<f64>, Vec<u8>, InputAudit)> {
        let mut audit = InputAudit::default();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let students: Vec<&LabeledStudent> = view
            .students
            .iter()
            .filter(|s| features.contains(s.student) && !s.queries.is_empty())
            .collect();
        for chunk in students.chunks(64) {
            let ids: Vec<StudentId> = chunk.iter().map(|s| s.student).collect();
            let batch = features.map_batch(&ids)?;
            audit.source_interactions += batch.concept_rows.iter().map(Vec::len).sum::<usize>();
            let queries: Vec<LabeledStudent> = chunk
                .iter()
                .map(|s| LabeledStudent {
                    student: s.student,
                    source: Vec::new(),
                    queries: s.queries.clone(),
                    labels: vec![0; s.queries.len()],
                })
                .collect();
            audit.target_queries += queries.iter().map(|q| q.queries.len()).sum::<usize>();
            let refs: Vec<&LabeledStudent> = queries.iter().collect();
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, |_| false);
            let mapped = cmoe::map_batch(&mut tape, &p, &self.cmoe, &self.centroids, &batch)?;
            let (logits, _) = self.query_logits::<ChaCha8Rng>(&mut tape, &p, mapped, &refs, None)?;
            scores.extend(tape.value(logits).data().iter().map(|&x| logistic(x)));
            labels.extend(chunk.iter().flat_map(|s| s.labels.iter().copied()));
        }
        Ok((scores, labels, audit))
    }

    /// Cold-start AUC/ACC/RMSE over the view.
    pub fn evaluate(&self, features: &StudentFeatures, view: &EvalView) -> Result<(EvalReport, InputAudit)> {
        let started = Instant::now();
        let (scores, labels, audit) = self.predict_view(features, view)?;
        if labels.is_empty() {
            return Err(AcktError::Data("evaluation set has no target labels".into()));
        }
        let report = EvalReport::from_predictions(&scores, &labels, started.elapsed().as_secs_f64())?;
        Ok((report, audit))
    }
}

/// Loss nodes of one stage-2 batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLosses {
    /// Cross-entropy summed over `labels` target labels.
    pub cross: Var,
    pub dis: Option<Var>,
    pub labels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferEpoch {
    pub epoch: usize,
    /// Mean cross-entropy per target label.
    pub cross_loss: f64,
    pub dis_loss: f64,
    pub val_auc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: TransferModel,
    pub initial: TransferModel,
    pub history: Vec<TransferEpoch>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub short_draws: usize,
}

struct StepLosses {
    /// Summed cross-entropy and its label count.
    cross: f64,
    labels: usize,
    dis: f64,
}

impl StepLosses {
    fn read(tape: &Tape, b: &BatchLosses) -> Self {
        StepLosses {
            cross: tape.value(b.cross).item(),
            labels: b.labels,
            dis: b.dis.map_or(0.0, |d| tape.value(d).item()),
        }
    }
}

fn trainable(cfg: &TransferConfig) -> impl Fn(&str) -> bool + Copy + '_ {
    move |name: &str| !(cfg.freeze_source_embed && name == cmoe::CONCEPT_TABLE)
}

/// Trains the mapping on the overlap students with validation-AUC early
/// stopping; returns the best parameters rounded to checkpoint precision
/// together with the initial (untrained) model.
pub fn train_transfer(
    backbone: &dyn Backbone,
    source: &Discipline,
    categories: &CategoryModel,
    train: &EvalView,
    validation: &EvalView,
    pool: &[StudentId],
    cfg: &TransferConfig,
) -> Result<Trained> {
    if train.is_empty() {
        return Err(AcktError::Data(
            "no overlap-training students with both source and target records; increase overlap_frac".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(AcktError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TransferModel::init(&mut rng, cfg, backbone, categories, train)?;
    model.params.round_to_f32();
    let initial = model.clone();

    let mut students: Vec<StudentId> = train.students.iter().map(|s| s.student).collect();
    students.extend(validation.students.iter().map(|s| s.student));
    let align = cfg.uses_alignment();
    let pool: Vec<StudentId> = if align { pool.to_vec() } else { Vec::new() };
    students.extend_from_slice(&pool);
    students.sort_unstable();
    students.dedup();
    let features = StudentFeatures::build(backbone, source, categories, &students, cfg.max_seq_len)?;
    let pool: Vec<StudentId> = pool.into_iter().filter(|&s| features.contains(s)).collect();
    if align && pool.is_empty() {
        return Err(AcktError::Data("alignment needs non-overlap students with source records".into()));
    }
    let anchors: Vec<&LabeledStudent> = train
        .students
        .iter()
        .filter(|s| features.contains(s.student) && !s.queries.is_empty())
        .collect();

    let is_trainable = trainable(cfg);
    let is_disc = |n: &str| n.starts_with(adversarial::PREFIX);
    let mut adam = Adam::new(cfg.lr)?;
    let mut adam_disc = Adam::new(cfg.lr)?;
    let mut out = Trained {
        model: model.clone(),
        initial,
        history: Vec::new(),
        best_epoch: None,
        best_val_auc: None,
        short_draws: 0,
    };
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = StepLosses {
            cross: 0.0,
            labels: 0,
            dis: 0.0,
        };
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledStudent> = chunk.iter().map(|&i| anchors[i]).collect();
            let ids: Vec<StudentId> = batch.iter().map(|s| s.student).collect();
            let pairs = if align {
                let pb = adversarial::sample_pairs(&ids, &features.categories, &pool, cfg.n_samples, rng.gen())?;
                out.short_draws += pb.short_draws;
                Some(pb)
            } else {
                None
            };
            let losses = match (cfg.mode, &pairs) {
                (AdversarialMode::Alternating, Some(pb)) => {
                    let mut tape = Tape::new();
                    let p = model.params.bind(&mut tape, is_disc);
                    let dropout = Some((cfg.dropout, &mut rng));
                    let dis = model.batch_losses(&mut tape, &p, &features, &batch, Some(pb), dropout)?.dis;
                    let dis = dis.expect("pairs given");
                    let grads = tape.backward(dis)?;
                    adam_disc.step(&mut model.params, &p.gradients(&grads, is_disc))?;

                    let gen = |n: &str| is_trainable(n) && !is_disc(n);
                    let mut tape = Tape::new();
                    let p = model.params.bind(&mut tape, gen);
                    let dropout = Some((cfg.dropout, &mut rng));
                    let b = model.batch_losses(&mut tape, &p, &features, &batch, Some(pb), dropout)?;
                    let losses = StepLosses::read(&tape, &b);
                    let total = adversarial::total_loss(&mut tape, b.cross, b.dis, cfg.lambda)?;
                    let grads = tape.backward(total)?;
                    adam.step(&mut model.params, &p.gradients(&grads, gen))?;
                    losses
                }
                _ => {
                    let mut tape = Tape::new();
                    let p = model.params.bind(&mut tape, is_trainable);
                    let dropout = Some((cfg.dropout, &mut rng));
                    let b = model.batch_losses(&mut tape, &p, &features, &batch, pairs.as_ref(), dropout)?;
                    let losses = StepLosses::read(&tape, &b);
                    let lambda = if align { cfg.lambda } else { 0.0 };
                    let total = adversarial::total_loss(&mut tape, b.cross, b.dis, lambda)?;
                    let grads = tape.backward(total)?;
                    adam.step(&mut model.params, &p.gradients(&grads, is_trainable))?;
                    losses
                }
            };
            sums.cross += losses.cross;
            sums.labels += losses.labels;
            sums.dis += losses.dis;
            batches += 1;
        }
        let val_auc = if validation.is_empty() {
            f64::NAN
        } else {
            let (scores, labels, _) = model.predict_view(&features, validation)?;
            metrics::auc(&scores, &labels).unwrap_or(f64::NAN)
        };
        let log = TransferEpoch {
            epoch,
            cross_loss: sums.cross / sums.labels.max(1) as f64,
            dis_loss: sums.dis / batches.max(1) as f64,
            val_auc,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "train epoch {epoch}: cross {:.4} dis {:.4} val auc {:.4}",
            log.cross_loss, log.dis_loss, log.val_auc
        );
        out.history.push(log);
        let improved = match out.best_val_auc {
            _ if val_auc.is_nan() => true,
            None => true,
            Some(best) => val_auc > best,
        };
        if improved {
            out.best_val_auc = (!val_auc.is_nan()).then_some(val_auc);
            out.best_epoch = Some(epoch);
            out.model = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                info!("train early stop at epoch {epoch}");
                break;
            }
        }
    }
    if out.short_draws > 0 {
        warn!("{} pair draws fell back to sampling with replacement", out.short_draws);
    }
    out.model.params.round_to_f32();
    Ok(out)
}
