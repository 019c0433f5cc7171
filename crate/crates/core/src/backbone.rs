//! Source-discipline knowledge-tracing backbone.
//!
//! A single-layer gated recurrent encoder over `concept ⊕ question ⊕
//! response` embeddings. The hidden state after step `t` is the student's
//! knowledge state; the response at `t + 1` is predicted from that state
//! concatenated with the next question's representation.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{logistic, Tape, Var};
use crate::data::{vocab_of, CrossPair, Discipline, EmbeddingIndex, Interaction, SplitPlan, StudentId};
use crate::error::{AcktError, Result};
use crate::metrics;
use crate::optim::Adam;
use crate::params::{init_normal, init_weight, Bound, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "backbone.";
const GATES: [&str; 3] = ["z", "r", "n"];

/// Embedding rows for one discipline's questions and concepts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenIndex {
    pub questions: EmbeddingIndex,
    pub concepts: EmbeddingIndex,
}

impl TokenIndex {
    /// Vocabulary of the listed students' interactions in `discipline`.
    pub fn from_students(discipline: &Discipline, students: &[StudentId]) -> Self {
        let (questions, concepts) = vocab_of(discipline, students);
        TokenIndex { questions, concepts }
    }
}

impl TokenIndex {
    /// Stores the index as `<prefix>index.questions` / `<prefix>index.concepts`.
    pub fn write_params(&self, prefix: &str, store: &mut ParamStore) {
        for (name, idx) in [("questions", &self.questions), ("concepts", &self.concepts)] {
            let ids = idx.ids().into_iter().map(|i| i as f64).collect();
            store.insert(format!("{prefix}index.{name}"), Tensor::vector(ids));
        }
    }

    pub fn read_params(prefix: &str, store: &ParamStore) -> Result<Self> {
        let read = |name: &str| -> Result<EmbeddingIndex> {
            let key = format!("{prefix}index.{name}");
            let t = store
                .get(&key)
                .ok_or_else(|| AcktError::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.data().iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(AcktError::Checkpoint(format!("`{key}` holds non-integer ids")));
            }
            Ok(EmbeddingIndex::from_ids(t.data().iter().map(|&v| v as usize)))
        };
        Ok(TokenIndex {
            questions: read("questions")?,
            concepts: read("concepts")?,
        })
    }
}

/// Knowledge state `u` of one student.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeState {
    pub student: StudentId,
    pub vector: Vec<f64>,
}

/// Embedding tables for one discipline: `<prefix>question_embed` and
/// `<prefix>concept_embed`, each with an out-of-vocabulary row 0.
pub fn init_embeddings<R: Rng>(rng: &mut R, prefix: &str, index: &TokenIndex, dim: usize, store: &mut ParamStore) {
    for (name, rows) in [
        ("question_embed", index.questions.table_rows()),
        ("concept_embed", index.concepts.table_rows()),
    ] {
        let mut t = init_normal(rng, &[rows, dim], 0.1);
        // The OOV row starts neutral.
        t.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
        store.insert(format!("{prefix}{name}"), t);
    }
}

/// Prediction head `[2d → d] → relu → [d → 1]` under `<prefix>head.*`.
pub fn init_head<R: Rng>(rng: &mut R, prefix: &str, dim: usize, store: &mut ParamStore) {
    store.insert(format!("{prefix}head.w1"), init_weight(rng, 2 * dim, dim));
    store.insert(format!("{prefix}head.b1"), Tensor::zeros(&[dim]));
    store.insert(format!("{prefix}head.w2"), init_weight(rng, dim, 1));
    store.insert(format!("{prefix}head.b2"), Tensor::zeros(&[1]));
}

/// Logits `[rows × 1]` of the head under `prefix` for inputs `[rows × 2d]`.
pub fn head_logits(tape: &mut Tape, p: &Bound, prefix: &str, input: Var) -> Result<Var> {
    let hidden = tape.affine(
        input,
        p.var(&format!("{prefix}head.w1")),
        p.var(&format!("{prefix}head.b1")),
    )?;
    let hidden = tape.relu(hidden);
    tape.affine(
        hidden,
        p.var(&format!("{prefix}head.w2")),
        p.var(&format!("{prefix}head.b2")),
    )
}

/// Question representation `question_embed[q] + concept_embed[c]`.
pub fn question_repr(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    index: &TokenIndex,
    items: &[(usize, usize)],
) -> Result<Var> {
    let q: Vec<usize> = items.iter().map(|&(q, _)| index.questions.row(q)).collect();
    let c: Vec<usize> = items.iter().map(|&(_, c)| index.concepts.row(c)).collect();
    let qe = tape.gather_rows(p.var(&format!("{prefix}question_embed")), &q)?;
    let ce = tape.gather_rows(p.var(&format!("{prefix}concept_embed")), &c)?;
    tape.add(qe, ce)
}

/// Fresh backbone parameters sized by `index`.
pub fn init_backbone<R: Rng>(rng: &mut R, index: &TokenIndex, dim: usize) -> Result<ParamStore> {
    if dim == 0 {
        return Err(AcktError::Config("dim must be positive".into()));
    }
    let mut store = ParamStore::new();
    init_embeddings(rng, PREFIX, index, dim, &mut store);
    store.insert("backbone.response_embed", init_normal(rng, &[2, dim], 0.1));
    for g in GATES {
        store.insert(format!("backbone.gru.w_{g}"), init_weight(rng, 3 * dim, dim));
        store.insert(format!("backbone.gru.u_{g}"), init_weight(rng, dim, dim));
        store.insert(format!("backbone.gru.b_{g}"), Tensor::zeros(&[dim]));
    }
    init_head(rng, PREFIX, dim, &mut store);
    Ok(store)
}

/// Embedding width of a backbone parameter set.
pub fn dim_of(params: &ParamStore) -> Result<usize> {
    Ok(params.require("backbone.response_embed")?.cols())
}

/// Per-step hidden states of a padded batch.
pub struct EncodedBatch {
    /// `hidden[t]` is `[batch × d]`; rows past a sequence's end repeat its
    /// final state.
    pub hidden: Vec<Var>,
    pub lengths: Vec<usize>,
}

/// Runs the recurrent cell over `seqs` (each non-empty), padding to the
/// longest. `h_t` depends only on interactions `1..=t`.
pub fn encode_batch(tape: &mut Tape, p: &Bound, index: &TokenIndex, seqs: &[&[Interaction]]) -> Result<EncodedBatch> {
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(AcktError::Invalid("encode_batch needs non-empty sequences".into()));
    }
    let b = seqs.len();
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let steps = *lengths.iter().max().unwrap();
    let dim = tape.value(p.var("backbone.response_embed")).cols();

    // Input projections for every step at once, rows ordered step-major.
    let mut q_idx = Vec::with_capacity(steps * b);
    let mut c_idx = Vec::with_capacity(steps * b);
    let mut r_idx = Vec::with_capacity(steps * b);
    for t in 0..steps {
        for s in seqs {
            match s.get(t) {
                Some(it) => {
                    q_idx.push(index.questions.row(it.question));
                    c_idx.push(index.concepts.row(it.concept));
                    r_idx.push(it.response as usize);
                }
                None => {
                    q_idx.push(0);
                    c_idx.push(0);
                    r_idx.push(0);
                }
            }
        }
    }
    let ce = tape.gather_rows(p.var("backbone.concept_embed"), &c_idx)?;
    let qe = tape.gather_rows(p.var("backbone.question_embed"), &q_idx)?;
    let re = tape.gather_rows(p.var("backbone.response_embed"), &r_idx)?;
    let x = tape.concat(&[ce, qe, re])?;
    let mut proj = Vec::with_capacity(3);
    for g in GATES {
        proj.push(tape.affine(
            x,
            p.var(&format!("backbone.gru.w_{g}")),
            p.var(&format!("backbone.gru.b_{g}")),
        )?);
    }
    let (u_z, u_r, u_n) = (p.var("backbone.gru.u_z"), p.var("backbone.gru.u_r"), p.var("backbone.gru.u_n"));

    let mut h = tape.constant(Tensor::zeros(&[b, dim]));
    let mut hidden = Vec::with_capacity(steps);
    for t in 0..steps {
        let xz = tape.slice_rows(proj[0], t * b, b)?;
        let xr = tape.slice_rows(proj[1], t * b, b)?;
        let xn = tape.slice_rows(proj[2], t * b, b)?;
        let hz = tape.matmul(h, u_z)?;
        let hr = tape.matmul(h, u_r)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let hn = tape.matmul(rh, u_n)?;
        let n = tape.add(xn, hn)?;
        let n = tape.tanh(n);
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = tape.sub(h, n)?;
        let gated = tape.mul(z, diff)?;
        let next = tape.add(n, gated)?;
        h = if lengths.iter().all(|&l| t < l) {
            next
        } else {
            let mask: Vec<f64> = lengths
                .iter()
                .flat_map(|&l| std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, dim))
                .collect();
            let m = tape.constant(Tensor::matrix(b, dim, mask)?);
            let delta = tape.sub(next, h)?;
            let kept = tape.mul(m, delta)?;
            tape.add(h, kept)?
        };
        hidden.push(h);
    }
    Ok(EncodedBatch { hidden, lengths })
}

/// Next-response logits for a batch: the state after step `t` with the
/// question at `t + 1`. Returns logits and their targets.
pub fn next_response_logits<R: Rng>(
    tape: &mut Tape,
    p: &Bound,
    index: &TokenIndex,
    seqs: &[&[Interaction]],
    dropout: Option<(f64, &mut R)>,
) -> Result<Option<(Var, Vec<f64>)>> {
    let enc = encode_batch(tape, p, index, seqs)?;
    let b = seqs.len();
    let steps = enc.hidden.len();
    if steps < 2 {
        return Ok(None);
    }
    let mut rows = Vec::new();
    let mut items = Vec::new();
    let mut targets = Vec::new();
    for t in 0..steps - 1 {
        for (i, s) in seqs.iter().enumerate() {
            if let Some(next) = s.get(t + 1) {
                rows.push(t * b + i);
                items.push((next.question, next.concept));
                targets.push(next.response as f64);
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let stacked = tape.concat_rows(&enc.hidden[..steps - 1])?;
    let states = tape.gather_rows(stacked, &rows)?;
    let qs = question_repr(tape, p, PREFIX, index, &items)?;
    let mut input = tape.concat(&[states, qs])?;
    if let Some((rate, rng)) = dropout {
        input = tape.dropout(input, rate, rng)?;
    }
    Ok(Some((head_logits(tape, p, PREFIX, input)?, targets)))
}

/// Probability that the response to the question with representation
/// `q_embed` is correct given knowledge state `h`.
pub fn predict(params: &ParamStore, h: &[f64], q_embed: &[f64]) -> Result<f64> {
    if h.len() != q_embed.len() {
        return Err(AcktError::shape("predict", &[h.len()], &[q_embed.len()]));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let hv = tape.constant(Tensor::vector(h.to_vec()));
    let qv = tape.constant(Tensor::vector(q_embed.to_vec()));
    let x = tape.concat(&[hv, qv])?;
    let logit = head_logits(&mut tape, &p, PREFIX, x)?;
    Ok(logistic(tape.value(logit).item()))
}

/// A pretrained source-discipline encoder as seen by the transfer stage.
pub trait Backbone {
    fn dim(&self) -> usize;

    /// Final state over each listed student's source sequence; students
    /// without source records are skipped and counted.
    fn final_states(&self, source: &Discipline, students: &[StudentId]) -> Result<(Vec<KnowledgeState>, usize)>;

    /// Concept embedding table, row 0 being out-of-vocabulary.
    fn concept_table(&self) -> Result<&Tensor>;

    fn concept_row(&self, concept: usize) -> usize;
}

/// The gated recurrent backbone with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct GruBackbone {
    pub params: ParamStore,
    pub index: TokenIndex,
}

impl GruBackbone {
    /// Parameters plus vocabulary tensors, ready to save.
    pub fn to_params(&self) -> ParamStore {
        let mut store = self.params.clone();
        self.index.write_params(PREFIX, &mut store);
        store
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let index = TokenIndex::read_params(PREFIX, store)?;
        let mut params = store.subset(PREFIX);
        params.remove("backbone.index.questions");
        params.remove("backbone.index.concepts");
        let backbone = GruBackbone { params, index };
        backbone.check()?;
        Ok(backbone)
    }

    fn check(&self) -> Result<()> {
        let dim = dim_of(&self.params)?;
        let expect = |name: &str, rows: usize| -> Result<()> {
            let t = self.params.require(name)?;
            if t.shape() != [rows, dim] {
                return Err(AcktError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected [{rows}, {dim}]",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("backbone.question_embed", self.index.questions.table_rows())?;
        expect("backbone.concept_embed", self.index.concepts.table_rows())?;
        for g in GATES {
            expect(&format!("backbone.gru.w_{g}"), 3 * dim)?;
            expect(&format!("backbone.gru.u_{g}"), dim)?;
        }
        Ok(())
    }
}

impl Backbone for GruBackbone {
    fn dim(&self) -> usize {
        dim_of(&self.params).expect("validated backbone")
    }

    fn final_states(&self, source: &Discipline, students: &[StudentId]) -> Result<(Vec<KnowledgeState>, usize)> {
        extract_states(&self.params, &self.index, source, students, 64)
    }

    fn concept_table(&self) -> Result<&Tensor> {
        self.params.require("backbone.concept_embed")
    }

    fn concept_row(&self, concept: usize) -> usize {
        self.index.concepts.row(concept)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub patience: usize,
    pub max_seq_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 0.001,
            dropout: 0.2,
            patience: 10,
            max_seq_len: crate::data::MAX_SEQ_LEN,
            dim: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParamStore,
    pub index: TokenIndex,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    /// Mean next-response loss on the training windows before any update.
    pub initial_loss: f64,
}

/// Mean next-response cross-entropy over `seqs` without dropout.
pub fn sequence_loss(params: &ParamStore, index: &TokenIndex, seqs: &[&[Interaction]], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        if let Some((logits, targets)) = next_response_logits::<ChaCha8Rng>(&mut tape, &p, index, chunk, None)? {
            let loss = tape.bce_with_logits(logits, &targets, None)?;
            total += tape.value(loss).item() * targets.len() as f64;
            count += targets.len();
        }
    }
    if count == 0 {
        return Err(AcktError::Data("no next-response targets".into()));
    }
    Ok(total / count as f64)
}

/// Pooled next-response predictions and labels over `seqs`.
pub fn next_response_predictions(
    params: &ParamStore,
    index: &TokenIndex,
    seqs: &[&[Interaction]],
    batch: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in seqs.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        if let Some((logits, targets)) = next_response_logits::<ChaCha8Rng>(&mut tape, &p, index, chunk, None)? {
            scores.extend(tape.value(logits).data().iter().map(|&x| logistic(x)));
            labels.extend(targets.iter().map(|&t| t as u8));
        }
    }
    Ok((scores, labels))
}

/// Trains the backbone on the pretraining students' source windows with
/// early stopping on validation AUC; returns the best-validation parameters
/// rounded to checkpoint precision.
pub fn pretrain(pair: &CrossPair<'_>, plan: &SplitPlan, cfg: &PretrainConfig) -> Result<Pretrained> {
    let source = pair.source;
    let train = source.windows(&plan.pretrain, cfg.max_seq_len);
    if train.is_empty() {
        return Err(AcktError::Data("pretraining split has no source interactions".into()));
    }
    let val = source.windows(&plan.validation, cfg.max_seq_len);
    let index = TokenIndex::from_students(source, &plan.pretrain);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_backbone(&mut rng, &index, cfg.dim)?;

    let train_refs: Vec<&[Interaction]> = train.iter().map(|s| s.items.as_slice()).collect();
    let val_refs: Vec<&[Interaction]> = val.iter().map(|s| s.items.as_slice()).collect();
    let initial_loss = sequence_loss(&params, &index, &train_refs, cfg.batch_size)?;

    let mut out = Pretrained {
        params: params.clone(),
        index: index.clone(),
        history: Vec::new(),
        best_epoch: None,
        best_val_auc: None,
        initial_loss,
    };
    if cfg.epochs == 0 {
        warn!("pretraining with 0 epochs; returning the initialised backbone");
        out.params.round_to_f32();
        return Ok(out);
    }

    let mut adam = Adam::new(cfg.lr)?;
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[Interaction]> = chunk.iter().map(|&i| train_refs[i]).collect();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| true);
            let Some((logits, targets)) =
                next_response_logits(&mut tape, &p, &index, &seqs, Some((cfg.dropout, &mut rng)))?
            else {
                continue;
            };
            let loss = tape.bce_with_logits(logits, &targets, None)?;
            loss_sum += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            adam.step(&mut params, &p.gradients(&grads, |_| true))?;
        }
        let val_auc = if val_refs.is_empty() {
            f64::NAN
        } else {
            let (scores, labels) = next_response_predictions(&params, &index, &val_refs, cfg.batch_size)?;
            metrics::auc(&scores, &labels).unwrap_or(f64::NAN)
        };
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_auc,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "pretrain epoch {epoch}: loss {:.4} val auc {:.4} ({:.1}s)",
            log.train_loss, log.val_auc, log.seconds
        );
        out.history.push(log);

        // Without a validation signal every epoch counts as an improvement.
        let improved = match out.best_val_auc {
            _ if val_auc.is_nan() => true,
            None => true,
            Some(best) => val_auc > best,
        };
        if improved {
            out.best_val_auc = (!val_auc.is_nan()).then_some(val_auc);
            out.best_epoch = Some(epoch);
            out.params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                info!("pretrain early stop at epoch {epoch}");
                break;
            }
        }
    }
    out.params.round_to_f32();
    Ok(out)
}

/// Final hidden state over each student's full source sequence, in
/// evaluation mode. Students without source records are skipped and counted.
pub fn extract_states(
    params: &ParamStore,
    index: &TokenIndex,
    source: &Discipline,
    students: &[StudentId],
    batch: usize,
) -> Result<(Vec<KnowledgeState>, usize)> {
    let present: Vec<(StudentId, &[Interaction])> = students
        .iter()
        .filter_map(|&s| source.sequence(s).map(|seq| (s, seq)))
        .collect();
    let skipped = students.len() - present.len();
    if skipped > 0 {
        warn!("{skipped} students have no source interactions; skipped");
    }
    let mut states = Vec::with_capacity(present.len());
    for chunk in present.chunks(batch.max(1)) {
        let seqs: Vec<&[Interaction]> = chunk.iter().map(|(_, s)| *s).collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let enc = encode_batch(&mut tape, &p, index, &seqs)?;
        let last = tape.value(*enc.hidden.last().unwrap());
        for (row, (student, _)) in chunk.iter().enumerate() {
            states.push(KnowledgeState {
                student: *student,
                vector: last.row(row).to_vec(),
            });
        }
    }
    Ok((states, skipped))
}
