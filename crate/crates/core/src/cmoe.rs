//! Category-enhanced mixture of experts: attention-pool the source concept
//! sequence into a preference vector, fuse it with the knowledge state and
//! category representation, and blend expert maps with a category-driven
//! gate into an approximate target-discipline state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Tape, Var};
use crate::error::{AcktError, Result};
use crate::params::{init_weight, Bound, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "cmoe.";
pub const CONCEPT_TABLE: &str = "cmoe.concept_embed";
pub const CATEGORY_TABLE: &str = "cmoe.category_embed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryRepr {
    /// The student's cluster centroid.
    Centroid,
    /// A learned `K × d` table indexed by category.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmoeConfig {
    pub experts: usize,
    /// Hidden width of the attention scorer.
    pub attention_dim: usize,
    pub category_repr: CategoryRepr,
    /// Replace the preference vector with zeros.
    pub no_prefer: bool,
    /// Fix the gate at `1 / X`.
    pub no_gate: bool,
}

impl Default for CmoeConfig {
    fn default() -> Self {
        CmoeConfig {
            experts: 24,
            attention_dim: 64,
            category_repr: CategoryRepr::Centroid,
            no_prefer: false,
            no_gate: false,
        }
    }
}

/// Fresh mapping parameters. `concept_table` seeds the attention's concept
/// embeddings (normally the pretrained source table).
pub fn init_cmoe<R: Rng>(
    rng: &mut R,
    cfg: &CmoeConfig,
    dim: usize,
    concept_table: &Tensor,
    categories: usize,
) -> Result<ParamStore> {
    if cfg.experts == 0 {
        return Err(AcktError::Config("expert count must be at least 1".into()));
    }
    if concept_table.rank() != 2 || concept_table.cols() != dim {
        return Err(AcktError::shape("init_cmoe", concept_table.shape(), &[0, dim]));
    }
    let mut store = ParamStore::new();
    store.insert(CONCEPT_TABLE, concept_table.clone());
    store.insert("cmoe.att.w1", init_weight(rng, dim, cfg.attention_dim));
    store.insert("cmoe.att.b1", Tensor::zeros(&[cfg.attention_dim]));
    store.insert("cmoe.att.w2", init_weight(rng, cfg.attention_dim, 1));
    store.insert("cmoe.att.b2", Tensor::zeros(&[1]));
    store.insert("cmoe.gate.w", init_weight(rng, dim, cfg.experts));
    store.insert("cmoe.gate.b", Tensor::zeros(&[cfg.experts]));
    for x in 0..cfg.experts {
        store.insert(format!("cmoe.expert{x}.w"), init_weight(rng, 3 * dim, dim));
        store.insert(format!("cmoe.expert{x}.b"), Tensor::zeros(&[dim]));
    }
    if cfg.category_repr == CategoryRepr::Learned {
        store.insert(CATEGORY_TABLE, crate::params::init_normal(rng, &[categories, dim], 0.1));
    }
    Ok(store)
}

/// Number of experts in a parameter set.
pub fn expert_count(params: &ParamStore) -> usize {
    (0..).take_while(|x| params.get(&format!("cmoe.expert{x}.w")).is_some()).count()
}

/// What the mapping needs to know about a batch of students.
#[derive(Clone, Debug, Default)]
pub struct MapBatch {
    /// Source knowledge states, `n × d`.
    pub states: Vec<Vec<f64>>,
    /// Rows of the concept table visited by each student, in order.
    pub concept_rows: Vec<Vec<usize>>,
    /// Category index of each student.
    pub categories: Vec<usize>,
}

impl MapBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, state: Vec<f64>, concept_rows: Vec<usize>, category: usize) {
        self.states.push(state);
        self.concept_rows.push(concept_rows);
        self.categories.push(category);
    }

    pub fn extend(&mut self, other: &MapBatch) {
        self.states.extend(other.states.iter().cloned());
        self.concept_rows.extend(other.concept_rows.iter().cloned());
        self.categories.extend(other.categories.iter().copied());
    }
}

/// Attention pooling of each student's concept embeddings: `n × d`.
pub fn sequence_attention(tape: &mut Tape, p: &Bound, concept_rows: &[Vec<usize>]) -> Result<Var> {
    if concept_rows.iter().any(Vec::is_empty) {
        return Err(AcktError::Invalid("sequence_attention needs at least one concept".into()));
    }
    let mut offsets = vec![0];
    let flat: Vec<usize> = concept_rows.iter().flatten().copied().collect();
    for rows in concept_rows {
        offsets.push(offsets.last().unwrap() + rows.len());
    }
    let emb = tape.gather_rows(p.var(CONCEPT_TABLE), &flat)?;
    let hidden = tape.affine(emb, p.var("cmoe.att.w1"), p.var("cmoe.att.b1"))?;
    let hidden = tape.tanh(hidden);
    let scores = tape.affine(hidden, p.var("cmoe.att.w2"), p.var("cmoe.att.b2"))?;
    let weights = tape.segment_softmax(scores, &offsets)?;
    tape.segment_weighted_sum(weights, emb, &offsets)
}

/// Category representations `n × d` for the batch.
pub fn category_repr(tape: &mut Tape, p: &Bound, cfg: &CmoeConfig, centroids: &Tensor, categories: &[usize]) -> Result<Var> {
    match cfg.category_repr {
        CategoryRepr::Centroid => {
            let table = tape.constant(centroids.clone());
            tape.gather_rows(table, categories)
        }
        CategoryRepr::Learned => tape.gather_rows(p.var(CATEGORY_TABLE), categories),
    }
}

/// Gate probabilities `n × X` from category representations.
pub fn gate(tape: &mut Tape, p: &Bound, cfg: &CmoeConfig, c: Var, experts: usize) -> Result<Var> {
    if cfg.no_gate {
        let n = tape.value(c).rows();
        return Ok(tape.constant(Tensor::full(&[n, experts], 1.0 / experts as f64)));
    }
    let logits = tape.affine(c, p.var("cmoe.gate.w"), p.var("cmoe.gate.b"))?;
    Ok(tape.softmax(logits))
}

/// Gate-weighted mixture of `tanh` experts over fused inputs `z` (`n × 3d`).
pub fn mixture(tape: &mut Tape, p: &Bound, z: Var, gate_weights: Var, experts: usize) -> Result<Var> {
    let dim = tape.value(z).cols() / 3;
    let ws: Vec<Var> = (0..experts).map(|x| p.var(&format!("cmoe.expert{x}.w"))).collect();
    let bs: Vec<Var> = (0..experts).map(|x| p.var(&format!("cmoe.expert{x}.b"))).collect();
    let w = tape.concat(&ws)?;
    let b = tape.concat(&bs)?;
    let all = tape.affine(z, w, b)?;
    let all = tape.tanh(all);
    let mut out = None;
    for x in 0..experts {
        let fx = tape.slice_cols(all, x * dim, dim)?;
        let gx = tape.slice_cols(gate_weights, x, 1)?;
        let term = tape.scale_rows(fx, gx)?;
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(out.expect("at least one expert"))
}

/// Mapped target-discipline states `n × d` for a batch of students.
pub fn map_batch(tape: &mut Tape, p: &Bound, cfg: &CmoeConfig, centroids: &Tensor, batch: &MapBatch) -> Result<Var> {
    if batch.is_empty() {
        return Err(AcktError::Invalid("map_batch on an empty batch".into()));
    }
    let u = tape.constant(Tensor::from_rows(&batch.states)?);
    let dim = tape.value(u).cols();
    let pref = if cfg.no_prefer {
        tape.constant(Tensor::zeros(&[batch.len(), dim]))
    } else {
        sequence_attention(tape, p, &batch.concept_rows)?
    };
    let c = category_repr(tape, p, cfg, centroids, &batch.categories)?;
    let z = tape.concat(&[u, pref, c])?;
    let experts = cfg.experts;
    let g = gate(tape, p, cfg, c, experts)?;
    mixture(tape, p, z, g, experts)
}

/// `u ⊕ p ⊕ c`.
pub fn fuse(u: &[f64], p: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    if u.len() != p.len() || u.len() != c.len() {
        return Err(AcktError::shape("fuse", &[u.len(), p.len()], &[c.len()]));
    }
    Ok([u, p, c].concat())
}

/// Gate probabilities for a single category representation.
pub fn gate_weights(params: &ParamStore, c: &[f64]) -> Result<Vec<f64>> {
    let w = params.require("cmoe.gate.w")?;
    let b = params.require("cmoe.gate.b")?;
    if w.rows() != c.len() {
        return Err(AcktError::shape("gate", w.shape(), &[c.len()]));
    }
    let logits: Vec<f64> = (0..w.cols())
        .map(|j| b.data()[j] + c.iter().enumerate().map(|(i, ci)| ci * w.data()[i * w.cols() + j]).sum::<f64>())
        .collect();
    softmax(&logits)
}

/// Output of expert `x` on a fused vector.
pub fn expert_output(params: &ParamStore, x: usize, z: &[f64]) -> Result<Vec<f64>> {
    let w = params.require(&format!("cmoe.expert{x}.w"))?;
    let b = params.require(&format!("cmoe.expert{x}.b"))?;
    if w.rows() != z.len() {
        return Err(AcktError::shape("expert", w.shape(), &[z.len()]));
    }
    Ok((0..w.cols())
        .map(|j| (b.data()[j] + z.iter().enumerate().map(|(i, zi)| zi * w.data()[i * w.cols() + j]).sum::<f64>()).tanh())
        .collect())
}

/// `Σ_x G_x(c) · F_x(z)` for one student.
pub fn map_to_target(params: &ParamStore, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let g = gate_weights(params, c)?;
    let mut out = vec![0.0; c.len()];
    for (x, gx) in g.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(expert_output(params, x, z)?) {
            *o += gx * f;
        }
    }
    Ok(out)
}
