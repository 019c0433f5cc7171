//! Same-category pair sampling, the pair discriminator, and the
//! preference-distribution alignment loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{logistic, Tape, Var};
use crate::data::StudentId;
use crate::error::{AcktError, Result};
use crate::params::{init_weight, Bound, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "disc.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// One step on `L_cross + λ·L_dis` over every stage-2 parameter.
    #[default]
    Joint,
    /// A discriminator step on `L_dis`, then a generator step.
    Alternating,
}

impl std::str::FromStr for AdversarialMode {
    type Err = AcktError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(AdversarialMode::Joint),
            "alternating" => Ok(AdversarialMode::Alternating),
            other => Err(AcktError::Config(format!("unknown adversarial_mode `{other}`"))),
        }
    }
}

/// Per-anchor same-category (`positives`) and different-category
/// (`negatives`) students drawn from the non-overlap pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub anchors: Vec<StudentId>,
    pub positives: Vec<Vec<StudentId>>,
    pub negatives: Vec<Vec<StudentId>>,
    /// Eligible sets smaller than `N_s`, sampled with replacement.
    pub short_draws: usize,
}

impl PairBatch {
    pub fn n_same(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn n_diff(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }

    /// Distinct pool students referenced by the batch, sorted.
    pub fn pool_members(&self) -> Vec<StudentId> {
        let mut all: Vec<StudentId> = self.positives.iter().chain(&self.negatives).flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

fn draw<R: Rng>(rng: &mut R, eligible: &[StudentId], n: usize, short: &mut usize) -> Vec<StudentId> {
    if eligible.len() >= n {
        eligible.choose_multiple(rng, n).copied().collect()
    } else {
        *short += 1;
        (0..n).map(|_| *eligible.choose(rng).expect("non-empty")).collect()
    }
}

/// Samples `n_samples` positives and negatives per anchor. An anchor whose
/// category has no pool member gets no positives (counted in
/// `short_draws`); an anchor with no different-category pool member is an
/// error.
pub fn sample_pairs(
    anchors: &[StudentId],
    categories: &BTreeMap<StudentId, usize>,
    pool: &[StudentId],
    n_samples: usize,
    seed: u64,
) -> Result<PairBatch> {
    if n_samples == 0 {
        return Err(AcktError::Config("n_samples must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(AcktError::Data("non-overlap pool is empty".into()));
    }
    let category = |s: StudentId| {
        categories
            .get(&s)
            .copied()
            .ok_or_else(|| AcktError::Data(format!("student {s} has no category")))
    };
    let mut by_category: BTreeMap<usize, Vec<StudentId>> = BTreeMap::new();
    for &s in pool {
        by_category.entry(category(s)?).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = PairBatch::default();
    for &a in anchors {
        let ca = category(a)?;
        let same = by_category.get(&ca).map(Vec::as_slice).unwrap_or(&[]);
        let diff: Vec<StudentId> = by_category
            .iter()
            .filter(|(&c, _)| c != ca)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        if diff.is_empty() {
            return Err(AcktError::Data(format!(
                "no different-category students in the pool for anchor {a} (category {ca}); clustering is degenerate"
            )));
        }
        let positives = if same.is_empty() {
            batch.short_draws += 1;
            Vec::new()
        } else {
            draw(&mut rng, same, n_samples, &mut batch.short_draws)
        };
        let negatives = draw(&mut rng, &diff, n_samples, &mut batch.short_draws);
        batch.anchors.push(a);
        batch.positives.push(positives);
        batch.negatives.push(negatives);
    }
    Ok(batch)
}

/// Discriminator `[2d → d] relu [d → d/2] relu [d/2 → 1]`.
pub fn init_discriminator<R: Rng>(rng: &mut R, dim: usize) -> ParamStore {
    let half = (dim / 2).max(1);
    let mut store = ParamStore::new();
    for (name, fan_in, fan_out) in [("l1", 2 * dim, dim), ("l2", dim, half), ("l3", half, 1)] {
        store.insert(format!("disc.{name}.w"), init_weight(rng, fan_in, fan_out));
        store.insert(format!("disc.{name}.b"), Tensor::zeros(&[fan_out]));
    }
    store
}

/// Same-category logits for rows `left[i] ⊕ right[i]`; the anchor is always
/// on the left.
pub fn discriminator_logits(tape: &mut Tape, p: &Bound, left: Var, right: Var) -> Result<Var> {
    let x = tape.concat(&[left, right])?;
    let h = tape.affine(x, p.var("disc.l1.w"), p.var("disc.l1.b"))?;
    let h = tape.relu(h);
    let h = tape.affine(h, p.var("disc.l2.w"), p.var("disc.l2.b"))?;
    let h = tape.relu(h);
    tape.affine(h, p.var("disc.l3.w"), p.var("disc.l3.b"))
}

/// Probability that `a` and `b` share a category.
pub fn discriminate(params: &ParamStore, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AcktError::shape("discriminate", &[a.len()], &[b.len()]));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let left = tape.constant(Tensor::matrix(1, a.len(), a.to_vec())?);
    let right = tape.constant(Tensor::matrix(1, b.len(), b.to_vec())?);
    let logit = discriminator_logits(&mut tape, &p, left, right)?;
    Ok(logistic(tape.value(logit).item()))
}

/// Rows of the mapped-state matrix for each anchor and pool student.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairRows {
    pub anchor: Vec<usize>,
    pub same: Vec<(usize, usize)>,
    pub diff: Vec<(usize, usize)>,
}

impl PairRows {
    /// Resolves a batch against `row_of`, the mapped-state row of each
    /// student.
    pub fn resolve(batch: &PairBatch, row_of: impl Fn(StudentId) -> usize) -> Self {
        let mut rows = PairRows::default();
        for (i, &a) in batch.anchors.iter().enumerate() {
            let ra = row_of(a);
            rows.anchor.push(ra);
            rows.same.extend(batch.positives[i].iter().map(|&b| (ra, row_of(b))));
            rows.diff.extend(batch.negatives[i].iter().map(|&c| (ra, row_of(c))));
        }
        rows
    }
}

/// `L_dis = −mean log D(same) − mean log(1 − D(diff))` over mapped states
/// `mapped` (`n × d`). A term with no pairs is omitted.
pub fn dis_loss(tape: &mut Tape, p: &Bound, mapped: Var, rows: &PairRows) -> Result<Var> {
    if rows.same.is_empty() && rows.diff.is_empty() {
        return Err(AcktError::Invalid("dis_loss on an empty pair batch".into()));
    }
    let mut terms = Vec::new();
    for (pairs, target) in [(&rows.same, 1.0), (&rows.diff, 0.0)] {
        if pairs.is_empty() {
            continue;
        }
        let left: Vec<usize> = pairs.iter().map(|&(a, _)| a).collect();
        let right: Vec<usize> = pairs.iter().map(|&(_, b)| b).collect();
        let l = tape.gather_rows(mapped, &left)?;
        let r = tape.gather_rows(mapped, &right)?;
        let logits = discriminator_logits(tape, p, l, r)?;
        terms.push(tape.bce_with_logits(logits, &vec![target; pairs.len()], None)?);
    }
    Ok(match terms[..] {
        [one] => one,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!(),
    })
}

/// `L = L_cross + λ·L_dis`.
pub fn total_loss(tape: &mut Tape, cross: Var, dis: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(AcktError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    match dis {
        Some(d) if lambda > 0.0 => {
            let scaled = tape.scale(d, lambda);
            tape.add(cross, scaled)
        }
        _ => Ok(cross),
    }
}
