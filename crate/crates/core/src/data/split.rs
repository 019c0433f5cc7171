use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CrossPair, StudentId};
use crate::error::{AcktError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub pretrain: f64,
    pub validation: f64,
    pub test: f64,
    pub overlap: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            pretrain: 0.6,
            validation: 0.2,
            test: 0.2,
            overlap: 0.001,
        }
    }
}

/// Student partition for one run.
///
/// `pretrain`, `validation` and `test` are disjoint. The overlap-training
/// students are a subset of `pretrain` that also have target-discipline
/// records; validation and test students are the cold-start population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub n_students: usize,
    pub pretrain: Vec<StudentId>,
    pub validation: Vec<StudentId>,
    pub test: Vec<StudentId>,
    pub overlap_train: Vec<StudentId>,
}

impl SplitPlan {
    /// Pretraining students that are not overlap-training students; the
    /// pool that adversarial pairs are drawn from.
    pub fn non_overlap_pool(&self) -> Vec<StudentId> {
        let overlap: std::collections::BTreeSet<_> = self.overlap_train.iter().collect();
        self.pretrain.iter().copied().filter(|s| !overlap.contains(s)).collect()
    }
}

/// Shuffles the pair's students by `seed` and cuts `floor(frac · N)` sized
/// pretrain/validation/test sets. Overlap-training students are the first
/// `floor(overlap · N)` of a seeded shuffle of the pretrain students present
/// in both disciplines, so sets for growing fractions are nested.
pub fn build_splits(pair: &CrossPair<'_>, seed: u64, fractions: &SplitFractions) -> Result<SplitPlan> {
    let f = fractions;
    for (name, v) in [
        ("pretrain", f.pretrain),
        ("validation", f.validation),
        ("test", f.test),
        ("overlap", f.overlap),
    ] {
        if !(v > 0.0 && v < 1.0) {
            return Err(AcktError::Config(format!("{name} fraction must be in (0,1), got {v}")));
        }
    }
    if f.pretrain + f.validation + f.test > 1.0 + 1e-12 {
        return Err(AcktError::Config(format!(
            "pretrain + validation + test fractions exceed 1 ({} + {} + {})",
            f.pretrain, f.validation, f.test
        )));
    }

    let mut students = pair.students();
    let n = students.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    students.shuffle(&mut rng);

    let count = |frac: f64| (frac * n as f64 + 1e-9).floor() as usize;
    let (n_pre, n_val, n_test) = (count(f.pretrain), count(f.validation), count(f.test));
    let pretrain = students[..n_pre].to_vec();
    let validation = students[n_pre..n_pre + n_val].to_vec();
    let test = students[n_pre + n_val..n_pre + n_val + n_test].to_vec();

    let mut pool: Vec<StudentId> = pretrain
        .iter()
        .copied()
        .filter(|&s| pair.source.has_student(s) && pair.target.has_student(s))
        .collect();
    pool.sort_unstable();
    let n_overlap = count(f.overlap);
    if pool.len() < n_overlap {
        return Err(AcktError::Data(format!(
            "overlap pool has {} students but overlap fraction {} needs {n_overlap}",
            pool.len(),
            f.overlap
        )));
    }
    let mut overlap_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f76_6572_6c61_7021);
    pool.shuffle(&mut overlap_rng);
    pool.truncate(n_overlap);

    Ok(SplitPlan {
        seed,
        n_students: n,
        pretrain,
        validation,
        test,
        overlap_train: pool,
    })
}
