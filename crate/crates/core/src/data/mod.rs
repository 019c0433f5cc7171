//! Per-discipline interaction data, splits, cold-start masking and the
//! synthetic generator.

mod csv;
mod mask;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

pub use self::csv::{load_csv, read_csv, write_csv, CSV_HEADER};
pub use self::mask::{mask_target_history, overlap_training_view, EvalView, LabeledStudent};
pub use self::split::{build_splits, SplitFractions, SplitPlan};
pub use self::synth::{generate_synthetic, generate_synthetic_with_truth, SynthConfig, SynthTruth};

use crate::error::{AcktError, Result};

/// Dense student index, shared across disciplines of one dataset.
pub type StudentId = usize;

/// Longest sequence fed to the recurrent encoder during training.
pub const MAX_SEQ_LEN: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub question: usize,
    pub concept: usize,
    pub response: u8,
}

/// Interns string ids into dense indices in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One discipline (course): its question and concept vocabularies and every
/// student's ordered responses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Discipline {
    pub name: String,
    pub questions: Vocab,
    pub concepts: Vocab,
    pub sequences: BTreeMap<StudentId, Vec<Interaction>>,
}

impl Discipline {
    pub fn new(name: impl Into<String>) -> Self {
        Discipline {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn n_students(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.values().map(Vec::len).sum()
    }

    pub fn sequence(&self, student: StudentId) -> Option<&[Interaction]> {
        self.sequences.get(&student).map(Vec::as_slice).filter(|s| !s.is_empty())
    }

    pub fn has_student(&self, student: StudentId) -> bool {
        self.sequence(student).is_some()
    }

    /// Consecutive windows of at most `max_len` interactions for each listed
    /// student; students without data are skipped.
    pub fn windows(&self, students: &[StudentId], max_len: usize) -> Vec<InteractionSeq> {
        students
            .iter()
            .filter_map(|&s| self.sequence(s).map(|seq| (s, seq)))
            .flat_map(|(s, seq)| {
                seq.chunks(max_len).map(move |w| InteractionSeq {
                    student: s,
                    items: w.to_vec(),
                })
            })
            .collect()
    }

    pub(crate) fn check(&self) -> Result<()> {
        for (s, seq) in &self.sequences {
            for it in seq {
                if it.question >= self.questions.len() || it.concept >= self.concepts.len() || it.response > 1 {
                    return Err(AcktError::Data(format!(
                        "discipline `{}`: student {s} has an invalid interaction {it:?}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A student's interactions in one discipline, at most [`MAX_SEQ_LEN`] long
/// when produced by [`Discipline::windows`].
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSeq {
    pub student: StudentId,
    pub items: Vec<Interaction>,
}

/// Students and their per-discipline interaction records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub students: Vocab,
    pub disciplines: Vec<Discipline>,
}

impl Dataset {
    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn discipline(&self, name: &str) -> Option<&Discipline> {
        self.disciplines.iter().find(|d| d.name == name)
    }

    /// Source/target view over two named disciplines.
    pub fn pair(&self, source: &str, target: &str) -> Result<CrossPair<'_>> {
        if source == target {
            return Err(AcktError::Config(format!("source and target are both `{source}`")));
        }
        let find = |name: &str| {
            self.discipline(name).ok_or_else(|| {
                let known: Vec<&str> = self.disciplines.iter().map(|d| d.name.as_str()).collect();
                AcktError::Data(format!("no discipline `{name}` in dataset (have {known:?})"))
            })
        };
        Ok(CrossPair {
            source: find(source)?,
            target: find(target)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.disciplines {
            d.check()?;
            if let Some((&s, _)) = d.sequences.iter().find(|(&s, _)| s >= self.students.len()) {
                return Err(AcktError::Data(format!("discipline `{}` references unknown student {s}", d.name)));
            }
        }
        Ok(())
    }
}

/// The two disciplines of one transfer scenario.
#[derive(Clone, Copy, Debug)]
pub struct CrossPair<'a> {
    pub source: &'a Discipline,
    pub target: &'a Discipline,
}

impl CrossPair<'_> {
    /// Students with records in either discipline, ascending.
    pub fn students(&self) -> Vec<StudentId> {
        let set: BTreeSet<StudentId> = self
            .source
            .sequences
            .iter()
            .chain(&self.target.sequences)
            .filter(|(_, seq)| !seq.is_empty())
            .map(|(&s, _)| s)
            .collect();
        set.into_iter().collect()
    }

    /// Students with records in both disciplines.
    pub fn overlap(&self) -> Vec<StudentId> {
        self.source
            .sequences
            .keys()
            .copied()
            .filter(|&s| self.source.has_student(s) && self.target.has_student(s))
            .collect()
    }
}

/// Maps discipline-level ids to embedding rows. Row 0 is the
/// out-of-vocabulary slot; known ids occupy rows `1..`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingIndex {
    rows: HashMap<usize, usize>,
}

impl EmbeddingIndex {
    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = ids.into_iter().collect();
        EmbeddingIndex {
            rows: set.into_iter().enumerate().map(|(row, id)| (id, row + 1)).collect(),
        }
    }

    /// Number of table rows including the out-of-vocabulary slot.
    pub fn table_rows(&self) -> usize {
        self.rows.len() + 1
    }

    pub fn row(&self, id: usize) -> usize {
        self.rows.get(&id).copied().unwrap_or(0)
    }

    /// Known ids in row order.
    pub fn ids(&self) -> Vec<usize> {
        let mut ids: Vec<(usize, usize)> = self.rows.iter().map(|(&id, &row)| (row, id)).collect();
        ids.sort_unstable();
        ids.into_iter().map(|(_, id)| id).collect()
    }
}

/// Question and concept embedding indices built from the given students'
/// interactions in `discipline`.
pub fn vocab_of(discipline: &Discipline, students: &[StudentId]) -> (EmbeddingIndex, EmbeddingIndex) {
    let seqs = || students.iter().filter_map(|&s| discipline.sequence(s)).flatten();
    (
        EmbeddingIndex::from_ids(seqs().map(|it| it.question)),
        EmbeddingIndex::from_ids(seqs().map(|it| it.concept)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_split_long_sequences_in_order() {
        let mut d = Discipline::new("x");
        d.questions.intern("q");
        d.concepts.intern("c");
        let seq: Vec<Interaction> = (0..450)
            .map(|i| Interaction {
                question: 0,
                concept: 0,
                response: (i % 2) as u8,
            })
            .collect();
        d.sequences.insert(3, seq.clone());
        let w = d.windows(&[3, 9], MAX_SEQ_LEN);
        assert_eq!(w.iter().map(|s| s.items.len()).collect::<Vec<_>>(), vec![200, 200, 50]);
        let rejoined: Vec<Interaction> = w.into_iter().flat_map(|s| s.items).collect();
        assert_eq!(rejoined, seq);
    }

    #[test]
    fn embedding_index_reserves_oov_row() {
        let idx = EmbeddingIndex::from_ids([7, 3, 7, 10]);
        assert_eq!(idx.table_rows(), 4);
        assert_eq!((idx.row(3), idx.row(7), idx.row(10)), (1, 2, 3));
        assert_eq!(idx.row(99), 0);
    }
}
