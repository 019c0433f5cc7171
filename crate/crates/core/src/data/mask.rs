use super::{CrossPair, Interaction, SplitPlan, StudentId};

/// A student as the transfer model sees them: the source history is input,
/// target-discipline responses exist only as labels. The target question of
/// each label is known; its response is not an input.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStudent {
    pub student: StudentId,
    pub source: Vec<Interaction>,
    /// `(question, concept)` of each held-out target interaction.
    pub queries: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalView {
    pub students: Vec<LabeledStudent>,
    /// Listed students dropped because they lack source or target records.
    pub excluded: usize,
}

impl EvalView {
    pub fn n_labels(&self) -> usize {
        self.students.iter().map(|s| s.labels.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }
}

fn labeled(pair: &CrossPair<'_>, students: &[StudentId]) -> EvalView {
    let mut view = EvalView::default();
    for &s in students {
        match (pair.source.sequence(s), pair.target.sequence(s)) {
            (Some(src), Some(tgt)) => view.students.push(LabeledStudent {
                student: s,
                source: src.to_vec(),
                queries: tgt.iter().map(|it| (it.question, it.concept)).collect(),
                labels: tgt.iter().map(|it| it.response).collect(),
            }),
            _ => view.excluded += 1,
        }
    }
    view
}

/// Cold-start view over the validation (`test == false`) or test students.
pub fn mask_target_history(plan: &SplitPlan, pair: &CrossPair<'_>, test: bool) -> EvalView {
    labeled(pair, if test { &plan.test } else { &plan.validation })
}

/// Overlap-training students with their target responses as supervision.
pub fn overlap_training_view(plan: &SplitPlan, pair: &CrossPair<'_>) -> EvalView {
    labeled(pair, &plan.overlap_train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Discipline};

    #[test]
    fn cold_start_students_keep_labels_only() {
        let it = |r| Interaction {
            question: 0,
            concept: 0,
            response: r,
        };
        let mut ds = Dataset::default();
        let mut src = Discipline::new("s");
        let mut tgt = Discipline::new("t");
        for d in [&mut src, &mut tgt] {
            d.questions.intern("q");
            d.concepts.intern("c");
        }
        for i in 0..3 {
            ds.students.intern(&i.to_string());
        }
        src.sequences.insert(0, vec![it(1), it(0)]);
        src.sequences.insert(1, vec![it(1)]);
        src.sequences.insert(2, vec![it(0)]);
        tgt.sequences.insert(0, (0..10).map(|k| it((k % 2) as u8)).collect());
        tgt.sequences.insert(2, vec![it(1)]);
        ds.disciplines = vec![src, tgt];
        let pair = ds.pair("s", "t").unwrap();
        let plan = SplitPlan {
            seed: 0,
            n_students: 3,
            pretrain: vec![2],
            validation: vec![],
            test: vec![0, 1],
            overlap_train: vec![2],
        };
        let view = mask_target_history(&plan, &pair, true);
        assert_eq!(view.students.len(), 1);
        assert_eq!(view.excluded, 1);
        let s = &view.students[0];
        assert_eq!(s.labels.len(), 10);
        assert_eq!(s.queries.len(), 10);
        assert_eq!(s.source, pair.source.sequence(0).unwrap());

        let train = overlap_training_view(&plan, &pair);
        assert_eq!(train.students[0].labels, vec![1]);
    }
}
