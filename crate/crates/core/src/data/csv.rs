use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{Dataset, Discipline, Interaction, StudentId};
use crate::error::{AcktError, Result};

pub const CSV_HEADER: &str = "student_id,discipline,question_id,concept_id,response,order_index";

/// `(order_index, row, interaction)` of one CSV record.
type OrderedRow = (i64, usize, Interaction);

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(file, &path.display().to_string())
}

/// Parses interaction rows; `origin` labels parse errors.
pub fn read_csv<R: Read>(input: R, origin: &str) -> Result<Dataset> {
    let err = |line: u64, msg: String| AcktError::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);

    let mut records = reader.records();
    match records.next() {
        None => return Err(err(1, "missing header".into())),
        Some(Err(e)) => return Err(err(1, e.to_string())),
        Some(Ok(h)) => {
            let got = h.iter().collect::<Vec<_>>().join(",");
            let got = got.trim_start_matches('\u{feff}');
            if got != CSV_HEADER {
                return Err(err(1, format!("expected header `{CSV_HEADER}`, got `{got}`")));
            }
        }
    }

    let mut dataset = Dataset::default();
    let mut rows: BTreeMap<(usize, StudentId), Vec<OrderedRow>> = BTreeMap::new();
    for (row, rec) in records.enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
            err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        if rec.len() != 6 {
            return Err(err(line, format!("expected 6 columns, found {}", rec.len())));
        }
        let field = |i: usize, name: &str| {
            let v = rec[i].trim();
            if v.is_empty() {
                Err(err(line, format!("empty {name}")))
            } else {
                Ok(v)
            }
        };
        let student = dataset.students.intern(field(0, "student_id")?);
        let disc_name = field(1, "discipline")?;
        let disc = match dataset.disciplines.iter().position(|d| d.name == disc_name) {
            Some(i) => i,
            None => {
                dataset.disciplines.push(Discipline::new(disc_name));
                dataset.disciplines.len() - 1
            }
        };
        let response = match field(4, "response")? {
            "0" => 0,
            "1" => 1,
            other => return Err(err(line, format!("response must be 0 or 1, got `{other}`"))),
        };
        let order: i64 = field(5, "order_index")?
            .parse()
            .map_err(|_| err(line, format!("order_index `{}` is not an integer", rec[5].trim())))?;
        let d = &mut dataset.disciplines[disc];
        let it = Interaction {
            question: d.questions.intern(field(2, "question_id")?),
            concept: d.concepts.intern(field(3, "concept_id")?),
            response,
        };
        rows.entry((disc, student)).or_default().push((order, row, it));
    }

    for ((disc, student), mut items) in rows {
        items.sort_by_key(|&(order, row, _)| (order, row));
        dataset.disciplines[disc]
            .sequences
            .insert(student, items.into_iter().map(|(_, _, it)| it).collect());
    }
    Ok(dataset)
}

/// Writes `dataset` in the loader's format, one row per interaction.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = ::csv::Writer::from_writer(File::create(path)?);
    w.write_record(CSV_HEADER.split(','))
        .map_err(|e| AcktError::Data(e.to_string()))?;
    for d in &dataset.disciplines {
        for (&s, seq) in &d.sequences {
            for (i, it) in seq.iter().enumerate() {
                w.write_record([
                    dataset.students.name(s),
                    &d.name,
                    d.questions.name(it.question),
                    d.concepts.name(it.concept),
                    if it.response == 1 { "1" } else { "0" },
                    &i.to_string(),
                ])
                .map_err(|e| AcktError::Data(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), "mem.csv")
    }

    #[test]
    fn parses_and_orders_rows() {
        let ds = parse(
            "student_id,discipline,question_id,concept_id,response,order_index\n\
             alice,java,q2,c1,1,5\n\
             alice,java,q1,c1,0,2\n\
             alice,java,q3,c2,1,9\n",
        )
        .unwrap();
        assert_eq!(ds.n_students(), 1);
        let java = ds.discipline("java").unwrap();
        assert_eq!(java.n_students(), 1);
        let seq = java.sequence(0).unwrap();
        assert_eq!(seq.len(), 3);
        let qs: Vec<&str> = seq.iter().map(|it| java.questions.name(it.question)).collect();
        assert_eq!(qs, vec!["q1", "q2", "q3"]);
        assert_eq!(seq.iter().map(|it| it.response).collect::<Vec<_>>(), vec![0, 1, 1]);
    }

    #[test]
    fn header_only_is_empty_dataset() {
        let ds = parse("student_id,discipline,question_id,concept_id,response,order_index\n").unwrap();
        assert_eq!(ds.n_students(), 0);
        assert!(ds.disciplines.is_empty());
    }

    #[test]
    fn bad_response_names_line() {
        let e = parse(
            "student_id,discipline,question_id,concept_id,response,order_index\n\
             a,java,q1,c1,1,0\n\
             a,java,q1,c1,2,1\n",
        )
        .unwrap_err();
        assert!(e.is_data_error());
        assert!(e.to_string().starts_with("mem.csv:3:"), "{e}");
    }

    #[test]
    fn rejects_header_mismatch_missing_column_and_bad_order() {
        assert!(parse("student_id,discipline,question_id,concept_id,response\n").is_err());
        let e = parse(
            "student_id,discipline,question_id,concept_id,response,order_index\n\
             a,java,q1,c1,1\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains(":2:"), "{e}");
        let e = parse(
            "student_id,discipline,question_id,concept_id,response,order_index\n\
             a,java,q1,c1,1,x\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("order_index"), "{e}");
    }

    #[test]
    fn write_then_read_preserves_sequences() {
        let ds = parse(
            "student_id,discipline,question_id,concept_id,response,order_index\n\
             a,java,q1,c1,1,0\n\
             b,python,p1,k1,0,0\n\
             a,python,p2,k1,1,3\n",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        let named = |d: &Dataset| {
            let mut rows = Vec::new();
            for disc in &d.disciplines {
                for (&s, seq) in &disc.sequences {
                    for it in seq {
                        rows.push((
                            d.students.name(s).to_string(),
                            disc.name.clone(),
                            disc.questions.name(it.question).to_string(),
                            it.response,
                        ));
                    }
                }
            }
            rows.sort();
            rows
        };
        assert_eq!(named(&back), named(&ds));
    }
}
