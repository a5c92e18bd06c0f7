//! Dataset files: RFC-4180 CSV splits plus a JSON schema sidecar.
//!
//! Layout of a dataset directory:
//!   schema.json            concept names, value vocabularies, task spec
//!   train.csv / dev.csv / test.csv
//!
//! CSV header: `text, concept:<name> x K, label`. Labels are class names for
//! classification and decimal numbers for regression.

use std::path::Path;

use crate::data::schema::{ConceptSchema, DatasetSplit, Example, Label, Provenance, TaskSpec};
use crate::error::{Error, Result};

const SCHEMA_FILE: &str = "schema.json";
const SPLIT_FILES: [(&str, &str); 3] = [
    ("train", "train.csv"),
    ("dev", "dev.csv"),
    ("test", "test.csv"),
];

pub fn save_schema(schema: &ConceptSchema, dir: &Path) -> Result<()> {
    let out = serde_json::to_string_pretty(schema)?;
    std::fs::write(dir.join(SCHEMA_FILE), out + "\n")?;
    Ok(())
}

pub fn load_schema(dir: &Path) -> Result<ConceptSchema> {
    let path = dir.join(SCHEMA_FILE);
    let bytes = std::fs::read(&path).map_err(|e| {
        Error::Schema(format!("cannot read schema at {}: {e}", path.display()))
    })?;
    let schema: ConceptSchema = serde_json::from_slice(&bytes)?;
    schema.validate()?;
    Ok(schema)
}

fn header(schema: &ConceptSchema) -> Vec<String> {
    let mut cols = vec!["text".to_string()];
    cols.extend(schema.concepts.iter().map(|c| format!("concept:{}", c.name)));
    cols.push("label".to_string());
    cols
}

fn label_to_field(schema: &ConceptSchema, label: &Label) -> Result<String> {
    match (&schema.task, label) {
        (TaskSpec::Classification { classes }, Label::Class(c)) => classes
            .get(*c)
            .cloned()
            .ok_or_else(|| Error::Index(format!("class index {c} out of range"))),
        (TaskSpec::Regression { .. }, Label::Real(v)) => Ok(format!("{v}")),
        _ => Err(Error::Schema("label kind does not match task".into())),
    }
}

/// Write one split as canonical CSV (LF line endings, quotes only as needed).
pub fn save_split_file(examples: &[Example], schema: &ConceptSchema, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_io)?;
    writer.write_record(header(schema)).map_err(csv_io)?;
    for ex in examples {
        let mut record = vec![ex.text.clone()];
        for (k, &v) in ex.concepts.iter().enumerate() {
            record.push(schema.concepts[k].values[v].clone());
        }
        record.push(label_to_field(schema, &ex.label)?);
        writer.write_record(&record).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

/// Parse one split file against the schema. Errors carry the 1-based data
/// row and the offending column.
pub fn load_split_file(
    path: &Path,
    schema: &ConceptSchema,
    id_offset: usize,
) -> Result<Vec<Example>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;

    let expected = header(schema);
    let found: Vec<String> = reader
        .headers()
        .map_err(csv_io)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for col in &expected {
        if !found.contains(col) {
            return Err(Error::Schema(format!(
                "{}: missing column '{col}'",
                path.display()
            )));
        }
    }
    // column positions (the contract fixes the order, but match by name)
    let pos = |name: &str| found.iter().position(|h| h == name).unwrap();
    let text_col = pos("text");
    let concept_cols: Vec<usize> = schema
        .concepts
        .iter()
        .map(|c| pos(&format!("concept:{}", c.name)))
        .collect();
    let label_col = pos("label");

    let mut out = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: "<record>".into(),
            message: e.to_string(),
        })?;
        let field = |col: usize, name: &str| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::Parse {
                row,
                column: name.into(),
                message: "missing field".into(),
            })
        };
        let text = field(text_col, "text")?.to_string();
        let mut concepts = Vec::with_capacity(schema.num_concepts());
        for (k, &col) in concept_cols.iter().enumerate() {
            let name = &schema.concepts[k].name;
            let raw = field(col, &format!("concept:{name}"))?;
            let value = schema.value_index(k, raw.trim()).ok_or_else(|| Error::Parse {
                row,
                column: format!("concept:{name}"),
                message: format!("unknown concept value '{}'", raw.trim()),
            })?;
            concepts.push(value);
        }
        let raw_label = field(label_col, "label")?.trim().to_string();
        let label = match &schema.task {
            TaskSpec::Classification { classes } => {
                let idx = classes
                    .iter()
                    .position(|c| c == &raw_label)
                    .ok_or_else(|| Error::Parse {
                        row,
                        column: "label".into(),
                        message: format!("unknown class '{raw_label}'"),
                    })?;
                Label::Class(idx)
            }
            TaskSpec::Regression { .. } => {
                let v: f64 = raw_label.parse().map_err(|_| Error::Parse {
                    row,
                    column: "label".into(),
                    message: format!("not a number: '{raw_label}'"),
                })?;
                Label::Real(v)
            }
        };
        out.push(Example {
            id: id_offset + row_idx,
            text,
            tokens: Vec::new(),
            concepts,
            label,
        });
    }
    Ok(out)
}

/// Load a dataset directory (schema sidecar plus the three split files).
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let schema = load_schema(dir)?;
    let mut splits: Vec<Vec<Example>> = Vec::new();
    let mut offset = 0;
    for (_, file) in SPLIT_FILES {
        let path = dir.join(file);
        if !path.exists() {
            return Err(Error::Schema(format!("missing split file {}", path.display())));
        }
        let examples = load_split_file(&path, &schema, offset)?;
        offset += examples.len();
        splits.push(examples);
    }
    let test = splits.pop().unwrap();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let ds = DatasetSplit {
        schema,
        train,
        dev,
        test,
        provenance: Provenance::Files {
            dir: dir.display().to_string(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Write all three splits plus the schema sidecar.
pub fn save_dataset(ds: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_schema(&ds.schema, dir)?;
    for (name, file) in SPLIT_FILES {
        save_split_file(ds.split(name)?, &ds.schema, &dir.join(file))?;
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Schema(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::ConceptSpec;

    fn schema() -> ConceptSchema {
        ConceptSchema {
            concepts: vec![
                ConceptSpec {
                    name: "food".into(),
                    values: vec!["negative".into(), "unknown".into(), "positive".into()],
                },
                ConceptSpec {
                    name: "service".into(),
                    values: vec!["negative".into(), "unknown".into(), "positive".into()],
                },
            ],
            task: TaskSpec::Classification {
                classes: vec!["bad".into(), "ok".into(), "good".into()],
            },
        }
    }

    fn write(path: &Path, contents: &str) {
        std::fs::write(path, contents).unwrap();
    }

    #[test]
    fn well_formed_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        write(
            &path,
            "text,concept:food,concept:service,label\n\
             the food was fine,positive,unknown,good\n\
             awful meal,negative,negative,bad\n\
             \"quoted, text\",unknown,positive,ok\n",
        );
        let examples = load_split_file(&path, &schema(), 0).unwrap();
        assert_eq!(examples.len(), 3);
        assert_eq!(examples[0].concepts, vec![2, 1]);
        assert_eq!(examples[2].text, "quoted, text");

        // save + reload preserves content
        let out = dir.path().join("copy.csv");
        save_split_file(&examples, &schema(), &out).unwrap();
        let reloaded = load_split_file(&out, &schema(), 0).unwrap();
        assert_eq!(examples, reloaded);

        // canonical form is stable: save(load(save(x))) == save(x)
        let again = dir.path().join("copy2.csv");
        save_split_file(&reloaded, &schema(), &again).unwrap();
        assert_eq!(
            std::fs::read(&out).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn unknown_concept_value_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        write(
            &path,
            "text,concept:food,concept:service,label\n\
             fine,positive,unknown,good\n\
             odd,Maybe,unknown,good\n",
        );
        let err = load_split_file(&path, &schema(), 0).unwrap_err();
        match err {
            Error::Parse { row, column, message } => {
                assert_eq!(row, 2);
                assert_eq!(column, "concept:food");
                assert!(message.contains("Maybe"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.csv");
        write(&path, "text,concept:food,label\nfine,positive,good\n");
        let err = load_split_file(&path, &schema(), 0).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("concept:service"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn crlf_and_quoting_parse_identically() {
        let dir = tempfile::tempdir().unwrap();
        let lf = dir.path().join("lf.csv");
        let crlf = dir.path().join("crlf.csv");
        write(
            &lf,
            "text,concept:food,concept:service,label\n\
             plain text,positive,unknown,good\n\
             another row,negative,positive,bad\n",
        );
        write(
            &crlf,
            "text,concept:food,concept:service,label\r\n\
             \"plain text\",\"positive\",unknown,\"good\"\r\n\
             \"another row\",negative,\"positive\",bad\r\n",
        );
        let a = load_split_file(&lf, &schema(), 0).unwrap();
        let b = load_split_file(&crlf, &schema(), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regression_labels_parse() {
        let s = ConceptSchema {
            concepts: schema().concepts,
            task: TaskSpec::Regression { min: 0.0, max: 9.0 },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.csv");
        write(
            &path,
            "text,concept:food,concept:service,label\nfine,positive,unknown,7.5\n",
        );
        let examples = load_split_file(&path, &s, 0).unwrap();
        assert_eq!(examples[0].label, Label::Real(7.5));
    }
}
