//! Concept-annotated datasets: schema, CSV ingestion, tokenization, and the
//! planted-structure synthetic generator.

mod schema;
mod storage;
mod synthetic;
mod tokenizer;

pub use schema::{
    ConceptSchema, ConceptSpec, DatasetSplit, Example, Label, Provenance, TaskSpec,
};
pub use storage::{
    load_dataset, load_schema, load_split_file, save_dataset, save_schema, save_split_file,
};
pub use synthetic::{
    default_regression_schema, default_schema, default_weights, generate_synthetic,
    label_from_concepts, PhraseBank, DEFAULT_SIZES,
};
pub use tokenizer::{coverage, tokenize, word_tokens, Vocab, UNK_ID, UNK_TOKEN};

/// Build the vocabulary from the train split and tokenize every split.
pub fn tokenize_split(ds: &mut DatasetSplit, max_seq_len: usize) -> Vocab {
    let vocab = Vocab::build(ds.train.iter().map(|e| e.text.as_str()));
    for ex in ds
        .train
        .iter_mut()
        .chain(ds.dev.iter_mut())
        .chain(ds.test.iter_mut())
    {
        ex.tokens = tokenize(&ex.text, &vocab, max_seq_len);
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_coverage_is_high() {
        let schema = default_schema();
        let mut ds = generate_synthetic(&schema, [400, 100, 100], 0.0, 2).unwrap();
        let vocab = tokenize_split(&mut ds, 32);
        let dev_cov = coverage(ds.dev.iter().map(|e| e.text.as_str()), &vocab);
        let test_cov = coverage(ds.test.iter().map(|e| e.text.as_str()), &vocab);
        assert!(dev_cov >= 0.99, "dev coverage {dev_cov}");
        assert!(test_cov >= 0.99, "test coverage {test_cov}");
        for ex in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            assert!(!ex.tokens.is_empty());
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let schema = default_schema();
        let ds = generate_synthetic(&schema, [30, 10, 10], 0.1, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.schema, ds.schema);
        assert_eq!(loaded.train.len(), 30);
        for (a, b) in ds.train.iter().zip(&loaded.train) {
            assert_eq!(a.text, b.text);
            assert_eq!(a.concepts, b.concepts);
            assert_eq!(a.label, b.label);
            assert_eq!(a.id, b.id);
        }
        // saving the loaded dataset reproduces the files byte for byte
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for file in ["train.csv", "dev.csv", "test.csv", "schema.json"] {
            assert_eq!(
                std::fs::read(dir.path().join(file)).unwrap(),
                std::fs::read(dir2.path().join(file)).unwrap(),
                "{file} differs"
            );
        }
    }
}
