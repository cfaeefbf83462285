//! File contracts shared with external exporters: EMB1 binaries, concept
//! JSON and label files, written here byte by byte the way an independent
//! writer would.

use std::path::Path;

use proptest::prelude::*;

use pscbm::data::{
    load_concepts, load_embeddings, load_labels, save_embeddings, EmbeddingMatrix, InputPaths,
};
use pscbm::error::Error;
use pscbm::pipeline::Inputs;
use pscbm::rng::SplitMix64;

/// Minimal EMB1 writer independent of the library encoder.
fn emb1(rows: u32, cols: u32, values: &[f32]) -> Vec<u8> {
    let mut out = b"PSCB".to_vec();
    for word in [1u32, rows, cols] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Unit rows computed in f32, as an encoder exporting binary32 would.
fn unit_rows_f32(rows: usize, cols: usize, rng: &mut SplitMix64) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f32> = (0..cols).map(|_| rng.next_f64() as f32 - 0.5).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) {
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn handwritten_emb1_loads_and_resaves_identically() {
    let dir = tempfile::tempdir().unwrap();
    let values = [1.5f32, -2.0, 0.25, 3.0, 0.0, -0.125];
    let bytes = emb1(2, 3, &values);
    let path = dir.path().join("m.emb");
    write(&path, &bytes);

    let m = load_embeddings(&path).unwrap();
    assert_eq!((m.rows(), m.cols()), (2, 3));
    assert_eq!(m.row(1), &[3.0, 0.0, -0.125]);
    assert!(!m.is_normalized());

    let again = dir.path().join("again.emb");
    save_embeddings(&m, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn emb1_errors_name_offsets() {
    let cases: Vec<(Vec<u8>, &str)> = vec![
        (b"PSCX\x01\0\0\0".to_vec(), "offset 0"),
        (emb1(0, 3, &[]), "offset 8"),
        (emb1(2, 0, &[]), "offset 12"),
        (emb1(2, 2, &[1.0, 2.0, 3.0]), "28"),
        (emb1(1, 3, &[1.0, f32::NAN, 0.0]), "offset 20"),
    ];
    for (bytes, needle) in cases {
        let err = EmbeddingMatrix::from_emb1_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains(needle), "{err} lacks {needle:?}");
    }
    let err =
        EmbeddingMatrix::from_emb1_bytes(&emb1(2, 2, &[0.0, 1.0, f32::INFINITY, 0.0])).unwrap_err();
    assert!(matches!(
        err,
        Error::NonFiniteValue {
            row: 1,
            col: 0,
            offset: 24
        }
    ));
}

#[test]
fn label_file_is_one_index_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.txt");
    write(&path, "0\n2\n1\n2\n");
    let labels = load_labels(&path, 3).unwrap();
    assert_eq!(labels.as_slice(), &[0, 2, 1, 2]);
    assert_eq!(labels.to_text(), "0\n2\n1\n2\n");

    write(&path, "0\n3\n");
    assert!(matches!(
        load_labels(&path, 3),
        Err(Error::ClassOutOfRange { class: 3, .. })
    ));
    write(&path, "0\nbird\n");
    assert!(matches!(
        load_labels(&path, 3),
        Err(Error::LabelParse { line: 2, .. })
    ));
}

#[test]
fn concept_json_dedups_and_keeps_record_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("concepts.json");
    write(
        &path,
        r#"{"num_classes": 3, "concepts": [
            {"text": "a beak", "classes": [2]},
            {"text": "webbed feet", "classes": [0]},
            {"text": " A Beak", "classes": [1]},
            {"text": "red crown", "classes": [1, 0]}
        ]}"#,
    );
    let bank = load_concepts(&path).unwrap();
    assert_eq!(bank.texts(), ["a beak", "webbed feet", "red crown"]);
    assert_eq!(bank.get(0).classes, [1, 2]);
    assert_eq!(bank.get(2).classes, [0, 1]);
    // Text embedding rows follow record positions; a duplicate uses the first.
    assert_eq!(bank.embedding_rows(), [0, 1, 3]);

    let resaved = dir.path().join("resaved.json");
    pscbm::data::save_concepts(&bank, &resaved).unwrap();
    assert_eq!(load_concepts(&resaved).unwrap(), bank);

    for bad in [
        r#"{"num_classes": 10, "concepts": [{"text": "x", "classes": [99]}]}"#,
        r#"{"num_classes": 3, "concepts": [{"text": "  ", "classes": [0]}]}"#,
        r#"{"num_classes": 3, "concepts": [{"text": "x", "classes": [0]}"#,
    ] {
        write(&path, bad);
        assert!(load_concepts(&path).is_err(), "{bad}");
    }
}

/// A 10-image, 5-concept task laid out the way an encoder export writes it.
#[test]
fn exported_fixture_runs_through_loaders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = SplitMix64::new(42);
    let (n, m, dim) = (10usize, 5usize, 8usize);

    write(
        &d.join("train.emb"),
        emb1(n as u32, dim as u32, &unit_rows_f32(n, dim, &mut rng)),
    );
    write(
        &d.join("test.emb"),
        emb1(4, dim as u32, &unit_rows_f32(4, dim, &mut rng)),
    );
    let texts = unit_rows_f32(m, dim, &mut rng);
    write(&d.join("texts.emb"), emb1(m as u32, dim as u32, &texts));
    write(
        &d.join("train_labels.txt"),
        "0\n1\n0\n1\n0\n1\n0\n1\n0\n1\n",
    );
    write(&d.join("test_labels.txt"), "0\n1\n1\n0\n");
    write(
        &d.join("concepts.json"),
        r#"{"num_classes": 2, "concepts": [
            {"text": "c0", "classes": [0]},
            {"text": "c1", "classes": [1]},
            {"text": "c2", "classes": [0, 1]},
            {"text": "c3", "classes": [0]},
            {"text": "c4", "classes": [1]}
        ]}"#,
    );

    let raw = load_embeddings(d.join("texts.emb")).unwrap();
    for row in raw.iter_rows() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6, "row norm {norm}");
    }

    let paths = InputPaths {
        concepts: d.join("concepts.json"),
        text_embeddings: d.join("texts.emb"),
        train_embeddings: d.join("train.emb"),
        train_labels: d.join("train_labels.txt"),
        test_embeddings: d.join("test.emb"),
        test_labels: d.join("test_labels.txt"),
        affinity_embeddings: None,
        test_affinity_embeddings: None,
    };
    let inputs = Inputs::load(&paths).unwrap();
    assert_eq!(inputs.bank.len(), m);
    assert_eq!(inputs.texts.rows(), m);
    assert!(inputs.texts.is_normalized());
    assert_eq!(inputs.train.images.rows(), n);
    for (j, c) in inputs.bank.concepts().iter().enumerate() {
        assert_eq!(c.text, format!("c{j}"));
        assert_eq!(c.embedding_row, j);
        let got = inputs.texts.row(c.embedding_row);
        for (a, &b) in got.iter().zip(&texts[j * dim..(j + 1) * dim]) {
            assert!((a - f64::from(b)).abs() < 1e-6);
        }
    }

    // One concept too few in the text matrix breaks the ordering contract.
    write(
        &d.join("texts.emb"),
        emb1((m - 1) as u32, dim as u32, &texts[..(m - 1) * dim]),
    );
    assert!(Inputs::load(&paths).is_err());
}

proptest! {
    #[test]
    fn emb1_bytes_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let values: Vec<f32> = (0..rows * cols).map(|_| (rng.next_f64() * 200.0 - 100.0) as f32).collect();
        let bytes = emb1(rows as u32, cols as u32, &values);
        let m = EmbeddingMatrix::from_emb1_bytes(&bytes).unwrap();
        prop_assert_eq!(m.to_emb1_bytes(), bytes);
        let widened: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        prop_assert_eq!(m.data(), &widened[..]);
    }

    #[test]
    fn label_text_round_trip(labels in proptest::collection::vec(0usize..7, 0..40)) {
        let lv = pscbm::data::LabelVector::new(labels.clone(), 7).unwrap();
        let parsed = pscbm::data::LabelVector::parse(&lv.to_text(), 7).unwrap();
        prop_assert_eq!(parsed.as_slice(), &labels[..]);
    }
}
