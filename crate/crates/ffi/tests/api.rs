use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use pscbm::data::EmbeddingMatrix;
use pscbm::pscs::{greedy_merge, CorrelationMatrix};
use pscbm_ffi::*;

mod common;
use common::trained_fixture;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pscbm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn embeddings_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let values = [3.0, 4.0, 0.0, 0.0, 0.0, 2.0];
    let mut emb = ptr::null_mut();
    unsafe {
        assert_eq!(
            pscbm_embeddings_from_data(2, 3, values.as_ptr(), &mut emb),
            PscbmStatus::Ok
        );
        assert_eq!(pscbm_embeddings_rows(emb), 2);
        assert_eq!(pscbm_embeddings_cols(emb), 3);

        let path = cstr(&dir.path().join("m.emb"));
        assert_eq!(pscbm_embeddings_save(emb, path.as_ptr()), PscbmStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(
            pscbm_embeddings_load(path.as_ptr(), &mut loaded),
            PscbmStatus::Ok
        );
        let mut row = [0.0; 3];
        assert_eq!(
            pscbm_embeddings_row(loaded, 0, row.as_mut_ptr(), 3),
            PscbmStatus::Ok
        );
        assert_eq!(row, [3.0, 4.0, 0.0]);

        let mut unit = ptr::null_mut();
        assert_eq!(
            pscbm_embeddings_normalize(loaded, &mut unit),
            PscbmStatus::Ok
        );
        assert_eq!(
            pscbm_embeddings_row(unit, 0, row.as_mut_ptr(), 3),
            PscbmStatus::Ok
        );
        assert!((row[0] - 0.6).abs() < 1e-12 && (row[1] - 0.8).abs() < 1e-12);
        assert_eq!(
            pscbm_embeddings_row(unit, 1, row.as_mut_ptr(), 3),
            PscbmStatus::Ok
        );
        assert_eq!(row, [0.0, 0.0, 1.0]);

        pscbm_embeddings_free(unit);
        pscbm_embeddings_free(loaded);
        pscbm_embeddings_free(emb);
        pscbm_embeddings_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut emb = ptr::null_mut();
    unsafe {
        pscbm_clear_error();
        assert!(pscbm_last_error().is_null());

        let missing = cstr(&dir.path().join("missing.emb"));
        assert_eq!(
            pscbm_embeddings_load(missing.as_ptr(), &mut emb),
            PscbmStatus::Io
        );
        assert!(last_error().contains("missing.emb"));
        assert!(emb.is_null());

        let bad = dir.path().join("bad.emb");
        std::fs::write(&bad, b"NOPE0000").unwrap();
        assert_eq!(
            pscbm_embeddings_load(cstr(&bad).as_ptr(), &mut emb),
            PscbmStatus::Io
        );

        assert_eq!(
            pscbm_embeddings_load(ptr::null(), &mut emb),
            PscbmStatus::NullPointer
        );
        assert_eq!(last_error(), "path is NULL");
        assert_eq!(
            pscbm_embeddings_from_data(1, 2, [1.0, f64::NAN].as_ptr(), &mut emb),
            PscbmStatus::Invalid
        );
        assert_eq!(
            pscbm_embeddings_from_data(1, 1, ptr::null(), &mut emb),
            PscbmStatus::NullPointer
        );

        assert_eq!(
            pscbm_embeddings_from_data(1, 2, [1.0, 2.0].as_ptr(), &mut emb),
            PscbmStatus::Ok
        );
        let mut row = [0.0; 3];
        assert_eq!(
            pscbm_embeddings_row(emb, 0, row.as_mut_ptr(), 3),
            PscbmStatus::Invalid
        );
        assert_eq!(
            pscbm_embeddings_row(emb, 5, row.as_mut_ptr(), 2),
            PscbmStatus::Invalid
        );
        pscbm_embeddings_free(emb);

        let mut out = 0.0;
        assert_eq!(pscbm_cea(1.5, 64, 10, 0.25, &mut out), PscbmStatus::Invalid);
        assert!(last_error().contains("acc"));
        assert_eq!(pscbm_cea(0.9, 0, 10, 0.25, &mut out), PscbmStatus::Invalid);
        assert_eq!(
            pscbm_cea(0.9, 64, 10, 0.25, ptr::null_mut()),
            PscbmStatus::NullPointer
        );
    }
}

#[test]
fn cea_matches_library() {
    let mut out = 0.0;
    for &(acc, m, l, beta) in &[
        (0.898, 64, 10, 0.25),
        (1.0, 2, 3, 1.0),
        (0.5, 5000, 200, 0.5),
    ] {
        assert_eq!(
            unsafe { pscbm_cea(acc, m, l, beta, &mut out) },
            PscbmStatus::Ok
        );
        assert_eq!(out, pscbm::metrics::cea(acc, m, l, beta).unwrap());
    }
}

#[test]
fn greedy_merge_matches_library() {
    #[rustfmt::skip]
    let q = vec![
        1.0, 0.99, 0.2, 0.99,
        0.99, 1.0, 0.1, 0.5,
        0.2, 0.1, 1.0, 0.3,
        0.99, 0.5, 0.3, 1.0,
    ];
    let mut merged = [usize::MAX; 4];
    let mut survivors = 0;
    let status =
        unsafe { pscbm_greedy_merge(q.as_ptr(), 4, 0.9, merged.as_mut_ptr(), &mut survivors) };
    assert_eq!(status, PscbmStatus::Ok);
    assert_eq!(merged, [0, 0, 2, 0]);
    assert_eq!(survivors, 2);

    let (kept, map) = greedy_merge(&CorrelationMatrix::new(4, q.clone()).unwrap(), 0.9);
    assert_eq!(kept.len(), survivors);
    for (j, &r) in map.iter() {
        assert_eq!(merged[*j], r);
    }

    let status =
        unsafe { pscbm_greedy_merge(q.as_ptr(), 4, f64::NAN, merged.as_mut_ptr(), &mut survivors) };
    assert_eq!(status, PscbmStatus::Invalid);
}

#[test]
fn model_handle_predicts_like_library() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained_fixture(dir.path());
    let expected = model.predict(&data.test_images).unwrap();
    let test_path = cstr(&dir.path().join(pscbm::synth::TEST_EMBEDDINGS));
    let model_path = cstr(&dir.path().join("model.json"));

    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(
            pscbm_model_load(model_path.as_ptr(), &mut m),
            PscbmStatus::Ok
        );
        let (mut d, mut c, mut l) = (0, 0, 0);
        assert_eq!(pscbm_model_dims(m, &mut d, &mut c, &mut l), PscbmStatus::Ok);
        assert_eq!((d, c, l), (16, model.dims().num_concepts, 4));
        assert_eq!(
            pscbm_model_dims(m, ptr::null_mut(), ptr::null_mut(), &mut l),
            PscbmStatus::Ok
        );

        let mut emb = ptr::null_mut();
        assert_eq!(
            pscbm_embeddings_load(test_path.as_ptr(), &mut emb),
            PscbmStatus::Ok
        );
        let n = pscbm_embeddings_rows(emb);
        let mut preds = vec![0u32; n];
        assert_eq!(
            pscbm_model_predict(m, emb, preds.as_mut_ptr(), n),
            PscbmStatus::Ok
        );
        let got: Vec<usize> = preds.iter().map(|&p| p as usize).collect();
        assert_eq!(got, expected.as_slice());
        assert_eq!(
            pscbm_model_predict(m, emb, preds.as_mut_ptr(), n - 1),
            PscbmStatus::Invalid
        );

        let z = data.test_images.row(0);
        let mut act = vec![0.0; c];
        assert_eq!(
            pscbm_model_activations(m, z.as_ptr(), d, act.as_mut_ptr(), c),
            PscbmStatus::Ok
        );
        assert_eq!(act, model.activations(z));

        let wrong = EmbeddingMatrix::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let mut small = ptr::null_mut();
        assert_eq!(
            pscbm_embeddings_from_data(1, 3, wrong.data().as_ptr(), &mut small),
            PscbmStatus::Ok
        );
        let mut one = [0u32];
        assert_ne!(
            pscbm_model_predict(m, small, one.as_mut_ptr(), 1),
            PscbmStatus::Ok
        );

        pscbm_embeddings_free(small);
        pscbm_embeddings_free(emb);
        pscbm_model_free(m);
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(pscbm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
