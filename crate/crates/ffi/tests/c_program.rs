use std::path::{Path, PathBuf};
use std::process::Command;

mod common;
use common::trained_fixture;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// `target/<profile>` of the running test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

fn cc() -> String {
    std::env::var("CC").unwrap_or_else(|_| "cc".into())
}

fn run(cmd: &mut Command) -> String {
    let out = cmd
        .output()
        .unwrap_or_else(|e| panic!("spawn {cmd:?}: {e}"));
    assert!(
        out.status.success(),
        "{cmd:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = crate_dir().join("include/pscbm.h");
    assert!(
        header.exists(),
        "build script did not write {}",
        header.display()
    );
    for (lang, std) in [("c", "-std=c99"), ("c++", "-std=c++11")] {
        run(Command::new(cc())
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, std])
            .arg(&header));
    }
}

#[test]
fn c_program_links_and_matches_library() {
    let lib = artifact_dir().join("libpscbm_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained_fixture(dir.path());

    let exe = dir.path().join("smoke");
    run(Command::new(cc())
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"]));

    let stdout = run(Command::new(&exe)
        .arg(dir.path().join("model.json"))
        .arg(dir.path().join(pscbm::synth::TEST_EMBEDDINGS)));
    let lines: Vec<&str> = stdout.lines().collect();
    let expected = model.predict(&data.test_images).unwrap();
    let n = expected.len();
    assert_eq!(lines.len(), n + 1);
    let got: Vec<usize> = lines[..n].iter().map(|l| l.parse().unwrap()).collect();
    assert_eq!(got, expected.as_slice());
    let cea: f64 = lines[n].strip_prefix("cea ").unwrap().parse().unwrap();
    assert_eq!(cea, pscbm::metrics::cea(0.898, 64, 10, 0.25).unwrap());
}
