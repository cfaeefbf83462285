use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_pscbm");

fn pscbm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn pscbm")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic task written through the CLI; returns its config path.
fn synth_task(dir: &Path) -> PathBuf {
    let out = pscbm(&[
        "synth",
        "--classes",
        "4",
        "--shared",
        "2",
        "--classes-per-shared",
        "2",
        "--dim",
        "16",
        "--n-per-class",
        "25",
        "--n-test-per-class",
        "10",
        "--seed",
        "4",
        "--set",
        "cbl.max_steps=800",
        "--out-dir",
        s(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("config.json")
}

#[test]
fn pipeline_writes_report_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_task(&tmp.path().join("task"));
    let run = tmp.path().join("run");
    let out = pscbm(&[
        "pipeline",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&run),
        "--threads",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let eval: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let acc = eval["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(eval["num_concepts"].as_u64().unwrap() > 0);

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let stages = manifest["stages"].as_array().unwrap();
    assert!(!stages.is_empty());
    for stage in stages {
        for file in stage["outputs"].as_array().unwrap() {
            let name = file["path"].as_str().unwrap();
            let bytes = std::fs::read(run.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(
                file["sha256"].as_str().unwrap(),
                hex::encode(Sha256::digest(&bytes)),
                "{name}"
            );
        }
    }
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 6);
}

#[test]
fn stages_rerun_standalone_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_task(&tmp.path().join("task"));
    let full = tmp.path().join("full");
    let out = pscbm(&["pipeline", "--config", s(&cfg), "--out-dir", s(&full)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let staged = tmp.path().join("staged");
    for stage in [
        "affinity",
        "pscs",
        "train-cbl",
        "train-fcl",
        "eval",
        "explain",
        "concept-map",
    ] {
        let out = pscbm(&[stage, "--config", s(&cfg), "--out-dir", s(&staged)]);
        assert_eq!(code(&out), 0, "{stage}: {}", stderr(&out));
    }
    for entry in std::fs::read_dir(&staged).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(staged.join(&name)).unwrap();
        let b = std::fs::read(full.join(&name)).unwrap();
        assert!(a == b, "{name:?} differs from the pipeline run");
    }
}

#[test]
fn out_of_range_threshold_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_task(tmp.path());
    let out = pscbm(&["pipeline", "--config", s(&cfg), "--set", "tau_conf=1.5"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("tau_conf") && err.contains("1.5"), "{err}");
    assert!(err.contains("stage config"), "{err}");
}

#[test]
fn missing_embeddings_exit_3_naming_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_task(tmp.path());
    std::fs::remove_file(tmp.path().join("train_images.emb")).unwrap();
    let out = pscbm(&[
        "pipeline",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(
        err.contains("stage ") && err.contains("train_images.emb"),
        "{err}"
    );
}

#[test]
fn no_surviving_concepts_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_task(tmp.path());
    let run = tmp.path().join("run");
    let out = pscbm(&[
        "pscs",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&run),
        "--set",
        "tau_conf=0.9999",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("stage pscs"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&pscbm(&["pipeline"])), 1);
    assert_eq!(code(&pscbm(&["no-such-command"])), 1);
    assert_eq!(code(&pscbm(&["--help"])), 0);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_task(tmp.path());
    assert_eq!(
        code(&pscbm(&["eval", "--config", s(&cfg), "--set", "bogus"])),
        1
    );
    assert_eq!(
        code(&pscbm(&[
            "eval",
            "--config",
            s(&cfg),
            "--set",
            "no_such_field=1"
        ])),
        1
    );
}

#[test]
fn sweep_rows_and_empty_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_task(&tmp.path().join("task"));
    let run = tmp.path().join("run");

    let out = pscbm(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&run),
        "--param",
        "k_exclusive",
        "--values",
        "0,1,2,3,4,5,6,7,8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(run.join("sweep_k_exclusive.csv")).unwrap();
    assert_eq!(csv, stdout(&out));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k_exclusive,acc,num_concepts,cea");
    assert_eq!(lines.len(), 10);

    let out = pscbm(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&run),
        "--param",
        "tau_conf",
        "--values",
        "0.10,0.15,0.20,0.25,0.30",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 6);

    let out = pscbm(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&run),
        "--param",
        "k_exclusive",
        "--values",
    ]);
    assert_eq!(code(&out), 1);
    let out = pscbm(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&run),
        "--param",
        "beta",
        "--values",
        "1",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn subsample_indices() {
    let parse =
        |o: &Output| -> Vec<usize> { stdout(o).lines().map(|l| l.parse().unwrap()).collect() };

    let all = pscbm(&["subsample", "--fraction", "1.0", "--rows", "50"]);
    assert_eq!(code(&all), 0);
    assert_eq!(parse(&all), (0..50).collect::<Vec<_>>());

    let tenth = pscbm(&[
        "subsample",
        "--fraction",
        "0.1",
        "--rows",
        "1000",
        "--seed",
        "7",
    ]);
    let picked = parse(&tenth);
    assert_eq!(picked.len(), 100);
    assert!(picked.windows(2).all(|w| w[0] < w[1]));
    assert!(picked.iter().all(|&i| i < 1000));

    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("idx.txt");
    let again = pscbm(&[
        "subsample",
        "--fraction",
        "0.1",
        "--rows",
        "1000",
        "--seed",
        "7",
        "--output",
        s(&file),
    ]);
    assert_eq!(code(&again), 0);
    assert_eq!(std::fs::read_to_string(&file).unwrap(), stdout(&tenth));
    let other = pscbm(&[
        "subsample",
        "--fraction",
        "0.1",
        "--rows",
        "1000",
        "--seed",
        "8",
    ]);
    assert_ne!(parse(&other), picked);

    for bad in ["0", "1.5", "-0.1"] {
        let out = pscbm(&["subsample", "--fraction", bad, "--rows", "10"]);
        assert_eq!(code(&out), 1, "fraction {bad}");
    }

    let cfg = synth_task(&tmp.path().join("task"));
    let from_cfg = pscbm(&["subsample", "--config", s(&cfg), "--fraction", "0.5"]);
    assert_eq!(code(&from_cfg), 0, "{}", stderr(&from_cfg));
    assert_eq!(parse(&from_cfg).len(), 50);
}

#[test]
fn seed_flag_changes_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let mk = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        let out = pscbm(&[
            "synth",
            "--classes",
            "3",
            "--shared",
            "1",
            "--classes-per-shared",
            "2",
            "--n-per-class",
            "5",
            "--seed",
            seed,
            "--out-dir",
            s(&dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(dir.join("train_images.emb")).unwrap()
    };
    assert_eq!(mk("a", "1"), mk("b", "1"));
    assert_ne!(mk("a", "1"), mk("c", "2"));
}
