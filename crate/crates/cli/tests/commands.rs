use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use persona_ecosystem::pipeline::{RunManifest, Stage, MANIFEST_FILE};

fn bin(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persona-eco"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .unwrap()
}

fn core_data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel != MANIFEST_FILE {
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
    }
    out
}

#[test]
fn cluster_before_embed_names_embed() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["cluster"]);
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("persona-eco embed"), "{err}");

    let out = bin(dir.path(), &["serve"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("persona-eco validate"));
}

#[test]
fn invalid_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["--rqe-threshold", "1.5", "preprocess"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("rqe_threshold"));
    let out = bin(dir.path(), &["--k-min", "6", "--k-max", "4", "preprocess"]);
    assert!(!out.status.success());
    let out = bin(dir.path(), &["ingest", "/no/such/file.jsonl"]);
    assert!(!out.status.success());
}

#[test]
fn stepwise_commands_match_run_and_are_deterministic() {
    let stepwise = tempfile::tempdir().unwrap();
    let sample = core_data("sample_posts.jsonl");
    let out = bin(stepwise.path(), &["ingest", sample.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("ingested"));
    for cmd in ["preprocess", "embed", "cluster", "generate", "validate", "simulate", "analyze", "report"] {
        let out = bin(stepwise.path(), &[cmd]);
        assert!(out.status.success(), "{cmd}: {}", text(&out.stderr));
    }
    let manifest: RunManifest = serde_json::from_slice(&fs::read(stepwise.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    for stage in Stage::ALL {
        assert!(manifest.is_complete(stage), "{stage}");
    }

    let whole = tempfile::tempdir().unwrap();
    let out = bin(whole.path(), &["run", sample.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("Cross-persona validation"));
    let (a, b) = (artifacts(stepwise.path()), artifacts(whole.path()));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs");
    }
}

#[test]
fn analyze_reference_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = core_data("reference_transcript.jsonl");
    let out = bin(dir.path(), &["analyze", "--transcript", transcript.to_str().unwrap(), "--window", "2"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("9 turns, 44 agent messages, 3 moderator messages, 1 passes"), "{stdout}");
    assert!(stdout.contains("Rolling similarity (window 2)"), "{stdout}");
    let report = bin(dir.path(), &["report"]);
    assert!(report.status.success(), "{}", text(&report.stderr));
    assert!(text(&report.stdout).contains("44 agent messages"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("eco.toml");
    fs::write(
        &config,
        "seed = 7\n[analysis]\nwindow = 3\ntemperature = 0.5\n[service]\nlisten = \"127.0.0.1:0\"\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let transcript = core_data("reference_transcript.jsonl");
    let out = bin(
        &run,
        &["--config", config.to_str().unwrap(), "--temperature", "0.2", "analyze", "--transcript", transcript.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let effective: serde_json::Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(effective["seed"], 7);
    assert_eq!(effective["analysis"]["window"], 3);
    assert_eq!(effective["analysis"]["temperature"], 0.2);
    assert_eq!(effective["simulation"]["seed"], 7);
}
