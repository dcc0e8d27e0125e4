use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pathsearch")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synthetic_corpus_through_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, corpus) = (root.join("data"), root.join("corpus"));
    let (model, index, hits) = (root.join("model.bin"), root.join("index.bin"), root.join("hits.json"));

    run(&["synth", "--out", p(&data), "--pairs", "4", "--seed", "3"]);
    assert!(data.join("manifest.json").exists() && data.join("queries.json").exists());

    let out = run(&[
        "ingest",
        "--manifest",
        p(&data.join("manifest.json")),
        "--out",
        p(&corpus),
        "--patch-size",
        "8",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 pairs"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(corpus.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["modality"]["MIF"], 8);

    run(&[
        "train", "--patches", p(&corpus), "--hidden", "16", "--latent", "6", "--epochs", "3", "--lr", "0.01", "--out",
        p(&model),
    ]);
    run(&["index", "--corpus", p(&corpus), "--model", p(&model), "--seed", "1", "--out", p(&index)]);
    let first = std::fs::read(&index).unwrap();
    run(&["index", "--corpus", p(&corpus), "--model", p(&model), "--seed", "1", "--out", p(&index)]);
    assert_eq!(first, std::fs::read(&index).unwrap(), "rebuild is byte-identical");

    let out = run(&[
        "query",
        "--index",
        p(&index),
        "--manifest",
        p(&data.join("queries.json")),
        "--slide",
        "he-00",
        "--top",
        "2",
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 2);

    let out = run(&["query", "--index", p(&index), "--manifest", p(&data.join("queries.json")), "--slide", "he-01", "--table"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("Query"));

    run(&["eval", "--index", p(&index), "--queries", p(&data.join("queries.json")), "--out", p(&hits)]);
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&hits).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);
    assert_eq!(table["dfs_threshold"], 50.0);
}

#[test]
fn missing_model_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pathsearch"))
        .args(["index", "--corpus", p(dir.path()), "--model", "nope.bin", "--out", "x.bin"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
}
