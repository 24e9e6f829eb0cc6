use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn newscap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_newscap"))
        .args(args)
        .env("NEWSCAP_THREADS", "1")
        .output()
        .expect("spawn newscap")
}

fn ok(args: &[&str]) -> String {
    let out = newscap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"model":{"hidden":8,"heads":2,"enc_layers":1,"dec_layers":1,"ffn_mult":1,"max_positions":128},
"batch_size":4,"max_epochs":2,"decode":{"max_len":8}}"#;

/// synth -> preprocess -> train -> evaluate/caption on a tiny corpus.
fn pipeline(root: &Path) {
    ok(&["synth", "--out", s(&root.join("syn")), "--n-train", "8", "--n-heldout", "2"]);
    ok(&["preprocess", "--out", s(&root.join("pre")), "--input", s(&root.join("syn/train.jsonl"))]);
    fs::write(root.join("c.json"), TINY).unwrap();
    ok(&[
        "train",
        "--config",
        s(&root.join("c.json")),
        "--out",
        s(&root.join("tr")),
        "--train",
        s(&root.join("pre/processed.jsonl")),
        "--vocab",
        s(&root.join("pre/vocab.json")),
        "--features",
        s(&root.join("syn")),
    ]);
}

#[test]
fn full_pipeline_writes_manifests_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);
    for sub in ["syn", "pre", "tr"] {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(root.join(sub).join("manifest.json")).unwrap()).unwrap();
        assert!(!m["outputs"].as_object().unwrap().is_empty(), "{sub}");
    }
    assert!(root.join("tr/best.ckpt").exists());
    assert_eq!(fs::read_to_string(root.join("tr/train_log.jsonl")).unwrap().lines().count(), 2);

    let table = ok(&[
        "evaluate",
        "--out",
        s(&root.join("ev")),
        "--checkpoint",
        s(&root.join("tr/best.ckpt")),
        "--vocab",
        s(&root.join("pre/vocab.json")),
        "--input",
        s(&root.join("pre/processed.jsonl")),
        "--features",
        s(&root.join("syn")),
        "--beam",
        "2",
    ]);
    assert!(table.contains("CIDEr") && table.contains("post-TC"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 8);

    let caps = ok(&[
        "caption",
        "--out",
        s(&root.join("ca")),
        "--checkpoint",
        s(&root.join("tr/best.ckpt")),
        "--vocab",
        s(&root.join("pre/vocab.json")),
        "--input",
        s(&root.join("pre/processed.jsonl")),
        "--features",
        s(&root.join("syn")),
        "--id",
        "synth-0003",
    ]);
    assert!(caps.contains("pre-TC") && caps.contains("post-TC"));
}

#[test]
fn repeated_runs_have_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["tr/last.ckpt", "tr/best.ckpt", "tr/train_log.jsonl", "pre/vocab.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let outputs = |d: &Path| {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join("tr/manifest.json")).unwrap()).unwrap();
        m["outputs"].clone()
    };
    assert_eq!(outputs(a.path()), outputs(b.path()));
}

#[test]
fn bad_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = newscap(&["stats", "--out", s(&root.join("x")), "--input", s(&root.join("missing.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(root.join("bad.jsonl"), "{not json\n").unwrap();
    let out = newscap(&["preprocess", "--out", s(&root.join("p")), "--input", s(&root.join("bad.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));

    pipeline(root);
    ok(&[
        "preprocess",
        "--out",
        s(&root.join("pre1")),
        "--input",
        s(&root.join("syn/train.jsonl")),
        "--min-freq",
        "1",
    ]);
    let out = newscap(&[
        "evaluate",
        "--out",
        s(&root.join("ev")),
        "--checkpoint",
        s(&root.join("tr/best.ckpt")),
        "--vocab",
        s(&root.join("pre1/vocab.json")),
        "--input",
        s(&root.join("pre1/processed.jsonl")),
        "--features",
        s(&root.join("syn")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));

    let mut bytes = fs::read(root.join("tr/best.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(root.join("tr/broken.ckpt"), bytes).unwrap();
    let out = newscap(&[
        "caption",
        "--out",
        s(&root.join("ca")),
        "--checkpoint",
        s(&root.join("tr/broken.ckpt")),
        "--vocab",
        s(&root.join("pre/vocab.json")),
        "--input",
        s(&root.join("pre/processed.jsonl")),
        "--features",
        s(&root.join("syn")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_reports_groups() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--out", s(dir.path()), "--fp64", "--samples", "2"]);
    assert!(stdout.contains("max relative error"));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn preprocess_reports_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["synth", "--out", s(&root.join("syn")), "--n-train", "6"]);
    let text = fs::read_to_string(root.join("syn/train.jsonl")).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    lines[0]["image"]["width"] = 10.into();
    lines[1]["caption"] = "too short".into();
    let body: String = lines.iter().map(|v| v.to_string() + "\n").collect();
    fs::write(root.join("syn/edited.jsonl"), body).unwrap();
    let stdout = ok(&["preprocess", "--out", s(&root.join("pre")), "--input", s(&root.join("syn/edited.jsonl")), "--min-freq", "1"]);
    assert!(stdout.contains("kept 4 of 6"), "{stdout}");
    let rej: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("pre/rejections.json")).unwrap()).unwrap();
    assert_eq!(rej["image_too_small"], 1);
    assert_eq!(rej["caption_too_short"], 1);
}
