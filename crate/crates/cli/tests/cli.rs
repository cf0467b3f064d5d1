use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
}

fn corpusalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corpusalign")).args(args).output().unwrap()
}

fn config() -> String {
    golden().join("config.json").display().to_string()
}

fn reports(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn all_then_rerun_then_verify() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path().to_str().unwrap();
    let out = corpusalign(&["-c", &config(), "--workdir", w, "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = reports(&out);
    assert_eq!(first.len(), 9);
    assert!(first.iter().all(|r| r["status"] == "ran"));

    let again = reports(&corpusalign(&["-c", &config(), "--workdir", w, "all"]));
    assert!(again.iter().all(|r| r["status"] == "up_to_date"));

    let dry = reports(&corpusalign(&["-c", &config(), "--workdir", w, "--dry-run", "all"]));
    assert!(dry.iter().all(|r| r["status"] == "would_skip"));

    let verify = corpusalign(&["verify-bundle", work.path().join("bundle").to_str().unwrap()]);
    assert!(verify.status.success(), "{}", String::from_utf8_lossy(&verify.stderr));
    assert!(String::from_utf8_lossy(&verify.stdout).contains("ok"));
}

#[test]
fn exit_codes() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path().to_str().unwrap();
    let missing_stage = corpusalign(&["-c", &config(), "--workdir", w, "analyze"]);
    assert_eq!(missing_stage.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing_stage.stderr).contains("filter required"));

    let bad = work.path().join("bad.json");
    std::fs::write(&bad, r#"{"datasets": []}"#).unwrap();
    let bad_config = corpusalign(&["-c", bad.to_str().unwrap(), "--workdir", w, "ingest"]);
    assert_eq!(bad_config.status.code(), Some(2));

    let no_bundle = corpusalign(&["verify-bundle", w]);
    assert_eq!(no_bundle.status.code(), Some(1));
}

#[test]
fn standalone_agree_is_seeded() {
    let work = tempfile::tempdir().unwrap();
    let a = golden().join("annotator_a.jsonl");
    let b = golden().join("annotator_b.jsonl");
    let run = |out: &Path| {
        let o = corpusalign(&[
            "--seed",
            "3",
            "agree",
            "--a",
            a.to_str().unwrap(),
            "--b",
            b.to_str().unwrap(),
            "--rounds",
            "300",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let first = run(&work.path().join("one.json"));
    assert_eq!(first, run(&work.path().join("two.json")));
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let j = report["overall"]["jaccard"]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&j));
    assert_eq!(report["seed"], 3);

    let missing = corpusalign(&["agree", "--a", "/nonexistent/a.jsonl", "--b", b.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}
