use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn copronn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copronn"))
        .args(args)
        .env("COPRONN_LOG", "off")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small bee corpus: 300 pool vectors, 6 samples per class, cheap baselines.
fn small_corpus(dir: &Path) -> PathBuf {
    let spec = serde_json::json!({
        "dim": 16,
        "concepts": [
            {"name": "fuzzy orange", "sigma": 0.25},
            {"name": "fuzzy yellow", "sigma": 0.25},
            {"name": "shiny brown", "sigma": 0.25}
        ],
        "classes": [
            {"name": "A. bicolor", "bits": [1, 0, 1]},
            {"name": "A. flavipes", "bits": [0, 0, 1]},
            {"name": "A. fulva", "bits": [1, 0, 0]},
            {"name": "B. lucorum", "bits": [0, 1, 0]},
            {"name": "B. pratorum", "bits": [1, 1, 0]}
        ],
        "prototypes_per_concept": 10,
        "pool_size": 300,
        "samples_per_class": 6,
        "sample_sigma": 0.25,
        "seed": 5,
        "baselines": {"alpha": 3, "beta": 80}
    });
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.join("corpus");
    let o = copronn(&["synth", "--spec", s(&spec_path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.json")
}

#[test]
fn synth_preset_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = copronn(&["synth", "--sigma", "0.2", "--seed", "9", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["manifest.json", "concept_00.emb", "random_pool.emb", "samples_04.emb", "head.emb"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn malformed_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, "{\"dim\": 16, \"concepts\": [").unwrap();
    let o = copronn(&["synth", "--spec", s(&spec), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = copronn(&["explain", "--manifest", s(&dir.path().join("none.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn explain_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let out = dir.path().join("explained");
    let o = copronn(&["explain", "--manifest", s(&manifest), "--out", s(&out), "--top-n", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out.join("explanations.json")).unwrap()).unwrap();
    let records = doc["records"].as_array().unwrap();
    assert_eq!(records.len(), 30);
    assert_eq!(records[0]["scores"].as_array().unwrap().len(), 4);
    assert_eq!(records[0]["relevant"].as_array().unwrap().len(), 2);
    assert!(records[0]["rendered"].as_str().unwrap().starts_with("This image is class "));

    let report = dir.path().join("report");
    let o = copronn(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--predictions",
        s(&out.join("explanations.json")),
        "--out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,method,mean_cs,std_cs,n"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "A. bicolor");
    assert_eq!(first[1], "CoProNN");
    assert_eq!(first[2].split('.').nth(1).unwrap().len(), 4);
    assert_eq!(first[4], "6");
    assert!(report.join("report.json").exists());
}

#[test]
fn oversized_k_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let o = copronn(&["explain", "--manifest", s(&manifest), "--out", s(dir.path()), "--k", "500"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("k"), "{}", stderr(&o));
}

#[test]
fn wrong_sample_width_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let wide = dir.path().join("wide.emb");
    copronn::store::write_embedding_file(&wide, 8, &[vec![0.5f32; 8]]).unwrap();
    let o = copronn(&["explain", "--manifest", s(&manifest), "--samples", s(&wide), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimension mismatch"), "{}", stderr(&o));
}

#[test]
fn compare_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("cmp{i}"))).collect();
    for out in &runs {
        let o = copronn(&["compare", "--manifest", s(&manifest), "--out", s(out), "--metric", "cosine"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["comparison.md", "report.json", "report.csv", "class_scores.csv", "ibd_class_scores.csv"] {
        assert_eq!(fs::read(runs[0].join(name)).unwrap(), fs::read(runs[1].join(name)).unwrap(), "{name}");
    }
}

#[test]
fn single_method_table() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let out = dir.path().join("cmp");
    let o = copronn(&["compare", "--manifest", s(&manifest), "--out", s(&out), "--methods", "copronn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(out.join("comparison.md")).unwrap();
    assert!(md.starts_with("| Class | CoProNN |\n"), "{md}");
    assert!(!out.join("ibd_class_scores.csv").exists());
}

#[test]
fn unknown_method_is_a_usage_error() {
    let o = copronn(&["compare", "--manifest", "m.json", "--out", "x", "--methods", "lime"]);
    assert_eq!(o.status.code(), Some(2));
}
