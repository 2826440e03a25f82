use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cedar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cedar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(last).expect("error line is JSON")
}

const CONFIG: &str = r#"
seed = 1
[paths]
ontology = "fx/ontology.jsonl"
corpus = "fx/corpus.jsonl"
filter = "fx/filter.json"
output = "out"
[encoder]
dim = 8
base_dim = 32
[split]
ratios = [0.6, 0.2, 0.2]
[trigger.train]
epochs = 3
batch_size = 16
learning_rate = 0.05
warmup_steps = 2
max_len = 64
[ranker.train]
epochs = 1
batch_size = 16
learning_rate = 0.01
warmup_steps = 2
max_len = 64
[classifier.train]
epochs = 1
batch_size = 16
learning_rate = 0.05
warmup_steps = 2
max_len = 128
[self_label]
confidence_margin_threshold = 0.0
"#;

fn setup(dir: &Path) -> String {
    let fx = dir.join("fx");
    let out = cedar(&[
        "generate-fixture",
        "--out",
        fx.to_str().unwrap(),
        "--num-types",
        "6",
        "--sentences-per-type",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["mentions"], 60);
    let cfg = dir.join("cedar.toml");
    fs::write(&cfg, CONFIG).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn predict_before_training_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = cedar(&["predict", "--config", &cfg]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["error"], "dependency");
    assert_eq!(err["missing"], "train-ti");
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = cedar(&["build-data", "--config", &cfg, "--set", "trigger.threshold=7"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "config");
    let out = cedar(&["build-data", "--config", &cfg, "--set", "nonsense"]);
    assert_eq!(stderr_json(&out)["error"], "argument");
}

#[test]
fn show_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = cedar(&["show-config", "--config", &cfg, "--set", "ranker.top_k=7"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("top_k = 7"));
}

#[test]
fn full_run_then_inference_and_file_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = cedar(&["run-all", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let statuses: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(statuses.len(), 10);

    let input = dir.path().join("raw.txt");
    fs::write(
        &input,
        "the treaty payment was wired\n{\"sent_id\":\"x\",\"tokens\":[\"the\",\"bank\"]}\n",
    )
    .unwrap();
    let out = cedar(&["classify", "--config", &cfg, "--input", input.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["sent_id"], "line1");
    assert_eq!(lines[1]["sent_id"], "x");

    let jsonl = |out: &Output| -> Vec<serde_json::Value> {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout.clone())
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let raw = input.to_str().unwrap();
    let out = cedar(&[
        "predict-ti",
        "-c",
        &cfg,
        "--input",
        raw,
        "--threshold",
        "0.0",
        "--max-span-len",
        "1",
    ]);
    for line in jsonl(&out) {
        for span in line["spans"].as_array().unwrap() {
            assert_eq!(span["start"], span["end"]);
            assert!(span["prob"].as_f64().unwrap() >= 0.0);
        }
    }
    let out = cedar(&["rank", "-c", &cfg, "--input", raw, "--topk", "3"]);
    for line in jsonl(&out) {
        assert_eq!(line["topk"].as_array().unwrap().len(), 3);
        assert!(line["topk"][0]["type_id"].is_string());
    }

    let out = cedar(&["self-label", "-c", &cfg, "--threshold", "1", "--rounds", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/reports/self_label.json")).unwrap()).unwrap();
    assert_eq!(report["threshold"], 1.0);
    let out = cedar(&["train-cls-final", "-c", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cedar(&["predict", "-c", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cedar(&["error-analysis", "-c", &cfg, "--prioritize-hierarchy"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cedar(&["evaluate", "-c", &cfg, "--ks", "1,3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dev: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/reports/eval_dev.json")).unwrap()).unwrap();
    let ks: Vec<&String> = dev["all"]["hit_at"].as_object().unwrap().keys().collect();
    assert_eq!(ks, ["1", "3"]);

    let gold = dir.path().join("out/data/dev.jsonl");
    let pred = dir.path().join("out/predictions/dev.jsonl");
    let out = cedar(&[
        "evaluate",
        "--gold",
        gold.to_str().unwrap(),
        "--pred",
        pred.to_str().unwrap(),
        "--ks",
        "1,3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["ti"]["f1"].as_f64().unwrap() >= report["tc"]["f1"].as_f64().unwrap());
    assert!(report["hit_at"]["3"].is_number());

    // the lock keeps a second run out while one holds the directory
    fs::write(dir.path().join("out/.lock"), "").unwrap();
    let out = cedar(&["evaluate", "--config", &cfg]);
    assert_eq!(stderr_json(&out)["error"], "locked");
}
