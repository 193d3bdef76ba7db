use std::path::Path;
use std::process::{Command, Output};

fn birel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_birel"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"
out_dir = "run"
data.prepared = "prep"
encoder.hidden = 16
encoder.layers = 1
encoder.heads = 2
encoder.ffn = 32
encoder.max_len = 60
train.batch_size = 4
train.peak_lr = 1e-3
train.max_epochs = 2
"#;

fn read_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("toy.toml"), CONFIG).unwrap();
    ok(birel(d, &["synth", "--out", "train.json", "--sentences", "20", "--seed", "1"]));
    ok(birel(d, &["synth", "--out", "valid.json", "--sentences", "8", "--seed", "2"]));
    let stdout = ok(birel(
        d,
        &["prepare", "-c", "toy.toml", "--input", "train=train.json", "--input", "valid=valid.json"],
    ));
    assert!(stdout.contains("train: 20 sentences"), "{stdout}");
    for f in ["train.corpus.json", "train.stats.json", "valid.corpus.json", "valid.stats.json"] {
        assert!(d.join("prep").join(f).exists(), "{f}");
    }
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("prep/train.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["stats"]["sentences"], 20);
    assert!(stats["run_config"]["encoder"]["hidden"] == 16);

    ok(birel(d, &["train", "-c", "toy.toml", "--set", "train.seed=3"]));
    for f in ["model.safetensors", "train_log.jsonl", "run_config.toml", "summary.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = read_lines(&d.join("run/train_log.jsonl"));
    assert_eq!(log.len(), 3);
    assert_eq!(log[0]["run_config"]["train"]["seed"], 3);
    assert!(log[1]["loss"]["total"].is_number());
    assert!(log[2]["valid"]["f1"].is_number());

    ok(birel(
        d,
        &["predict", "--checkpoint", "run/model.safetensors", "--corpus", "prep/valid.corpus.json", "--out", "pred.jsonl"],
    ));
    let preds = read_lines(&d.join("pred.jsonl"));
    assert_eq!(preds.len(), 9);
    assert!(preds[0]["run_config"].is_object());
    assert_eq!(preds[1]["id"], 0);
    assert!(preds[1]["triples"].is_array());

    let table = ok(birel(
        d,
        &["eval", "--predictions", "pred.jsonl", "--corpus", "prep/valid.corpus.json", "--out", "report.json"],
    ));
    assert!(table.contains("F1"), "{table}");
    assert!(d.join("report.json").exists() && d.join("report.txt").exists());

    std::fs::write(d.join("plain.txt"), "Alice Moreau was born in Lyon .\nNothing here .\n").unwrap();
    ok(birel(d, &["predict", "--checkpoint", "run/model.safetensors", "--text", "plain.txt", "--out", "plain.jsonl"]));
    assert_eq!(read_lines(&d.join("plain.jsonl")).len(), 3);

    // Predictions scored against a different corpus name the offending ids.
    let out = birel(d, &["eval", "--predictions", "pred.jsonl", "--corpus", "prep/train.corpus.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0"));
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("toy.toml"), CONFIG).unwrap();
    let out = birel(d, &["train", "-c", "toy.toml", "--set", "direction.s2o=false", "--set", "direction.o2s=false"]);
    assert_eq!(out.status.code(), Some(2));
    let out = birel(d, &["train", "-c", "toy.toml", "--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = birel(d, &["prepare", "-c", "toy.toml", "--input", "train=missing.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn empty_input_prepares_to_zeroed_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("empty.json"), "").unwrap();
    ok(birel(d, &["prepare", "--input", "test=empty.json", "--out", "prep"]));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("prep/test.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["stats"]["sentences"], 0);
    assert_eq!(stats["stats"]["triples"], 0);
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("toy.toml"), CONFIG).unwrap();
    ok(birel(d, &["synth", "--out", "train.json", "--sentences", "12"]));
    ok(birel(d, &["prepare", "-c", "toy.toml", "--input", "train=train.json"]));
    let table = ok(birel(d, &["ablate", "-c", "toy.toml", "--set", "train.max_epochs=1", "--out", "abl"]));
    for row in ["full", "- contrastive", "- direction o2s", "- direction s2o", "- relation prediction"] {
        assert!(table.contains(row), "{table}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 5);
    assert_eq!(json["rows"][4]["run_config"]["relation_prediction"]["enabled"], false);
    assert!(d.join("abl/ablation.txt").exists());
}
