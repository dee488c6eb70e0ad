use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_placerec");

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    /// Small world and model so every command finishes in seconds.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({
            "schemaVersion": 1,
            "world": {
                "numScenes": 48,
                "areaExtent": 600.0,
                "splitFractions": [32.0 / 48.0, 8.0 / 48.0, 8.0 / 48.0],
                "splitBlock": 8,
                "seed": 3
            },
            "train": {
                "model": { "dim": 16, "ffnHidden": 32 },
                "epochsInstance": 2,
                "epochsScene": 2,
                "batchInstance": 64,
                "batchScene": 16
            },
            "eval": { "alphas": [0.3, 0.7] },
            "paths": {
                "dataset": dir.path().join("data/scenes.jsonl"),
                "runDir": dir.path().join("run")
            }
        });
        std::fs::write(dir.path().join("cfg.json"), cfg.to_string()).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--config")
            .arg(self.path("cfg.json"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn generate_is_reproducible_and_reports_splits() {
    let sb = Sandbox::new();
    let printed: Value = serde_json::from_str(&sb.ok(&["generate"])).unwrap();
    assert_eq!(printed["splits"], serde_json::json!({"train": 32, "val": 8, "test": 8}));
    let first = std::fs::read(sb.path("data/scenes.jsonl")).unwrap();
    sb.ok(&["generate"]);
    assert_eq!(std::fs::read(sb.path("data/scenes.jsonl")).unwrap(), first);

    let meta = read_json(&sb.path("data/scenes.jsonl.meta.json"));
    assert_eq!(meta["config"]["world"]["seed"], 3);
    assert_eq!(meta["scenes"], 48);

    sb.ok(&["generate", "--seed", "4"]);
    assert_ne!(std::fs::read(sb.path("data/scenes.jsonl")).unwrap(), first);
    assert_eq!(
        read_json(&sb.path("data/scenes.jsonl.meta.json"))["config"]["world"]["seed"],
        4
    );
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let sb = Sandbox::new();
    let bad = sb.path("bad.json");
    std::fs::write(&bad, r#"{"train": {"lrBsae": 0.1}}"#).unwrap();
    let out = Command::new(BIN)
        .arg("--config")
        .arg(&bad)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lrBsae"));

    let out = sb.run(&["train", "--alpha", "1.5"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_exits_3() {
    let sb = Sandbox::new();
    let out = sb.run(&["train", "--stage", "instance"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline() {
    let sb = Sandbox::new();
    sb.ok(&["generate"]);
    let printed = sb.ok(&["train", "--stage", "both"]);
    for name in ["instanceIT.uloc", "instanceIP.uloc", "scene.uloc"] {
        assert!(printed.contains(name), "{printed}");
        assert!(sb.path("run").join(name).exists());
        assert!(sb.path("run").join(format!("{name}.json")).exists());
    }

    let log = std::fs::read_to_string(sb.path("run/train_log.jsonl")).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events[0]["event"], "config");
    assert_eq!(events[0]["config"]["train"]["epochsScene"], 2);
    let epochs = events.iter().filter(|e| e["event"] == "epoch").count();
    assert_eq!(epochs, 2 + 2 + 2);
    assert_eq!(read_json(&sb.path("run/run_config.json"))["train"]["model"]["dim"], 16);

    // Evaluating an instance checkpoint is an incompatibility.
    let it = sb.path("run/instanceIT.uloc");
    let out = sb.run(&["eval", "--checkpoint", it.to_str().unwrap()]);
    assert_eq!(code(&out), 5);

    sb.ok(&["eval", "--d", "20", "--out", sb.path("r20.json").to_str().unwrap()]);
    sb.ok(&["eval", "--d", "2", "--out", sb.path("r2.json").to_str().unwrap()]);
    let (r20, r2) = (read_json(&sb.path("r20.json")), read_json(&sb.path("r2.json")));
    assert_eq!(r20["config"]["eval"]["d"], 20.0);
    assert_eq!(r20["numScenes"], 8);
    assert_eq!(r20["taskMatrix"].as_array().unwrap().len(), 8);
    assert_eq!(r20["exactLocation"].as_array().unwrap().len(), 6);
    for (a, b) in r20["taskMatrix"]
        .as_array()
        .unwrap()
        .iter()
        .zip(r2["taskMatrix"].as_array().unwrap())
    {
        assert_eq!(a["task"], b["task"]);
        for k in ["1", "3", "5"] {
            assert!(b["recalls"][k].as_f64().unwrap() <= a["recalls"][k].as_f64().unwrap());
        }
        let r: Vec<f64> = ["1", "3", "5"]
            .iter()
            .map(|k| a["recalls"][k].as_f64().unwrap())
            .collect();
        assert!(r[0] <= r[1] && r[1] <= r[2]);
    }

    sb.ok(&["eval", "--sweep"]);
    let sweep = read_json(&sb.path("run/report_test.json"));
    assert_eq!(sweep["thresholdSweep"].as_array().unwrap().len(), 4 * 4);
    assert_eq!(sweep["hintSweep"].as_array().unwrap().len(), 3);

    // Same config and seed reproduce the report.
    sb.ok(&["eval", "--d", "20", "--out", sb.path("again.json").to_str().unwrap()]);
    assert_eq!(read_json(&sb.path("again.json"))["taskMatrix"], r20["taskMatrix"]);

    let out = sb.ok(&["embed-dump", "--split", "val"]);
    assert!(out.starts_with("24 rows"), "{out}");
    let csv = std::fs::read_to_string(sb.path("run/embeddings_val.csv")).unwrap();
    assert_eq!(csv.lines().count(), 25);
    assert!(csv.starts_with("sceneId,modality,x,y,v_0"));
    assert!(sb.path("run/embeddings_val.csv.config.json").exists());

    // Scene stage alone reuses the instance checkpoints on disk.
    sb.ok(&["train", "--stage", "scene"]);
    // Switching the UV encoders off makes the stored instance models unusable.
    assert_eq!(code(&sb.run(&["train", "--stage", "scene", "--no-uv"])), 2);
    sb.ok(&["train", "--stage", "scene", "--no-pretrain", "--pool", "max", "--no-uv"]);
    assert_eq!(
        read_json(&sb.path("run/scene.uloc.json"))["config"]["model"]["pooling"],
        "max"
    );
}

#[test]
fn gradcheck_passes() {
    let sb = Sandbox::new();
    let out = sb.ok(&["gradcheck"]);
    assert!(out.contains("scene loss"));
    let summary = read_json(&sb.path("run/gradcheck.json"));
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["graphs"].as_array().unwrap().len(), 7);
}

#[test]
fn ablate_emits_one_table() {
    let sb = Sandbox::new();
    sb.ok(&["generate"]);
    sb.ok(&["ablate", "--epochs-instance", "1", "--epochs-scene", "1"]);
    let table = read_json(&sb.path("run/ablate_alpha.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["alpha"], 0.3);
    assert_eq!(rows[1]["alpha"], 0.7);
    assert_eq!(table["config"]["train"]["epochsScene"], 1);
    assert_eq!(rows[0]["r1"].as_object().unwrap().len(), 8);
}
