use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
[dataset]
format = "synthetic"

[dataset.synthetic]
count = 8
height = 80
width = 80

[train]
input_resolution = [80, 80]
patch_resolution = [16, 16]
batch_size = 4
epochs = 2
checkpoint_every = 2

[ablate]
epochs = [1, 2, 3]
patch_size = [0.2, 0.4]
seeds = [1, 2]
loss_weights = [{ det = 1.0, iou = 1.0, nms = 0.5 }, { det = 0.5 }]
"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn tripatch(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tripatch"))
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .args(args)
            .output()
            .unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .from_path(path)
        .unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let run = Run::new(TINY);
    let out = run.tripatch(&["train", "--config", "run.toml", "--out", "a"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["patch.tpch", "patch.png", "loss_history.json", "loss_curve.png"] {
        assert!(run.path("a").join(f).is_file(), "missing {f}");
    }
    // 8 scenes in batches of 4 for 2 epochs: checkpoints at steps 2 and 4.
    assert!(run.path("a/checkpoints/checkpoint-000004.tpch").is_file());
    assert!(run.path("a/checkpoints/checkpoint-000002.json").is_file());

    let hist = run.json("a/loss_history.json");
    assert_eq!(hist["command"], "train");
    assert_eq!(hist["result"]["steps"], 4);
    assert_eq!(hist["result"]["history"].as_array().unwrap().len(), 4);
    assert_eq!(hist["config"]["train"]["epochs"], 2);
    assert_eq!(hist["dataset_sha256"].as_str().unwrap().len(), 64);

    let png = std::fs::read(run.path("a/loss_curve.png")).unwrap();
    assert!(png.windows(15).any(|w| w == b"tripatch:config"));

    let again = run.tripatch(&["train", "--config", "run.toml", "--out", "b"]);
    assert_eq!(code(&again), 0);
    for f in ["loss_history.json", "patch.tpch"] {
        assert_eq!(
            std::fs::read(run.path("a").join(f)).unwrap(),
            std::fs::read(run.path("b").join(f)).unwrap(),
            "{f} differs between reruns"
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let run = Run::new(TINY);
    assert_eq!(code(&run.tripatch(&["train", "--config", "run.toml", "--out", "a", "--seed", "9"])), 0);
    assert_eq!(code(&run.tripatch(&["train", "--config", "run.toml", "--out", "b"])), 0);
    assert_eq!(run.json("a/loss_history.json")["config"]["train"]["seed"], 9);
    assert_ne!(
        std::fs::read(run.path("a/patch.tpch")).unwrap(),
        std::fs::read(run.path("b/patch.tpch")).unwrap()
    );
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let run = Run::new(&TINY.replace("epochs = 2", "epochs = -1"));
    let out = run.tripatch(&["train", "--config", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));

    let run = Run::new(&TINY.replace("epochs = 2", "epochs = 0"));
    let out = run.tripatch(&["train", "--config", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.epochs"), "{}", stderr(&out));

    let run = Run::new("[dataset]\nformat = \"coco-json\"\nannotations = \"nope.json\"\nimage_root = \".\"\n");
    let out = run.tripatch(&["train", "--config", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dataset.annotations"), "{}", stderr(&out));

    let run = Run::new("[dataset]\nformat = \"boxfile-dir\"\n");
    let out = run.tripatch(&["train", "--config", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dataset.image_dir"), "{}", stderr(&out));

    let run = Run::new(&TINY.replace("batch_size = 4", "batch_size = 4\nlamda_det = 2.0"));
    let out = run.tripatch(&["train", "--config", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lamda_det"), "{}", stderr(&out));

    let run = Run::new(TINY);
    assert_eq!(code(&run.tripatch(&["train", "--config", "missing.toml"])), 2);
}

#[test]
fn training_against_a_blackbox_is_a_config_error() {
    let run = Run::new(&format!("detector = \"blackbox:/bin/cat\"\n{TINY}"));
    let out = run.tripatch(&["train", "--config", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("detector"));
}

#[test]
fn eval_clean_baseline_is_100_and_patch_errors() {
    let run = Run::new(TINY);
    let out = run.tripatch(&["eval", "--config", "run.toml", "--out", "e", "--no-patch"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("ap_person: 100.00"));
    let report = run.json("e/eval_report.json");
    assert_eq!(report["result"]["report"]["ap_person"], 100.0);
    assert_eq!(report["result"]["report"]["asr"], 0.0);
    assert_eq!(report["result"]["patch"], Value::Null);

    std::fs::write(run.path("broken.tpch"), b"not a patch").unwrap();
    let out = run.tripatch(&["eval", "--config", "run.toml", "--patch", "broken.tpch"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad magic"));
    assert_eq!(code(&run.tripatch(&["eval", "--config", "run.toml", "--patch", "absent.tpch"])), 2);
    // Neither a patch nor --no-patch.
    assert_eq!(code(&run.tripatch(&["eval", "--config", "run.toml"])), 2);
}

#[test]
fn eval_adapter_failure_exits_3() {
    let run = Run::new(&format!("detector = \"blackbox:/nonexistent/adapter\"\n{TINY}"));
    let out = run.tripatch(&["eval", "--config", "run.toml", "--no-patch"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("/nonexistent/adapter"));
}

#[test]
fn transfer_1x1_matches_eval_and_dead_victims_fail() {
    let run = Run::new(TINY);
    assert_eq!(code(&run.tripatch(&["train", "--config", "run.toml", "--out", "t"])), 0);
    std::fs::create_dir(run.path("patches")).unwrap();
    std::fs::copy(run.path("t/patch.tpch"), run.path("patches/toy.tpch")).unwrap();

    let out = run.tripatch(&["eval", "--config", "run.toml", "--out", "e", "--patch", "patches/toy.tpch"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ap = run.json("e/eval_report.json")["result"]["report"]["ap_person"].as_f64().unwrap();

    let out = run.tripatch(&["transfer", "--config", "run.toml", "--out", "x", "--patch", "patches"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&run.path("x/transfer.csv"));
    assert_eq!(rows[0], vec!["trained_on", "target"]);
    assert_eq!(rows[1][0], "toy");
    assert!((rows[1][1].parse::<f64>().unwrap() - ap).abs() < 1e-6);
    assert_eq!(run.json("x/transfer.json")["result"]["cells"][0][0].as_f64().unwrap(), ap);
    assert!(run.path("x/transfer_heatmap.png").is_file());
    let text = std::fs::read_to_string(run.path("x/transfer.csv")).unwrap();
    assert!(text.starts_with("# tripatch transfer"));
    assert!(text.contains("# dataset_sha256: "));
    assert!(text.contains("# config: {"));

    // One live and one dead victim: partial matrix, still success.
    let mixed = format!(
        "{TINY}\n[transfer]\ninclude_clean = true\n\n[[transfer.victims]]\nname = \"toy\"\ndetector = \"toy\"\n\n\
         [[transfer.victims]]\nname = \"gone\"\ndetector = \"blackbox:/nonexistent/adapter\"\n"
    );
    std::fs::write(run.path("mixed.toml"), mixed).unwrap();
    let out = run.tripatch(&["transfer", "--config", "mixed.toml", "--out", "m", "--patch", "patches"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&run.path("m/transfer.csv"));
    assert_eq!(rows[0], vec!["trained_on", "toy", "gone"]);
    assert_eq!(rows[1][0], "clean");
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 100.0);
    assert_eq!(rows[1][2], "");
    assert_eq!(run.json("m/transfer.json")["result"]["failures"].as_array().unwrap().len(), 2);

    let dead = format!(
        "{TINY}\n[[transfer.victims]]\nname = \"gone\"\ndetector = \"blackbox:/nonexistent/adapter\"\n"
    );
    std::fs::write(run.path("dead.toml"), dead).unwrap();
    let out = run.tripatch(&["transfer", "--config", "dead.toml", "--out", "d", "--patch", "patches"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(run.path("d/transfer.csv").is_file());
}

#[test]
fn ablation_axes_and_reruns() {
    let run = Run::new(TINY);
    let out = run.tripatch(&["ablate", "--config", "run.toml", "--out", "a", "--axis", "loss-terms"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&run.path("a/ablate-loss-terms.csv"));
    assert_eq!(rows[0], vec!["axis", "setting", "ap_person", "asr", "final_loss", "error"]);
    let settings: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(
        settings,
        vec!["det+iou+nms", "det+iou", "det+nms", "iou+nms", "det", "iou", "nms"]
    );
    assert!(rows[1..].iter().all(|r| !r[2].is_empty()));
    assert!(run.path("a/ablate-loss-terms.png").is_file());

    let again = run.tripatch(&["ablate", "--config", "run.toml", "--out", "b", "--axis", "loss-terms"]);
    assert_eq!(code(&again), 0);
    for f in ["ablate-loss-terms.csv", "ablate-loss-terms.json"] {
        assert_eq!(
            std::fs::read(run.path("a").join(f)).unwrap(),
            std::fs::read(run.path("b").join(f)).unwrap()
        );
    }

    for (axis, n) in [("patch-size", 2), ("loss-weights", 2), ("seeds", 2)] {
        let out = run.tripatch(&["ablate", "--config", "run.toml", "--out", "a", "--axis", axis]);
        assert_eq!(code(&out), 0, "{axis}: {}", stderr(&out));
        assert_eq!(csv_rows(&run.path(&format!("a/ablate-{axis}.csv"))).len(), n + 1, "{axis}");
    }
    assert!(run.json("a/ablate-seeds.json")["result"]["spread"].is_number());

    let out = run.tripatch(&["ablate", "--config", "run.toml", "--axis", "colour"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn epoch_sweep_matches_separate_runs() {
    let run = Run::new(TINY);
    let out = run.tripatch(&["ablate", "--config", "run.toml", "--out", "a", "--axis", "epochs"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&run.path("a/ablate-epochs.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2][1], "2");

    // The config's own run trains for 2 epochs.
    assert_eq!(code(&run.tripatch(&["train", "--config", "run.toml", "--out", "t"])), 0);
    let out = run.tripatch(&["eval", "--config", "run.toml", "--out", "e", "--patch", "t/patch.tpch"]);
    assert_eq!(code(&out), 0);
    let ap = run.json("e/eval_report.json")["result"]["report"]["ap_person"].as_f64().unwrap();
    let final_loss = run.json("t/loss_history.json")["result"]["final_loss"]["total"].as_f64().unwrap();
    assert!((rows[2][2].parse::<f64>().unwrap() - ap).abs() < 1e-6);
    assert!((rows[2][4].parse::<f64>().unwrap() - final_loss).abs() < 1e-6);
}
