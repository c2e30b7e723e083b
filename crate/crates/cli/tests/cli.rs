mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use support::{adadepth, ok, path, stderr};

/// A small run: 32x48 images, a narrow network and a few iterations.
const TINY: &str = r#"{
  "version": 1,
  "seed": 7,
  "scene": { "image_size": [32, 48] },
  "dataset": { "n_train": 24, "n_eval": 6, "n_labeled": 4 },
  "arch": {
    "image_height": 32, "image_width": 48, "stem_channels": 4,
    "stage_channels": [6, 8, 10, 12], "decoder_channels": [8, 6, 4]
  },
  "pretrain": { "epochs": 1, "batch_size": 4 },
  "adapt": { "k_outer": 3, "batch_size": 4, "ct_pretrain": { "steps": 4, "batch_size": 4 } },
  "semi": { "k_outer": 2, "labeled_frac": 0.1 },
  "sweep": { "depths": [1, 2] },
  "viz": { "count": 2 }
}"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// gen, pretrain and adapt, shared by the tests that only read from them.
fn pipeline() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let c = path(&config);
        let (data, pre, adapt) = (root.join("data"), root.join("pre"), root.join("adapt"));
        ok(adadepth(&["gen", "--config", c, "--out", path(&data)]));
        ok(adadepth(&["pretrain", "--config", c, "--data", path(&data), "--out", path(&pre)]));
        ok(adadepth(&[
            "adapt",
            "--config",
            c,
            "--data",
            path(&data),
            "--network",
            path(&pre.join("network")),
            "--out",
            path(&adapt),
        ]));
        Run { _dir: dir, root, config }
    })
}

fn eval(run: &Run, out: &Path) -> String {
    ok(adadepth(&[
        "eval",
        "--config",
        path(&run.config),
        "--data",
        path(&run.dir("data")),
        "--checkpoint",
        path(&run.dir("adapt").join("checkpoint")),
        "--out",
        path(out),
    ]))
}

fn listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_writes_every_artifact() {
    let run = pipeline();
    for split in ["source_train", "target_train", "target_eval", "target_labeled"] {
        assert!(run.dir("data").join(split).join("manifest.json").exists(), "{split}");
    }
    assert!(run.dir("pre").join("network").join("meta.json").exists());
    assert!(run.dir("pre").join("pretrain_report.json").exists());
    let adapt = run.dir("adapt");
    for f in ["config.json", "train_log.ndjson", "summary.json", "checkpoint/meta.json"] {
        assert!(adapt.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(adapt.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(adapt.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 7);
    assert_eq!(echo["adapt"]["seed"], 7);
}

#[test]
fn eval_twice_gives_identical_metrics() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let table = eval(run, &a);
    assert!(table.contains("rel"));
    eval(run, &b);
    let ma = fs::read(a.join("metrics.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.json")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(m["images"], 6);
    assert_eq!(m["per_image"].as_array().unwrap().len(), 6);
    for name in ["pred_0000.png", "gt_0000.png", "pred_0001.png"] {
        let x = fs::read(a.join("viz").join(name)).unwrap();
        assert_eq!(x, fs::read(b.join("viz").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn semi_supervised_adapt_uses_the_labeled_fraction() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("semi");
    ok(adadepth(&[
        "adapt",
        "--config",
        path(&run.config),
        "--data",
        path(&run.dir("data")),
        "--network",
        path(&run.dir("pre").join("network")),
        "--labeled-frac",
        "0.1",
        "--out",
        path(&out),
    ]));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["semi"], true);
    assert_eq!(s["labeled_images"], 2);
    assert_eq!(s["iterations"], 5);
}

#[test]
fn sweep_writes_one_row_per_depth() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let table = ok(adadepth(&[
        "sweep",
        "--config",
        path(&run.config),
        "--data",
        path(&run.dir("data")),
        "--network",
        path(&run.dir("pre").join("network")),
        "--out",
        path(&out),
    ]));
    assert_eq!(table.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn training_commands_never_touch_target_eval() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for split in ["source_train", "target_train"] {
        let to = data.join(split);
        fs::create_dir_all(&to).unwrap();
        for (p, bytes) in listing(&run.dir("data").join(split)) {
            fs::write(to.join(p.file_name().unwrap()), bytes).unwrap();
        }
    }
    let c = path(&run.config);
    let pre = dir.path().join("pre");
    ok(adadepth(&["pretrain", "--config", c, "--data", path(&data), "--out", path(&pre)]));
    ok(adadepth(&[
        "adapt",
        "--config",
        c,
        "--data",
        path(&data),
        "--network",
        path(&pre.join("network")),
        "--out",
        path(&dir.path().join("adapt")),
    ]));
}

#[test]
fn negative_lambda_exits_2_without_touching_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"adapt": {"lambda": -1}}"#).unwrap();
    let out = dir.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let before = listing(&out);
    let res = adadepth(&["adapt", "--config", path(&config), "--force", "--out", path(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr(&res);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("adadepth: error[config]:"), "{err}");
    assert_eq!(listing(&out), before);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("typo.json");
    fs::write(&config, r#"{"adapt": {"lamda": 3}}"#).unwrap();
    let res = adadepth(&["gen", "--config", path(&config), "--out", path(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr(&res).lines().count(), 1);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let res = adadepth(&[
        "pretrain",
        "--data",
        path(&dir.path().join("nowhere")),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", stderr(&res));
    assert_eq!(stderr(&res).lines().count(), 1);
    assert!(stderr(&res).starts_with("adadepth: error[dataset]:"));
}

#[test]
fn non_empty_output_needs_force() {
    let run = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    eval(run, &out);
    let again = adadepth(&[
        "eval",
        "--config",
        path(&run.config),
        "--data",
        path(&run.dir("data")),
        "--checkpoint",
        path(&run.dir("adapt").join("checkpoint")),
        "--out",
        path(&out),
    ]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    ok(adadepth(&[
        "eval",
        "--config",
        path(&run.config),
        "--data",
        path(&run.dir("data")),
        "--checkpoint",
        path(&run.dir("adapt").join("checkpoint")),
        "--force",
        "--out",
        path(&out),
    ]));
}

#[test]
fn bad_flags_exit_2_with_one_line() {
    let res = adadepth(&["adapt", "--lambda", "3"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr(&res).lines().count(), 1, "{}", stderr(&res));
}
