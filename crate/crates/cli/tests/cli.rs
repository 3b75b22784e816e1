use std::path::Path;
use std::process::{Command, Output};

use hpl_core::events::{write_events, Event, EventStream};

const TINY: &str = r#"{
  "seed": 3,
  "data": {"width": 16, "height": 16, "num_classes": 3, "num_grids": 2,
           "events_per_grid": 100, "source_samples": 6, "target_samples": 8,
           "target_eval_samples": 2},
  "model": {"hidden_channels": 4},
  "train": {"warmup_iters": 4, "total_iters": 6, "eval_interval": 2,
            "lr": 0.005, "proportion": 0.25}
}"#;

fn hpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpl")).args(args).output().expect("spawn hpl")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let out = hpl(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, data)
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_last_row() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let out = hpl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "final.segc", "config.json", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,loss_s,loss_u,loss_l,loss_js_s,loss_js_i,total,target_acc,target_miou"
    );
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0] as usize).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    let last = rows.last().unwrap();

    let out = hpl(&["eval", "--checkpoint", s(&run.join("final.segc")), "--data", s(&data)]);
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((m["accuracy"].as_f64().unwrap() - last[7]).abs() <= 1e-9);
    assert!((m["miou"].as_f64().unwrap() - last[8]).abs() <= 1e-9);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let mut csvs = Vec::new();
    for r in ["a", "b"] {
        let run = dir.path().join(r);
        assert!(hpl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]).status.success());
        csvs.push(std::fs::read(run.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn gen_data_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let again = dir.path().join("again");
    assert!(hpl(&["gen-data", "--config", s(&cfg), "--out", s(&again)]).status.success());
    let other = dir.path().join("other");
    assert!(hpl(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&other)]).status.success());
    let read = |d: &Path| std::fs::read(d.join("target/tgt_0000.evt")).unwrap();
    assert_eq!(read(&data), read(&again));
    assert_ne!(read(&data), read(&other));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let bad = hpl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--override", "no_such_key=1"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = hpl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--override", "alpha=2"]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = hpl(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("nope")), "--out", s(&run)]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(hpl(&["train"]).status.code(), Some(2));
    assert_eq!(hpl(&["ablate", "--out", s(&run)]).status.code(), Some(2));
    assert_eq!(hpl(&["ablate", "--preset", "table9", "--out", s(&run)]).status.code(), Some(2));
}

#[test]
fn file_mode_without_sidecar_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    std::fs::remove_dir_all(data.join("recon")).unwrap();
    let run = dir.path().join("run");
    let out = hpl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--override", "recon.mode=file"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("recon"));
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    assert!(hpl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]).status.success());
    let other = dir.path().join("other");
    let out = hpl(&["gen-data", "--config", s(&cfg), "--override", "data.num_grids=3", "--out", s(&other)]);
    assert!(out.status.success());
    let out = hpl(&["eval", "--checkpoint", s(&run.join("final.segc")), "--data", s(&other)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let out = hpl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--override", "lr=1e300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn grad_check_passes_and_detects_a_flipped_sign() {
    let ok = hpl(&["grad-check"]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&ok.stdout).lines().count(), 6);
    let flipped = hpl(&["grad-check", "--inject-sign-flip", "loss_js_s"]);
    assert_eq!(flipped.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&flipped.stderr).contains("loss_js_s"));
}

#[test]
fn ablate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let rows = dir.path().join("rows.json");
    std::fs::write(&rows, r#"[{"label": "a", "overrides": ["use_spa=false"]}, {"label": "b", "overrides": []}]"#).unwrap();
    let out_dir = dir.path().join("ab");
    let out = hpl(&["ablate", "--config", s(&cfg), "--rows", s(&rows), "--seeds", "2", "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out_dir.join("report.json").exists());
}

#[test]
fn voxelize_reports_consumed_events() {
    let dir = tempfile::tempdir().unwrap();
    let events: Vec<Event> = (0..30u64)
        .map(|i| Event {
            x: (i % 5) as u16,
            y: (i % 3) as u16,
            t: i,
            p: 1,
        })
        .collect();
    let path = dir.path().join("s.evt");
    write_events(&EventStream::new(5, 3, events).unwrap(), &path).unwrap();
    let out_path = dir.path().join("v.tensor");
    let out = hpl(&[
        "voxelize", "--events", s(&path), "--events-per-grid", "10", "--num-grids", "2", "--out", s(&out_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("consumed 20 events, abs total 20"), "{text}");
    assert!(out_path.exists());
    let short = hpl(&[
        "voxelize", "--events", s(&path), "--events-per-grid", "10", "--num-grids", "4", "--out", s(&out_path),
    ]);
    assert_eq!(short.status.code(), Some(2));
    let none = hpl(&["voxelize", "--events", s(&path), "--out", s(&out_path)]);
    assert_eq!(none.status.code(), Some(2));
}
