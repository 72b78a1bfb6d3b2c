//! End-to-end exercises of the `duodet` binary: exit codes, file contracts,
//! determinism of emitted artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_duodet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    let text = r#"
[world]
max_objects = 3

[geo]
grid_h = 8
grid_w = 8
class_confusion = 0.55
class_swap_prob = 0.3

[sem]
grid_h = 8
grid_w = 8
class_confusion = 0.05
jitter_sigma_cells = 0.45
occlusion_prob = 0.35
occlusion_fraction = 0.25

[model]
num_queries = 10
dim = 32
num_heads = 2
num_layers = 2
ffn_dim = 64

[data]
num_scenes = 30
split_fractions = [0.8, 0.1, 0.1]

[train]
stage1_epochs = 2
stage2_epochs = 1
batch_size = 6
warmup_steps = 4
"#;
    std::fs::write(&path, text).unwrap();
    path
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = run_cmd(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert_ok(&out);
    Fixture {
        _dir: dir,
        config,
        data,
        run,
    }
}

fn run_cmd(args: &[&str]) -> Output {
    run(args)
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train", "eval", "ablate", "robustness", "plot"] {
        assert!(stdout.contains(sub), "help should list {sub}");
    }
}

#[test]
fn gen_data_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    for d in [&d1, &d2] {
        let out = run(&[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--set",
            "data.num_scenes=100",
            "--set",
            "data.split_fractions=[0.8, 0.1, 0.1]",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert_ok(&out);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("100 scenes"), "{stdout}");
        assert!(stdout.contains("80/10/10"), "{stdout}");
    }
    // index lists exactly 100 scene records
    let index = std::fs::read_to_string(d1.join("index.jsonl")).unwrap();
    let scene_lines = index
        .lines()
        .filter(|l| l.contains("\"type\":\"scene\""))
        .count();
    assert_eq!(scene_lines, 100);
    // rerun with same seed: byte-identical files
    for f in ["index.jsonl", "blobs.bin"] {
        assert_eq!(
            std::fs::read(d1.join(f)).unwrap(),
            std::fs::read(d2.join(f)).unwrap(),
            "{f} not reproducible"
        );
    }
}

#[test]
fn train_stage_contracts() {
    let fx = fixture();
    // stage 1 produces exactly one checkpoint
    let out = run(&[
        "train",
        "--data",
        fx.data.to_str().unwrap(),
        "--stage",
        "1",
        "--out",
        fx.run.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert_ok(&out);
    assert!(fx.run.join("stage1.ckpt").exists());
    assert!(!fx.run.join("stage2.ckpt").exists());
    assert!(fx.run.join("train_stage1.jsonl").exists());

    // the log has one JSON record per step with the branch breakdown
    let log = std::fs::read_to_string(fx.run.join("train_stage1.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "l_lc", "l_l", "l_c", "l_total"] {
        assert!(first.get(key).is_some(), "log record missing {key}");
    }

    // stage both produces two checkpoints
    let both = fx.run.join("both");
    let out = run(&[
        "train",
        "--data",
        fx.data.to_str().unwrap(),
        "--stage",
        "both",
        "--out",
        both.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert_ok(&out);
    assert!(both.join("stage1.ckpt").exists());
    assert!(both.join("stage2.ckpt").exists());

    // missing dataset: nonzero exit with a message
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/dataset",
        "--stage",
        "1",
        "--out",
        fx.run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    // stage 2 without a checkpoint is an error
    let out = run(&[
        "train",
        "--data",
        fx.data.to_str().unwrap(),
        "--stage",
        "2",
        "--out",
        fx.run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--ckpt"), "{stderr}");
}

#[test]
fn eval_report_and_idempotence() {
    let fx = fixture();
    let out = run(&[
        "train",
        "--data",
        fx.data.to_str().unwrap(),
        "--stage",
        "both",
        "--out",
        fx.run.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert_ok(&out);
    let ckpt = fx.run.join("stage2.ckpt");
    let e1 = fx.run.join("eval1");
    let e2 = fx.run.join("eval2");
    for out_dir in [&e1, &e2] {
        let out = run(&[
            "eval",
            "--data",
            fx.data.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--scenario",
            "full",
            "--ensemble",
            "pme",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    let report_path = e1.join("report_full_pme.json");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert!(v["map"].as_f64().is_some());
    assert!(v["nds_lite"].as_f64().is_some());
    // identical runs are byte-identical after dropping the timestamp field
    let strip = |p: &Path| -> String {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("generated_at_unix");
        serde_json::to_string_pretty(&v).unwrap()
    };
    assert_eq!(
        strip(&report_path),
        strip(&e2.join("report_full_pme.json"))
    );
}

#[test]
fn eval_rejects_unknown_scenario_and_split() {
    let fx = fixture();
    let out = run(&[
        "train",
        "--data",
        fx.data.to_str().unwrap(),
        "--stage",
        "1",
        "--out",
        fx.run.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let ckpt = fx.run.join("stage1.ckpt");
    for bad in [
        vec!["--scenario", "bogus"],
        vec!["--split", "bogus"],
        vec!["--ensemble", "bogus"],
    ] {
        let mut args = vec![
            "eval",
            "--data",
            fx.data.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            fx.run.to_str().unwrap(),
        ];
        args.extend(bad);
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2));
    }
}

#[test]
fn robustness_and_plot_outputs() {
    let fx = fixture();
    let out = run(&[
        "train",
        "--data",
        fx.data.to_str().unwrap(),
        "--stage",
        "1",
        "--out",
        fx.run.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert_ok(&out);
    let ckpt = fx.run.join("stage1.ckpt");
    let rdir = fx.run.join("rob");
    let out = run(&[
        "robustness",
        "--data",
        fx.data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        rdir.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert_ok(&out);
    let table = std::fs::read_to_string(rdir.join("robustness.txt")).unwrap();
    assert!(table.contains("camera_only"));
    assert!(table.contains("lidar_only"));
    // drop% column equals (full - scenario) / full
    let sweep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rdir.join("robustness.json")).unwrap())
            .unwrap();
    let rows = sweep.as_array().unwrap();
    let full_map = rows[0]["map"].as_f64().unwrap();
    for row in rows {
        let map = row["map"].as_f64().unwrap();
        let drop = row["relative_drop"].as_f64().unwrap();
        let expected = if full_map > 0.0 {
            (full_map - map) / full_map
        } else {
            0.0
        };
        assert!((drop - expected).abs() <= 1e-12);
    }
    let svg = std::fs::read_to_string(rdir.join("robustness.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    // plot consumes the sweep json and the eval report json
    let pdir = fx.run.join("plots");
    let edir = fx.run.join("evalp");
    let out = run(&[
        "eval",
        "--data",
        fx.data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        edir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let out = run(&[
        "plot",
        "--reports",
        rdir.join("robustness.json").to_str().unwrap(),
        edir.join("report_full_none.json").to_str().unwrap(),
        "--out",
        pdir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let entries: Vec<_> = std::fs::read_dir(&pdir).unwrap().collect();
    assert_eq!(entries.len(), 2);
    for e in entries {
        let content = std::fs::read_to_string(e.unwrap().path()).unwrap();
        assert!(content.starts_with("<svg"));
        assert!(!content.is_empty());
    }

    let _ = &fx.config;
}
