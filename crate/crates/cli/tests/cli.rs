use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use snapshot_core::model::{load_checkpoint, Model};
use tempfile::TempDir;

fn snapshot(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snapshot"))
        .env("SNAPSHOT_DATA_DIR", data_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(data_dir: &Path, args: &[&str]) -> String {
    let out = snapshot(data_dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(data_dir: &Path, args: &[&str], code: i32) -> String {
    let out = snapshot(data_dir, args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

/// Data directory holding scenarios, a benchmark and a two-epoch run, all
/// produced on default paths.
fn pipeline() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-pipeline");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        ok(&dir, &["gen-synthetic", "--num", "30"]);
        ok(&dir, &["build-benchmark"]);
        ok(&dir, &["train", "--epochs", "2"]);
        dir
    })
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn chain_on_defaults_produces_a_report() {
    let dir = pipeline();
    for f in [
        "scenarios.jsonl",
        "scenarios.config.toml",
        "benchmark/manifest.json",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let run = dir.join("run");
    for f in [
        "init.ckpt",
        "last.ckpt",
        "best.ckpt",
        "metrics.csv",
        "config.toml",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(lines(&run.join("metrics.csv")).len(), 1 + 4);

    let stdout = ok(dir, &["eval"]);
    assert!(stdout.contains("ADE"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval-test/report.json")).unwrap())
            .unwrap();
    assert!(report["ade"].as_f64().unwrap() > 0.0);
    assert!(report["fde"].as_f64().unwrap() > 0.0);
    assert_eq!(report["observed_steps"], 10);
}

#[test]
fn sweep_writes_nine_rows_and_a_chart() {
    let dir = pipeline();
    let out = dir.join("sweep");
    ok(
        dir,
        &[
            "eval",
            "--sweep",
            "--split",
            "val",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let rows = lines(&out.join("sweep.csv"));
    assert_eq!(rows[0], "observed_steps,ade,fde");
    assert_eq!(rows.len(), 1 + 9);
    assert!(rows[1].starts_with("2,") && rows[9].starts_with("10,"));
    let svg = fs::read_to_string(out.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("<polyline").count(), 2);
}

fn params(path: &Path) -> Model<f32> {
    load_checkpoint(path).unwrap()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let dir = pipeline();
    let out = dir.join("frozen");
    let o = out.to_str().unwrap();
    ok(
        dir,
        &[
            "train", "--lr", "0", "--wd", "0", "--epochs", "1", "--out", o,
        ],
    );
    let init = params(&out.join("init.ckpt"));
    let last = params(&out.join("last.ckpt"));
    assert_eq!(init.params(), last.params());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    for p in [&a, &b] {
        ok(
            tmp.path(),
            &[
                "gen-synthetic",
                "--num",
                "3",
                "--seed",
                "4",
                "--out",
                p.to_str().unwrap(),
            ],
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let dir = pipeline();
    let runs: Vec<PathBuf> = ["again-1", "again-2"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let args = [
                "train",
                "--stage",
                "1",
                "--epochs",
                "1",
                "--batch",
                "64",
                "--no-timing",
            ];
            let mut args: Vec<&str> = args.to_vec();
            args.extend(["--out", out.to_str().unwrap()]);
            ok(dir, &args);
            out
        })
        .collect();
    for f in [
        "metrics.csv",
        "init.ckpt",
        "last.ckpt",
        "best.ckpt",
        "config.toml",
    ] {
        assert_eq!(
            fs::read(runs[0].join(f)).unwrap(),
            fs::read(runs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = pipeline();
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "[train]\nbatch_size = 8\nlr = 0.002\nmax_epochs = 1\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    ok(
        dir,
        &[
            "train",
            "--stage",
            "1",
            "--batch",
            "32",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let resolved: toml::Value = fs::read_to_string(out.join("config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(resolved["train"]["batch_size"].as_integer(), Some(32));
    assert_eq!(resolved["train"]["lr"].as_float(), Some(0.002));
    assert_eq!(resolved["train"]["max_epochs"].as_integer(), Some(1));
    assert_eq!(lines(&out.join("metrics.csv")).len(), 2);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = pipeline();
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().join("x");
    let o = o.to_str().unwrap();

    let e = fails(dir, &["train", "--stage", "2", "--out", o], 1);
    assert!(e.contains("--init"), "{e}");
    let e = fails(dir, &["train", "--batch", "0", "--out", o], 1);
    assert!(e.contains("--batch"), "{e}");
    fails(dir, &["train", "--stage", "3"], 1);
    fails(dir, &["eval", "--bogus"], 1);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let e = fails(
        dir,
        &["--config", bad.to_str().unwrap(), "train", "--out", o],
        1,
    );
    assert!(e.contains("--config"), "{e}");

    let e = fails(dir, &["eval", "--model", "/nonexistent/best.ckpt"], 2);
    assert!(e.contains("--model"), "{e}");
    let garbage = tmp.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    fails(dir, &["eval", "--model", garbage.to_str().unwrap()], 2);

    let e = fails(
        dir,
        &[
            "train", "--stage", "1", "--epochs", "1", "--lr", "1e30", "--out", o,
        ],
        3,
    );
    assert!(e.contains("batch"), "{e}");
}

#[test]
fn help_states_defaults() {
    let t = ok(Path::new("."), &["train", "--help"]);
    for d in [
        "[default: 256]",
        "[default: 0.0001]",
        "[default: 0.0005]",
        "[default: both]",
    ] {
        assert!(t.contains(d), "{d}");
    }
    let b = ok(Path::new("."), &["build-benchmark", "--help"]);
    assert!(
        b.contains("[default: 70]") && b.contains("[default: 5]"),
        "{b}"
    );
    assert!(ok(Path::new("."), &["--help"]).contains("SNAPSHOT_DATA_DIR"));
}

#[test]
fn predict_writes_world_and_local_paths() {
    let dir = pipeline();
    let scenarios = dir.join("scenarios.jsonl");
    let first: serde_json::Value = serde_json::from_str(lines(&scenarios)[0].as_str()).unwrap();
    let focal = first["tracks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["id"].as_str().unwrap())
        .find(|id| id.starts_with("ped-cv"))
        .expect("a constant-velocity pedestrian")
        .to_owned();
    let out = dir.join("pred.json");
    ok(
        dir,
        &[
            "predict",
            "--scenario",
            scenarios.to_str().unwrap(),
            "--focal",
            &focal,
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let p: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(p["focal"], focal.as_str());
    assert_eq!(p["first_timestep"], 10);
    assert_eq!(p["coarse"].as_array().unwrap().len(), 30);
    assert_eq!(p["local"].as_array().unwrap().len(), 60);
    assert_eq!(p["world"].as_array().unwrap().len(), 60);
    assert!(dir.join("pred.config.toml").is_file());

    let e = fails(
        dir,
        &[
            "predict",
            "--scenario",
            scenarios.to_str().unwrap(),
            "--focal",
            "nobody",
        ],
        1,
    );
    assert!(e.contains("--focal"), "{e}");
}

#[test]
fn bench_reports_every_batch_size() {
    let dir = pipeline();
    let csv = ok(
        dir,
        &[
            "bench",
            "--batch-sizes",
            "1,4",
            "--warmup",
            "0",
            "--reps",
            "2",
        ],
    );
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "batch_size,mean_ms,std_ms,per_agent_ms,per_agent_std_ms"
    );
    assert!(
        rows[1].starts_with("1,") && rows[2].starts_with("4,"),
        "{csv}"
    );
    fails(dir, &["bench", "--batch-sizes", "4,1"], 1);
}
