use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dacount(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacount"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DACOUNT_RUN_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = dacount(args, cwd);
    assert_eq!(code(&o), 0, "{args:?} failed:\n{}", text(&o));
    text(&o)
}

/// A tiny 16x16 benchmark under `<dir>/bench`.
fn bench(dir: &Path) -> PathBuf {
    ok(
        &[
            "synth", "--out", "bench", "--image-size", "16", "--min", "1", "--max", "3", "--blob-radius", "1.5",
            "--source-count", "10", "--target-count", "8", "--test-count", "4", "--seed", "3",
        ],
        dir,
    );
    dir.join("bench")
}

const TINY: &[&str] = &[
    "--image-size", "16", "--depth", "1", "--base-width", "4", "--domain-head-width", "4", "--sigma", "1", "--quiet",
];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--source", "bench/source", "--target", "bench/target"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    dacount(&args, dir)
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn synth_writes_three_manifests_and_guards_output() {
    let dir = TempDir::new().unwrap();
    let b = bench(dir.path());
    for (name, n, labelled) in [("source", 10, true), ("target", 8, false), ("target_test", 4, true)] {
        assert_eq!(data_rows(&b.join(name).join("manifest.csv")).len(), n);
        assert_eq!(b.join(name).join("annotations.csv").exists(), labelled, "{name}");
    }
    let again = dacount(&["synth", "--out", "bench", "--image-size", "16"], dir.path());
    assert_eq!(code(&again), 1);
    assert!(text(&again).contains("--force"));
    ok(&["synth", "--out", "bench", "--image-size", "16", "--source-count", "2", "--force"], dir.path());
    assert_eq!(data_rows(&b.join("source/manifest.csv")).len(), 2);
}

#[test]
fn train_smoke_and_run_directory() {
    let dir = TempDir::new().unwrap();
    bench(dir.path());
    let o = train(dir.path(), &["--epochs", "2", "--seed", "1", "--run-dir", "run"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let run = dir.path().join("run");
    assert_eq!(fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 2);
    let snapshot = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("epochs = 2") && snapshot.contains("seed = 1"));
    for ckpt in ["epoch_1", "epoch_2", "best"] {
        assert!(run.join("checkpoints").join(ckpt).is_file());
    }
    // existing run directory is protected
    let o = train(dir.path(), &["--epochs", "1", "--run-dir", "run"]);
    assert_eq!(code(&o), 1);
    assert_eq!(fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn run_root_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    bench(dir.path());
    let mut args = vec!["train", "--source", "bench/source", "--no-adapt", "--epochs", "1"];
    args.extend_from_slice(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_dacount"))
        .args(&args)
        .current_dir(dir.path())
        .env("DACOUNT_RUN_ROOT", dir.path().join("elsewhere"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(dir.path().join("elsewhere/baseline-seed0/history.jsonl").is_file());
}

#[test]
fn config_precedence_is_flags_then_file_then_defaults() {
    let dir = TempDir::new().unwrap();
    bench(dir.path());
    fs::write(dir.path().join("cfg.toml"), "epochs = 3\nseed = 7\n").unwrap();
    ok(&["train", "--source", "bench/source", "--no-adapt", "--config", "cfg.toml", "--epochs", "1", "--run-dir", "a"]
        .iter()
        .chain(TINY)
        .copied()
        .collect::<Vec<_>>(), dir.path());
    let snap = fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(snap.contains("epochs = 1") && snap.contains("seed = 7") && snap.contains("batch_size = 8"));
    assert!(snap.contains("adaptation_enabled = false"));

    fs::write(dir.path().join("bad.toml"), "epoch = 3\n").unwrap();
    let o = train(dir.path(), &["--config", "bad.toml", "--run-dir", "b"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_usage_errors() {
    let dir = TempDir::new().unwrap();
    bench(dir.path());
    let mut args = vec!["train", "--source", "bench/source", "--run-dir", "r"];
    args.extend_from_slice(TINY);
    let o = dacount(&args, dir.path());
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("--target"));

    let o = train(dir.path(), &["--run-dir", "r", "--target", "nowhere"]);
    assert_eq!(code(&o), 1);

    let o = train(dir.path(), &["--source-per-batch", "9", "--run-dir", "r"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("source_per_batch"));

    assert_eq!(code(&dacount(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&dacount(&["--help"], dir.path())), 0);
}

#[test]
fn baseline_ignores_the_target_directory() {
    let dir = TempDir::new().unwrap();
    bench(dir.path());
    let base = |run: &str, target: Option<&str>| {
        let mut args = vec!["train", "--source", "bench/source", "--no-adapt", "--epochs", "2", "--run-dir", run];
        if let Some(t) = target {
            args.extend(["--target", t]);
        }
        args.extend_from_slice(TINY);
        ok(&args, dir.path());
        fs::read_to_string(dir.path().join(run).join("history.jsonl")).unwrap()
    };
    let with = base("with", Some("bench/target"));
    let without = base("without", None);
    let missing = base("missing", Some("does/not/exist"));
    assert_eq!(with, without);
    assert_eq!(with, missing);
}

#[test]
fn eval_predict_and_size_checks() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    bench(d);
    assert_eq!(code(&train(d, &["--epochs", "1", "--run-dir", "run"])), 0);

    let out = ok(&["eval", "--data", "bench/target_test", "--checkpoint", "run", "--ledger", "evals.csv"], d);
    for key in ["mae", "rmse", "r2", "dic", "abs_dic", "agreement_pct", "mse", "std (assumed)"] {
        assert!(out.contains(key), "{key} missing from\n{out}");
    }
    ok(&["eval", "--data", "bench/target_test", "--checkpoint", "run", "--best", "--ledger", "evals.csv"], d);
    assert_eq!(data_rows(&d.join("evals.csv")).len(), 2);

    let o = dacount(&["eval", "--data", "bench/target", "--checkpoint", "run"], d);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("annotations"));

    ok(&["predict", "--data", "bench/target_test", "--checkpoint", "run/checkpoints/epoch_1", "--out", "pred"], d);
    let rows = data_rows(&d.join("pred/counts.csv"));
    assert_eq!(rows.len(), 4);
    let first = rows[0].split(',').next().unwrap();
    assert!(d.join("pred/density").join(format!("{first}.npy")).is_file());
    assert!(d.join("pred/density").join(format!("{first}.png")).is_file());

    // the counts table written by predict scores identically to the checkpoint
    let from_table = ok(&["eval", "--data", "bench/target_test", "--predictions", "pred/counts.csv", "--ledger", "e2.csv"], d);
    let from_ckpt = ok(&["eval", "--data", "bench/target_test", "--checkpoint", "run", "--ledger", "e3.csv"], d);
    let mae = |s: &str| s.lines().find(|l| l.starts_with("mae =")).unwrap().to_string();
    assert_eq!(mae(&from_table), mae(&from_ckpt));

    ok(&["synth", "--out", "big", "--image-size", "32", "--source-count", "2", "--target-count", "1", "--test-count", "2"], d);
    let o = dacount(&["eval", "--data", "big/target_test", "--checkpoint", "run", "--ledger", "e4.csv"], d);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("trained at 16x16"), "{}", text(&o));
    ok(&["eval", "--data", "big/target_test", "--checkpoint", "run", "--resize", "--ledger", "e4.csv"], d);
    ok(&["eval", "--data", "big/target_test", "--checkpoint", "run", "--native-size", "--ledger", "e4.csv"], d);
}

#[test]
fn eval_oracle_predictions_agree_fully() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    bench(d);
    let ann = fs::read_to_string(d.join("bench/target_test/annotations.csv")).unwrap();
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    for line in ann.lines().skip(1) {
        *counts.entry(line.split(',').next().unwrap().to_string()).or_default() += 1;
    }
    let mut table = String::from("image_id,count\n");
    for (id, c) in &counts {
        table.push_str(&format!("{id},{c}\n"));
    }
    fs::write(d.join("oracle.csv"), table).unwrap();
    let out = ok(&["eval", "--data", "bench/target_test", "--predictions", "oracle.csv", "--ledger", "l.csv"], d);
    assert!(out.contains("agreement_pct = 100\n"), "{out}");
    assert!(out.contains("mae = 0\n"));
}

#[test]
fn render_density_preserves_mass() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(
        d.join("dots.csv"),
        "image_id,x,y\nleaf,20,20\nleaf,40,25\nleaf,30,44\nleaf,12,33\nleaf,50,50\n",
    )
    .unwrap();
    ok(
        &["render-density", "--annotations", "dots.csv", "--height", "64", "--width", "64", "--sigma", "3", "--out", "maps"],
        d,
    );
    let bytes = fs::read(d.join("maps/leaf.npy")).unwrap();
    let npy = npyz::NpyFile::new(&bytes[..]).unwrap();
    assert_eq!(npy.shape(), &[64, 64]);
    let sum: f64 = npy.into_vec::<f64>().unwrap().iter().sum();
    assert!((sum - 5.0).abs() <= 0.05, "{sum}");
    assert!(d.join("maps/leaf.png").is_file());
    assert_eq!(data_rows(&d.join("maps/counts.csv")).len(), 1);

    let o = dacount(&["render-density", "--annotations", "dots.csv", "--out", "m2"], d);
    assert_eq!(code(&o), 1);
}

#[test]
fn composite_and_patches() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", "b", "--image-size", "16", "--source-count", "20", "--target-count", "1", "--test-count", "1"], d);
    ok(&["composite", "--data", "b/source", "--count", "10", "--seed", "4", "--out", "comp"], d);
    assert_eq!(data_rows(&d.join("comp/manifest.csv")).len(), 10);
    let img = image::open(d.join("comp/images/composite_0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    let total_dots = data_rows(&d.join("comp/annotations.csv")).len();
    assert!(total_dots >= 10 * 4 * 3, "{total_dots}");

    ok(&["composite", "--data", "b/source", "--count", "10", "--seed", "4", "--out", "comp2"], d);
    assert_eq!(
        fs::read_to_string(d.join("comp/annotations.csv")).unwrap(),
        fs::read_to_string(d.join("comp2/annotations.csv")).unwrap()
    );

    ok(&["patches", "--data", "b/source", "--patch", "8", "--count", "30", "--out", "p"], d);
    assert_eq!(data_rows(&d.join("p/manifest.csv")).len(), 30);
    let o = dacount(&["patches", "--data", "b/source", "--patch", "17", "--count", "3", "--out", "p2"], d);
    assert_eq!(code(&o), 2);
}
