use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sivit::image::decode_pgm;
use tempfile::TempDir;

const TINY: &[&str] = &["--epochs", "2", "--embed-dim", "8", "--num-heads", "2", "--depth", "1", "--batch-size", "4"];

fn sivit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sivit")).args(args).env("SIVIT_LOG", "error").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sivit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&["generate", "--out", p(&d), "--pos", "6", "--neg", "6", "--val", "4", "--test", "4", "--image-size", "32", "--seed", "9"]);
    d
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn generate_is_reproducible_and_counts_match() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--out", p(d), "--pos", "2", "--neg", "2", "--seed", "7", "--image-size", "32"]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let ppm = names.iter().filter(|n| n.to_string_lossy().ends_with(".ppm")).count();
    assert_eq!(ppm, 4);

    let none = tmp.path().join("none");
    ok(&["generate", "--out", p(&none), "--pos", "0", "--neg", "3", "--image-size", "32"]);
    let index = read(&none.join("index.tsv"));
    assert_eq!(index.lines().count(), 3);
    assert!(index.lines().all(|l| l.split('\t').nth(1) == Some("0")));
}

#[test]
fn generate_writes_balanced_splits() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let rows = |s: &str| read(&d.join(s).join("index.tsv")).lines().count();
    assert_eq!((rows("train"), rows("val"), rows("test")), (4, 4, 4));
}

#[test]
fn train_writes_artifacts_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let out = tmp.path().join("si");
    train(&d, &out, &["--strategy", "si", "--head-weights", "1:1:1"]);
    for f in ["manifest.json", "model.ckpt", "metrics.csv", "steps.csv", "eval.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    let w = &m["config"]["head_weights"];
    assert_eq!((w["w_cls"].as_f64(), w["w_reg_usf"].as_f64(), w["w_reg_sf"].as_f64()), (Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!(m["config"]["epochs"], 2);
    assert_eq!(m["config"]["model"]["vit"]["image_size"], 32);
    assert_eq!(m["split_sizes"]["train"], 4);
    assert_eq!(read(&out.join("metrics.csv")).lines().count(), 3);
}

#[test]
fn naive_logs_zero_regression_losses() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let out = tmp.path().join("naive");
    train(&d, &out, &["--strategy", "naive"]);
    for file in ["metrics.csv", "steps.csv"] {
        let text = read(&out.join(file));
        for col in ["l_reg_usf", "l_reg_sf"] {
            assert!(csv_column(&text, col).iter().all(|v| v == "0"), "{file} {col}");
        }
    }
}

#[test]
fn repeated_training_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&d, &a, &["--seed", "3"]);
    train(&d, &b, &["--seed", "3"]);
    for f in ["metrics.csv", "steps.csv", "eval.csv", "model.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = tmp.path().join("c");
    train(&d, &c, &["--seed", "4"]);
    assert_ne!(read(&a.join("steps.csv")), read(&c.join("steps.csv")));
}

#[test]
fn replay_reproduces_a_run() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let a = tmp.path().join("a");
    train(&d, &a, &["--strategy", "cutmix"]);
    let b = tmp.path().join("b");
    ok(&["replay", "--manifest", p(&a.join("manifest.json")), "--out", p(&b)]);
    assert_eq!(read(&a.join("steps.csv")), read(&b.join("steps.csv")));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# shared settings\nstrategy = naive\nepochs = 1\nembed_dim = 8\nnum_heads = 2\nno_augment = true\n").unwrap();
    let out = tmp.path().join("r");
    ok(&["train", "--config", p(&cfg), "--data", p(&d), "--out", p(&out), "--strategy", "usf_only"]);
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["config"]["strategy"], "usf_only");
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["augment"]["rotate"], false);
    assert_eq!(m["config"]["batch_size"], 16);

    fs::write(&cfg, "epochz = 1\n").unwrap();
    let bad = sivit(&["train", "--config", p(&cfg), "--data", p(&d), "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let out = tmp.path().join("x");
    let code = |args: &[&str]| sivit(args).status.code();
    assert_eq!(code(&["train", "--data", p(&d), "--out", p(&out), "--strategy", "bogus"]), Some(2));
    assert_eq!(code(&["train", "--data", p(&d), "--out", p(&out), "--head-weights", "1:1"]), Some(2));
    assert_eq!(code(&["train", "--data", p(&d), "--out", p(&out), "--patch-size", "5"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["train", "--data", p(&tmp.path().join("missing")), "--out", p(&out)]), Some(4));

    let mut args = vec!["train", "--data", p(&d), "--out", p(&out), "--lr", "1e9"];
    args.extend_from_slice(TINY);
    let diverged = sivit(&args);
    assert_eq!(diverged.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("step "));
}

#[test]
fn evaluate_reports_the_trained_metrics() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let run = tmp.path().join("run");
    train(&d, &run, &[]);
    let csv = tmp.path().join("eval.csv");
    ok(&["evaluate", "--checkpoint", p(&run.join("model.ckpt")), "--data", p(&d), "--out", p(&csv)]);
    let test_row = read(&run.join("eval.csv")).lines().find(|l| l.starts_with("test,")).unwrap().to_string();
    assert_eq!(read(&csv).lines().nth(1).unwrap(), test_row);
}

#[test]
fn compare_tabulates_medians_in_strategy_order() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let out = tmp.path().join("cmp");
    let mut args = vec!["compare", "--data", p(&d), "--out", p(&out), "--strategies", "si,naive", "--seeds", "0,1,2"];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("strategy"));
    let table = read(&out.join("comparison.csv"));
    assert_eq!(csv_column(&table, "strategy"), ["si", "naive"]);
    let runs = read(&out.join("runs.csv"));
    for (row, strategy) in ["si", "naive"].iter().enumerate() {
        let mut acc: Vec<f64> = runs
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{strategy},")))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        acc.sort_by(f64::total_cmp);
        assert_eq!(acc.len(), 3);
        let median: f64 = csv_column(&table, "accuracy")[row].parse().unwrap();
        assert_eq!(median, acc[1]);
    }
}

#[test]
fn compare_single_run_equals_its_eval() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let out = tmp.path().join("cmp");
    let mut args = vec!["compare", "--data", p(&d), "--out", p(&out), "--strategies", "mixup", "--seeds", "5"];
    args.extend_from_slice(TINY);
    ok(&args);
    let eval = read(&out.join("mixup/seed-5/eval.csv"));
    let test = eval.lines().find(|l| l.starts_with("test,")).unwrap();
    let row = read(&out.join("comparison.csv")).lines().nth(1).unwrap().to_string();
    assert_eq!(row.split(',').skip(3).collect::<Vec<_>>(), test.split(',').skip(1).collect::<Vec<_>>());
}

#[test]
fn sweep_keeps_going_past_bad_sizes() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let out = tmp.path().join("sweep");
    let mut args = vec!["sweep-patch", "--data", p(&d), "--out", p(&out), "--sizes", "8,5,16"];
    args.extend_from_slice(TINY);
    ok(&args);
    let table = read(&out.join("sweep.csv"));
    assert_eq!(csv_column(&table, "patch_size"), ["8", "5", "16"]);
    let status = csv_column(&table, "status");
    assert_eq!(status[0], "ok");
    assert!(status[1].starts_with("\"error"));
    assert_eq!(status[2], "ok");

    let single = tmp.path().join("single");
    let mut args = vec!["sweep-patch", "--data", p(&d), "--out", p(&single), "--sizes", "8"];
    args.extend_from_slice(TINY);
    ok(&args);
    assert_eq!(read(&single.join("sweep.csv")).lines().count(), 2);
}

#[test]
fn gradcheck_reports_every_case() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("g.csv");
    let stdout = ok(&["gradcheck", "--seeds", "1", "--filter", "soft", "--out", p(&csv)]);
    assert!(stdout.contains("softmax_rows") && stdout.contains("0 failed"));
    assert!(read(&csv).lines().skip(1).all(|l| l.ends_with(",pass")));
    assert_eq!(sivit(&["gradcheck", "--filter", "no-such-op"]).status.code(), Some(2));
}

#[test]
fn visualize_writes_one_map_per_sample() {
    let tmp = TempDir::new().unwrap();
    let d = dataset(tmp.path());
    let run = tmp.path().join("run");
    train(&d, &run, &[]);
    let ckpt = run.join("model.ckpt");
    for shuffled in [false, true] {
        let out = tmp.path().join(format!("vis-{shuffled}"));
        let mut args = vec!["visualize", "--checkpoint", p(&ckpt), "--data", p(&d), "--out", p(&out), "--batch-size", "3"];
        if shuffled {
            args.push("--shuffled");
        }
        ok(&args);
        let maps: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|x| x.to_string_lossy().ends_with(".cam.pgm"))
            .collect();
        assert_eq!(maps.len(), 4);
        for m in maps {
            let (w, h, _, _) = decode_pgm(&fs::read(&m).unwrap(), &m).unwrap();
            assert_eq!((w, h), (32, 32));
        }
        assert_eq!(read(&out.join("attribution.csv")).lines().count(), 5);
    }
}
