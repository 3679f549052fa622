use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rerender-pi");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RERENDER_PI_THREADS", "1").env("RUST_LOG", "warn").output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 8] = ["--base-channels", "4", "--refine-channels", "4", "--spade-hidden", "4", "--batch-size", "2"];

fn gen_data(dir: &Path) -> PathBuf {
    let ds = dir.join("ds");
    ok(&[
        "gen-data", "--out", s(&ds), "--subjects", "1", "--heldout", "1", "--frames", "6", "--views", "2", "--height", "64",
        "--width", "32", "--seed", "3",
    ]);
    ds
}

fn train_coarse(ds: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train-coarse", "--data", s(ds), "--out", s(out), "--steps", "3"];
    if !extra.contains(&"--seed") {
        args.extend(["--seed", "3"]);
    }
    args.extend(TINY);
    args.extend(extra);
    ok(&args);
    out.join("coarse.ckpt")
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train-coarse", "--help"]).status.code(), Some(0));
    let bad = run(&["render-everything"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!bad.stderr.is_empty());
    assert_eq!(run(&["bench", "--iters", "many"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = dir.path().join("o");
    assert_eq!(run(&["train-coarse", "--data", s(&missing), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--data", s(&missing), "--out", s(&out)]).status.code(), Some(2));
    // Unknown settings are a usage error, not a runtime one.
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(run(&["grad-check", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ds = gen_data(root);
    assert!(ds.join("manifest.json").exists());
    assert!(ds.join("config.resolved.json").exists());

    let coarse = train_coarse(&ds, &root.join("c"), &[]);
    assert!(coarse.exists());
    let dout = root.join("d");
    let mut detail_args = vec!["train-detail", "--data", s(&ds), "--out", s(&dout), "--steps", "3", "--seed", "3"];
    detail_args.extend(["--init", s(&coarse)]);
    detail_args.extend(TINY);
    ok(&detail_args);
    let detail = root.join("d/detail.ckpt");
    assert!(detail.exists());

    let ft = root.join("f/tuned.ckpt");
    ok(&[
        "finetune", "--data", s(&ds), "--out", s(ft.parent().unwrap()), "--init", s(&detail), "--subject", "subj1", "--ckpt", s(&ft),
        "--epochs", "1", "--batch-size", "2", "--seed", "3",
    ]);
    assert!(ft.exists());

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ds.join("manifest.json")).unwrap()).unwrap();
    let first = manifest["subjects"][0]["sequence"][3]["input"].as_str().unwrap().to_string();
    let frame = ds.join(&first);
    let inf = root.join("inf");
    ok(&["infer", "--ckpt", s(&ft), "--frame", s(&frame), "--out", s(&inf)]);
    let pngs: Vec<_> = fs::read_dir(&inf).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "png")).collect();
    assert_eq!(pngs.len(), 4);
    for name in ["coarse", "detail", "enhanced", "mask"] {
        assert!(pngs.iter().any(|e| e.file_name().to_string_lossy().ends_with(&format!("_{name}.png"))), "{name}");
    }

    let seq = root.join("seq");
    let text = ok(&["infer", "--ckpt", s(&ft), "--data", s(&ds), "--sequence", "subj0", "--view", "1", "--out", s(&seq)]);
    assert_eq!(fs::read_dir(&seq).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count(), 6 * 4);
    assert!(text.contains("hits"), "{text}");

    let ev = root.join("ev");
    ok(&["eval", "--ckpt", s(&ft), "--data", s(&ds), "--out", s(&ev)]);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);

    let sw = root.join("sw");
    ok(&["sweep-alpha", "--ckpt", s(&ft), "--data", s(&ds), "--out", s(&sw), "--alphas", "0,0.5,1"]);
    assert_eq!(fs::read_to_string(sw.join("alpha_sweep.csv")).unwrap().lines().count(), 4);
    assert!(sw.join("alpha_sweep.png").exists());

    let ab = root.join("ab");
    ok(&["ablate", "--data", s(&ds), "--out", s(&ab), "--full", s(&ft), "--no-finetune", "true"]);
    assert!(ab.join("ablation.csv").exists() && ab.join("ablation_grid.png").exists());

    let b = root.join("bench");
    let text = ok(&["bench", "--ckpt", s(&ft), "--data", s(&ds), "--out", s(&b), "--warmup", "1", "--iters", "2", "--precision", "f16"]);
    assert!(text.contains("reference encoding") && text.contains("total"), "{text}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 2);
    assert_eq!(report["stages"].as_array().unwrap().len(), 4);
}

#[test]
fn seeded_runs_are_byte_identical_and_configs_replay() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ds = gen_data(root);
    let again = root.join("again");
    fs::create_dir_all(&again).unwrap();
    let ds2 = gen_data(&again);
    assert_eq!(fs::read(ds.join("manifest.json")).unwrap(), fs::read(ds2.join("manifest.json")).unwrap());

    let a = train_coarse(&ds, &root.join("a"), &["--lr", "1e-3"]);
    let b = train_coarse(&ds, &root.join("b"), &["--lr", "1e-3"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(a.with_extension("ckpt.metrics.csv")).unwrap(), fs::read(b.with_extension("ckpt.metrics.csv")).unwrap());

    // Replay the resolved settings into a new output directory.
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("a/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["lr"], 1e-3);
    let mut replay = resolved.clone();
    replay["out"] = serde_json::Value::String(s(&root.join("r")).to_string());
    let cfg = root.join("replay.json");
    fs::write(&cfg, serde_json::to_string(&replay).unwrap()).unwrap();
    ok(&["train-coarse", "--config", s(&cfg)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(root.join("r/coarse.ckpt")).unwrap());

    let c = train_coarse(&ds, &root.join("c"), &["--lr", "1e-3", "--seed", "4"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seeds": 1, "lr": 0.5, "warmup": 7}"#).unwrap();
    let out = dir.path().join("o");
    // Resolution happens before the command runs; grad-check with seeds = 0 is instant.
    ok(&["grad-check", "--config", s(&cfg), "--out", s(&out), "--seeds", "0"]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(r["seeds"], 0);
    assert_eq!(r["lr"], 0.5);
    assert_eq!(r["warmup"], 7);
    assert_eq!(r["alpha"], serde_json::Value::Null);
}

#[test]
fn grad_check_passes_for_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["grad-check", "--seeds", "1", "--out", s(dir.path())]);
    assert!(text.contains("gradient checks passed"), "{text}");
}
