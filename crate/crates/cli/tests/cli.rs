use std::path::Path;
use std::process::{Command, Output};

fn mshvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mshvit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = mshvit(args);
    assert!(o.status.success(), "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_and_runtime_exit_codes() {
    assert_eq!(mshvit(&[]).status.code(), Some(2));
    assert_eq!(mshvit(&["synth", "--classes", "1,2"]).status.code(), Some(2));
    assert_eq!(mshvit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mshvit(&["--help"]).status.code(), Some(0));
    // synth without --out is a usage error
    assert_eq!(mshvit(&["synth"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = mshvit(&["--out", p(dir.path()), "tile", "--manifest", p(&dir.path().join("nope.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = mshvit(&["--out", p(dir.path()), "--set", "stage1.epochz=3", "synth"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_counts_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let stdout = ok(&["--out", out, "synth", "--classes", "2,2,2,2,2", "--extent", "512"]);
    assert!(stdout.starts_with("10 slides"), "{stdout}");
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run_synth.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth");
    assert_eq!(run["artifacts"].as_array().unwrap().len(), 21);
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);

    let before = std::fs::read(dir.path().join("slide_0000.png")).unwrap();
    let o = mshvit(&["--out", out, "--seed", "9", "synth", "--classes", "2,2,2,2,2", "--extent", "512"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing to overwrite"), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(dir.path().join("slide_0000.png")).unwrap() == before);
    ok(&["--out", out, "--seed", "9", "--overwrite", "synth", "--classes", "2,2,2,2,2", "--extent", "512"]);
    assert!(std::fs::read(dir.path().join("slide_0000.png")).unwrap() != before, "new seed, new pixels");
}

#[test]
fn short_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let fast = ["--set", "stage1.epochs=1", "--set", "stage2.epochs=2"];
    ok(&["--out", p(&d("data")), "synth", "--classes", "4,4,4,4,4", "--extent", "512"]);
    ok(&["--out", p(&d("tiles")), "tile", "--manifest", p(&d("data/manifest.jsonl"))]);
    let (roi_dir, model_dir, tiles) = (d("roi"), d("model"), d("tiles"));
    let roi_ckpt = d("roi/roi.ckpt");
    let mut args = vec!["--out", p(&roi_dir)];
    args.extend(fast);
    args.extend(["train-roi", "--tiles", p(&tiles)]);
    let s1 = ok(&args);
    assert!(s1.contains("stage 1"), "{s1}");
    let log = std::fs::read_to_string(d("roi/stage1_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let mut args = vec!["--out", p(&model_dir)];
    args.extend(fast);
    args.extend(["train-slide", "--tiles", p(&tiles), "--roi-checkpoint", p(&roi_ckpt)]);
    ok(&args);
    let ckpt = d("model/pipeline.ckpt");

    let summary = ok(&["--out", p(&d("eval")), "eval", "--checkpoint", p(&ckpt), "--tiles", p(&d("tiles"))]);
    assert!(summary.starts_with("5 test slides"), "{summary}");
    for f in ["metrics.json", "metrics.csv", "topk_metrics.json", "predictions.csv", "roc_nfd.csv", "run_eval.json"] {
        assert!(d("eval").join(f).exists(), "{f}");
    }

    let slide = d("data/slide_0012.png");
    let json = ok(&["infer", "--checkpoint", p(&ckpt), "--slide", p(&slide)]);
    let v: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
    let scores: Vec<f64> = v["scores"].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).collect();
    assert_eq!(scores.len(), 5);
    assert!((scores.iter().sum::<f64>() - 100.0).abs() < 1e-9, "{scores:?}");

    ok(&["--out", p(&d("infer")), "infer", "--checkpoint", p(&ckpt), "--slide", p(&slide)]);
    ok(&["--out", p(&d("render")), "render-map", "--maps", p(&d("infer/slide_0012_maps.json"))]);
    let img = image::open(d("render/slide_0012_map.png")).unwrap();
    assert_eq!((img.width(), img.height()), (512 / 32 * 8, 512 / 32 * 8));

    // a stage-1 checkpoint is not a pipeline checkpoint
    let o = mshvit(&["infer", "--checkpoint", p(&d("roi/roi.ckpt")), "--slide", p(&slide)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stats_command() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("scores.csv");
    std::fs::write(&csv, "a,b\n1,10\n2,11\n3,12\n4,\n").unwrap();
    let out = ok(&["stats", "--csv", p(&csv), "--a", "a", "--b", "b", "--test", "wilcoxon", "--mode", "exact"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    // smallest possible rank sum for 4 vs 3: 2 of 35 arrangements are as extreme
    let pv = v["wilcoxon"]["p_value"].as_f64().unwrap();
    assert!((pv - 2.0 / 35.0).abs() < 1e-12, "{pv}");
    assert_eq!(v["wilcoxon"]["significance"], "");

    std::fs::write(&csv, "a\n1\nx\n").unwrap();
    let o = mshvit(&["stats", "--csv", p(&csv), "--a", "a", "--test", "ks"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains('3'), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mshvit(&["stats", "--csv", p(&csv), "--a", "a", "--test", "wilcoxon"]);
    assert_eq!(o.status.code(), Some(2));
}
