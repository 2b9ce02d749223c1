use std::fs;
use std::path::Path;

use reachnet::cli::{run, RunManifest, MANIFEST_FILE};

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("reachnet").chain(args.iter().copied()).map(String::from).collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "val", "test"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(split)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.push((format!("{split}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn phantom_generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let code = run(argv(&["phantom", "--count", "10", "--out", out.to_str().unwrap(), "--seed", "7"]));
        assert_eq!(code, 0);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 40);
    assert_eq!(fa, fb);
    let m = RunManifest::read(&a).unwrap();
    assert_eq!(m.command, "phantom");
    assert_eq!(m.seed, Some(7));
    assert!(m.finished_unix_s.is_some());
    assert_eq!(m.config["phantom"]["height"], 256);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(argv(&["phantom", "--bogus"])), 1);
    assert_eq!(run(argv(&["no-such-command"])), 1);
    let missing = tmp.path().join("nowhere");
    let code = run(argv(&["eval", "--model", missing.to_str().unwrap(), "--data", ".", "--out", out.to_str().unwrap()]));
    assert_eq!(code, 1);
    let code = run(argv(&["train", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(code, 1);
    assert_eq!(run(argv(&["bench", "--repeats", "0", "--resolution", "128", "--out", out.to_str().unwrap()])), 1);
    assert_eq!(run(argv(&["--help"])), 0);
}

#[test]
fn train_eval_report_round() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    assert_eq!(run(argv(&["phantom", "--count", "5", "--out", &p("data"), "--val-fraction", "0.2", "--test-fraction", "0.2"])), 0);
    fs::write(
        tmp.path().join("tiny.toml"),
        "[model]\nbase_filters = 2\n\n[train]\nbatch_size = 2\nepoch_divisor = 20\nresolution_divisor = 8\n",
    )
    .unwrap();
    let code = run(argv(&["train", "--data", &p("data"), "--out", &p("run"), "--config", &p("tiny.toml"), "--seed", "3"]));
    assert_eq!(code, 0);
    for f in ["final.ckpt", "ema.ckpt", "train_log.csv", "train_log.json", MANIFEST_FILE] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,loss,dice_region,dice_vessel,dice_fovea,lr,seconds");
    assert_eq!(log.lines().count(), 3);

    let code = run(argv(&["eval", "--model", &p("run/ema.ckpt"), "--data", &p("data/test"), "--out", &p("rep"), "--roi-um", "1500"]));
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("rep/report.json")).unwrap()).unwrap();
    let agg = report["aggregate"].as_object().unwrap();
    for key in ["samples", "dice_region", "dice_vessel", "dice_fovea", "area", "thickness", "cvi", "throughput_img_s", "model_size_bytes"] {
        assert!(agg.contains_key(key), "{key}");
    }
    assert_eq!(agg["samples"], 1);
    assert_eq!(report["options"]["roi"]["roi_width_um"], 1500.0);

    assert_eq!(run(argv(&["report", "--eval-dir", &p("rep"), "--out", &p("summary")])), 0);
    let svg = fs::read_to_string(tmp.path().join("summary/summary.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("Dice region"));
    assert!(tmp.path().join("summary/agreement.csv").exists());

    assert_eq!(run(argv(&["augment-preview", "--data", &p("data"), "--which", "shadow", "--out", &p("prev"), "--count", "2"])), 0);
    assert_eq!(fs::read_dir(tmp.path().join("prev/shadow")).unwrap().count(), 8);

    assert_eq!(run(argv(&["bench", "--model", &p("run/final.ckpt"), "--resolution", "128", "--repeats", "2", "--out", &p("bench")])), 0);
    let bench: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("bench/bench.json")).unwrap()).unwrap();
    assert_eq!(bench["resolution"], 128);
    assert!(bench["img_per_s"].as_f64().unwrap() > 0.0);

    assert_eq!(run(argv(&["model-info", "--model", &p("run/final.ckpt")])), 0);
    for dir in ["data", "run", "rep", "summary", "prev", "bench"] {
        let manifests = fs::read_dir(tmp.path().join(dir))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() == MANIFEST_FILE)
            .count();
        assert_eq!(manifests, 1, "{dir}");
    }
}
