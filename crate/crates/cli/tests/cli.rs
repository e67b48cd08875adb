use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbp"))
        .args(args)
        .output()
        .expect("spawn vbp")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout(out)).unwrap()
}

fn write_pgm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h).map(|i| ((i * 37 + 11) % 256) as u8));
    fs::write(path, bytes).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn preset_then_infer_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("tiny/model.json");
    let img = dir.path().join("x.pgm");
    write_pgm(&img, 6, 6);
    let info = json(&vbp(&["preset", "tiny", "--seed", "4", "--out", s(&manifest)]));
    assert_eq!(info["conv_stages"], 2);
    assert!(dir.path().join("tiny/weights.bin").exists());

    let a = stdout(&vbp(&["infer", "--model", s(&manifest), "--image", s(&img)]));
    let b = stdout(&vbp(&["infer", "--preset", "tiny", "--seed", "4", "--image", s(&img)]));
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 1);
    let decimals = lines[0].split('.').nth(1).unwrap();
    assert_eq!(decimals.len(), 6);
}

#[test]
fn infer_reports_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_pgm(&img, 5, 6);
    let out = vbp(&["infer", "--preset", "tiny", "--image", s(&img)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("1x6x6"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn gtsdb_head_has_43_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.ppm");
    let mut bytes = b"P6\n125 125\n255\n".to_vec();
    bytes.extend((0..125 * 125 * 3).map(|i| (i % 251) as u8));
    fs::write(&img, bytes).unwrap();
    let out = stdout(&vbp(&["infer", "--preset", "gtsdb", "--image", s(&img), "--threads", "2"]));
    assert_eq!(out.lines().count(), 43);
}

#[test]
fn visualize_writes_mask_and_optional_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_pgm(&img, 6, 6);
    let mask = dir.path().join("mask.pgm");
    let overlay = dir.path().join("overlay.ppm");

    let info = json(&vbp(&[
        "visualize", "--preset", "tiny", "--image", s(&img), "--method", "vbp", "--out", s(&mask),
    ]));
    assert_eq!(info["method"], "vbp");
    let bytes = fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n6 6\n255\n"));
    assert_eq!(bytes.len(), 11 + 36);
    assert!(!overlay.exists());

    json(&vbp(&[
        "visualize", "--preset", "tiny", "--image", s(&img), "--method", "lrp", "--epsilon", "100",
        "--out", s(&mask), "--overlay", s(&overlay),
    ]));
    let o = fs::read(&overlay).unwrap();
    assert!(o.starts_with(b"P6\n6 6\n255\n"));
    assert_eq!(o.len(), 11 + 108);
    let gray = &fs::read(&img).unwrap()[11..];
    for (px, &g) in o[11..].chunks(3).zip(gray) {
        assert!(px[0] >= g);
        assert_eq!(px[1], px[2]);
    }
}

#[test]
fn visualize_rejects_unknown_method() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_pgm(&img, 6, 6);
    let out = vbp(&[
        "visualize", "--preset", "tiny", "--image", s(&img), "--method", "gradcam", "--out",
        s(&dir.path().join("m.pgm")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn compare_metrics_are_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_pgm(&img, 6, 6);
    for seed in ["0", "1", "2"] {
        let v = json(&vbp(&["compare", "--preset", "tiny", "--seed", seed, "--image", s(&img)]));
        for key in ["pearson", "spearman"] {
            if let Some(r) = v[key].as_f64() {
                assert!((-1.0..=1.0).contains(&r), "{key} {r}");
            }
        }
        let j = v["top5_jaccard"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&j));
        assert_eq!(v["pixels"], 36);
    }
}

#[test]
fn bench_single_run() {
    let v = json(&vbp(&["bench", "--preset", "tiny", "--runs", "1", "--warmup", "0", "--threads", "1"]));
    assert_eq!(v["timed_runs"], 1);
    assert_eq!(v["thread_count"], 1);
    let runs = v["per_run_ms"].as_array().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(v["p50_ms"], runs[0]);
    assert_eq!(v["method"], "vbp");
    assert!(v["timed_region"].as_str().unwrap().contains("forward excluded"));
    assert!(!vbp(&["bench", "--preset", "tiny", "--runs", "0"]).status.success());
}

#[test]
fn oracle_check_is_reproducible() {
    let args = ["oracle-check", "--seed", "1", "--trials", "20", "--max-size", "6", "6"];
    let a = stdout(&vbp(&args));
    let b = stdout(&vbp(&args));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["failed"], 0);
    assert_eq!(
        v["passed"].as_u64().unwrap() + v["inconclusive"].as_u64().unwrap(),
        20
    );
}

#[test]
fn missing_model_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_pgm(&img, 6, 6);
    let out = vbp(&["infer", "--model", s(&dir.path().join("nope.json")), "--image", s(&img)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}
