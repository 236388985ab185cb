use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use voxseg::fits::{load_fits, load_labels, save_fits};
use voxseg::synth::synth_two_region_volume;
use voxseg::Dims;

fn voxseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxseg"))
        .args(args)
        .output()
        .expect("run voxseg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(dir: &TempDir) -> PathBuf {
    let (v, _) = synth_two_region_volume(Dims::cube(16), 100.0, 400.0, 10.0, 3).unwrap();
    let path = dir.path().join("t.fits");
    save_fits(&v, &path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn wavelet_writes_all_levels() {
    let dir = TempDir::new().unwrap();
    let input = fixture(&dir);
    let prefix = dir.path().join("w");
    let o = voxseg(&["wavelet", "--in", s(&input), "--scales", "2", "--out-prefix", s(&prefix)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let original = load_fits(&input).unwrap();
    let mut sum = vec![0.0; original.len()];
    for i in 1..=3 {
        let level = load_fits(dir.path().join(format!("w_{i}.fits"))).unwrap();
        for (acc, x) in sum.iter_mut().zip(level.data()) {
            *acc += x;
        }
    }
    assert!(!dir.path().join("w_4.fits").exists());
    // Levels are stored as f32, so reconstruction holds to single precision.
    for (a, b) in sum.iter().zip(original.data()) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn default_prefix_is_input_stem() {
    let dir = TempDir::new().unwrap();
    let input = fixture(&dir);
    let o = voxseg(&["wavelet", "--in", s(&input), "--scales", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("t_1.fits").exists());
    assert!(dir.path().join("t_2.fits").exists());
}

#[test]
fn zero_scales_is_usage_error_without_touching_input() {
    let o = voxseg(&["wavelet", "--in", "/nonexistent/x.fits", "--scales", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--scales"));
}

#[test]
fn missing_input_names_path() {
    let o = voxseg(&["wavelet", "--in", "/nonexistent/x.fits"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/x.fits"), "{}", stderr(&o));
}

#[test]
fn empty_k_range_is_usage_error() {
    let o = voxseg(&["bic-scan", "--in", "x.fits", "--k-range", "5..2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn marginal_rejects_scales_flag() {
    let o = voxseg(&["segment", "marginal", "--in", "x.fits", "--scales", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bic_scan_csv_and_selection() {
    let dir = TempDir::new().unwrap();
    let input = fixture(&dir);
    let o = voxseg(&["bic-scan", "--in", s(&input), "--k-range", "1..4", "--restarts", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("t_bic_scan.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,loglik,bic,converged"));
    let ks: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "2", "3", "4"]);
    assert!(stdout(&o).contains("selected k = 2"), "{}", stdout(&o));
}

#[test]
fn segment_outputs_are_idempotent() {
    let dir = TempDir::new().unwrap();
    let input = fixture(&dir);
    let run = || {
        let o = voxseg(&["segment", "kmeans", "--in", s(&input), "--k", "2", "--scales", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(dir.path().join("t_segm_kmean2.fits")).unwrap(),
            std::fs::read(dir.path().join("t_segm_kmean2.csv")).unwrap(),
        )
    };
    let first = run();
    assert_eq!(first, run());
    let labels = load_labels(dir.path().join("t_segm_kmean2.fits")).unwrap();
    assert_eq!(labels.k(), 2);
}

#[test]
fn segment_marginal_fixed_k() {
    let dir = TempDir::new().unwrap();
    let input = fixture(&dir);
    let o = voxseg(&["segment", "marginal", "--in", s(&input), "--k", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = load_labels(dir.path().join("t_segm_marg2.fits")).unwrap();
    assert_eq!(labels.summary().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("t_segm_marg2.csv")).unwrap();
    assert!(csv.starts_with("cluster,count,"), "{csv}");
}

#[test]
fn compare_then_reuse_agree() {
    let dir = TempDir::new().unwrap();
    let input = fixture(&dir);
    let o = voxseg(&["compare", "--in", s(&input), "--k", "2", "--scales", "2", "--sigma-grid", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("t_compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.starts_with("sigma,marginal,kmeans,verdict"));
    let text = std::fs::read_to_string(dir.path().join("t_compare.txt")).unwrap();
    assert!(text.contains("seed"), "{text}");
    let jsonl = std::fs::read_to_string(dir.path().join("t_compare.jsonl")).unwrap();
    let records: Vec<serde_json::Value> =
        jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records[0]["record"], "config");
    assert_eq!(records[0]["values"]["k"], "2");
    assert_eq!(records.iter().filter(|r| r["record"] == "sensitivity").count(), 1);

    let o = voxseg(&[
        "compare", "--in", s(&input), "--k", "2", "--scales", "2", "--sigma-grid", "1", "--reuse",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reused = std::fs::read_to_string(dir.path().join("t_compare.csv")).unwrap();
    assert_eq!(csv, reused);
}

#[test]
fn reuse_names_missing_artifact() {
    let dir = TempDir::new().unwrap();
    let input = fixture(&dir);
    let o = voxseg(&["compare", "--in", s(&input), "--k", "3", "--reuse"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("t_segm_marg3.fits"), "{}", stderr(&o));
}

#[test]
fn reuse_requires_k() {
    let o = voxseg(&["compare", "--in", "x.fits", "--reuse"]);
    assert_eq!(o.status.code(), Some(2));
}
