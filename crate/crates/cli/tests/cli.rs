use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fluoro-recon"));
    c.env("RUST_LOG", "warn").env_remove("FLUORO_RECON_THREADS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn small_dataset(dir: &Path, name: &str, count: usize) {
    ok(dir, &["generate", "--out", name, "--count", &count.to_string(), "--seed", "11"]);
}

#[test]
fn generate_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path(), "a", 6);
    small_dataset(tmp.path(), "b", 6);
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert_eq!(a.len(), 2 + 6 * 4);
    assert_eq!(a, b);
}

#[test]
fn reconstruct_writes_curve_and_reprojections() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path(), "ds", 2);
    let args = |out: &'static str| {
        vec![
            "reconstruct",
            "--top",
            "ds/sample_00001/top.pgm",
            "--side",
            "ds/sample_00001/side.pgm",
            "--cameras",
            "ds/cameras.json",
            "--bodies",
            "15",
            "--out",
            out,
        ]
    };
    ok(tmp.path(), &args("r1.csv"));
    ok(tmp.path(), &args("r2.csv"));
    let curve = fs::read_to_string(tmp.path().join("r1.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("x_m,y_m,z_m"));
    assert_eq!(curve.lines().count(), 16);
    assert_eq!(curve, fs::read_to_string(tmp.path().join("r2.csv")).unwrap());
    for view in ["top", "side"] {
        let reproj = fs::read_to_string(tmp.path().join(format!("r1_{view}_reprojection.csv"))).unwrap();
        assert!(reproj.starts_with("index,u_detected_px,v_detected_px,u_reprojected_px,v_reprojected_px\n"));
        assert_eq!(reproj.lines().count(), 16);
    }
}

#[test]
fn reconstruct_reports_failing_stage() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path(), "ds", 1);
    let mut blank = b"P5\n80 80\n255\n".to_vec();
    blank.resize(blank.len() + 80 * 80, 0);
    fs::write(tmp.path().join("empty.pgm"), blank).unwrap();
    let out = run(
        tmp.path(),
        &["reconstruct", "--top", "empty.pgm", "--side", "ds/sample_00000/side.pgm", "--cameras", "ds/cameras.json", "--out", "r.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skeleton (top)"));
}

#[test]
fn train_and_eval_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path(), "ds", 8);
    for model in ["m1.bin", "m2.bin"] {
        ok(tmp.path(), &["train", "--dataset", "ds", "--epochs", "2", "--seed", "4", "--out", model]);
    }
    let read = |p: &str| fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("m1.bin"), read("m2.bin"));
    assert_eq!(read("m1.bin.history.csv"), read("m2.bin.history.csv"));
    assert_eq!(read("m1.bin.json"), read("m2.bin.json"));
    let history = String::from_utf8(read("m1.bin.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let out = ok(tmp.path(), &["eval", "--model", "m1.bin", "--dataset", "ds", "--out-report", "r.json", "--out-profile", "p.csv"]);
    ok(tmp.path(), &["eval", "--model", "m1.bin", "--dataset", "ds", "--out-report", "r2.json", "--out-profile", "p2.csv"]);
    assert_eq!(read("r.json"), read("r2.json"));
    assert_eq!(read("p.csv"), read("p2.csv"));

    let report: serde_json::Value = serde_json::from_slice(&read("r.json")).unwrap();
    let methods: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["Reconstruction", "3D-FGRN"]);
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["Reconstruction", "3D-FGRN"]);

    let profile = String::from_utf8(read("p.csv")).unwrap();
    assert_eq!(profile.lines().next(), Some("method,segment,mean_error_mm"));
    assert_eq!(profile.lines().count(), 1 + 2 * 20);
}

#[test]
fn eval_writes_text_table_by_default() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path(), "ds", 3);
    ok(tmp.path(), &["train", "--dataset", "ds", "--epochs", "1", "--validation-fraction", "0", "--out", "m.bin"]);
    ok(tmp.path(), &["eval", "--model", "m.bin", "--dataset", "ds", "--out-report", "r.txt", "--out-profile", "p.csv"]);
    let text = fs::read_to_string(tmp.path().join("r.txt")).unwrap();
    assert!(text.contains("MaxED (mm)") && text.contains("METE (mm)") && text.contains("MERS (mm)"));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.toml"), "[generate]\ncount = 3\nseed = 5\nbodies = 12\n").unwrap();
    let manifest = |dir: &str| -> serde_json::Value {
        serde_json::from_slice(&fs::read(tmp.path().join(dir).join("manifest.json")).unwrap()).unwrap()
    };
    ok(tmp.path(), &["--config", "c.toml", "generate", "--out", "a"]);
    let a = manifest("a");
    assert_eq!((a["count"].as_u64(), a["seed"].as_u64(), a["bodies"].as_u64()), (Some(3), Some(5), Some(12)));
    assert_eq!(a["spacing_m"].as_f64(), Some(0.002));

    ok(tmp.path(), &["generate", "--config", "c.toml", "--out", "b", "--count", "2"]);
    let b = manifest("b");
    assert_eq!((b["count"].as_u64(), b["seed"].as_u64()), (Some(2), Some(5)));
}

#[test]
fn resolved_config_is_logged() {
    let tmp = TempDir::new().unwrap();
    let out = bin().current_dir(tmp.path()).env("RUST_LOG", "info").args(["generate", "--out", "d", "--count", "1"]).output().unwrap();
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generate config:") && err.contains("\"max_curvature\":60.0"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_config_file_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.toml"), "[generate]\ncolour = 3\n").unwrap();
    let out = run(tmp.path(), &["--config", "c.toml", "generate", "--out", "a"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    for args in [&["generate"][..], &["train", "--bogus"], &["frobnicate"], &[], &["train", "--dataset", "d", "--out", "m", "--view", "front"]] {
        assert_eq!(run(tmp.path(), args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn help_documents_every_flag_and_default() {
    let tmp = TempDir::new().unwrap();
    let expected: [(&str, &[&str]); 4] = [
        ("generate", &["--out", "--count", "--seed", "--bodies", "--spacing", "--workspace", "--config"]),
        ("reconstruct", &["--top", "--side", "--cameras", "--bodies", "--tip-top", "--tip-side", "--smoothing", "--out"]),
        ("train", &["--dataset", "--view", "--target", "--epochs", "--alpha", "--beta", "--lr", "--seed", "--batch-size", "--dropout", "--validation-fraction", "--out", "--history"]),
        ("eval", &["--model", "--dataset", "--view", "--correspondence", "--out-report", "--out-profile"]),
    ];
    for (cmd, flags) in expected {
        let out = run(tmp.path(), &[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let help = String::from_utf8(out.stdout).unwrap();
        for flag in flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
        assert!(help.contains("[default:"), "{cmd} --help shows no defaults");
    }
}

#[test]
fn malformed_dataset_exits_two_naming_the_file() {
    let tmp = TempDir::new().unwrap();
    small_dataset(tmp.path(), "ds", 2);
    ok(tmp.path(), &["train", "--dataset", "ds", "--epochs", "1", "--validation-fraction", "0", "--out", "m.bin"]);
    fs::write(tmp.path().join("ds/sample_00001/gt.csv"), "x_m,y_m,z_m\n1,2\n").unwrap();
    let out = run(tmp.path(), &["eval", "--model", "m.bin", "--dataset", "ds", "--out-report", "r", "--out-profile", "p"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset") && err.contains("gt.csv"), "{err}");
}

#[test]
fn thread_cap_is_validated() {
    let tmp = TempDir::new().unwrap();
    let out = bin().current_dir(tmp.path()).env("FLUORO_RECON_THREADS", "zero").args(["generate", "--out", "d", "--count", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FLUORO_RECON_THREADS"));
    let out = bin().current_dir(tmp.path()).env("FLUORO_RECON_THREADS", "1").args(["generate", "--out", "d", "--count", "2"]).output().unwrap();
    assert!(out.status.success());
}
