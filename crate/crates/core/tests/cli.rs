use std::path::Path;
use std::process::{Command, Output};

use mpbcq::tensor_io::{load_matrix, random_gaussian, save_matrix};

fn mpbcq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpbcq"))
        .current_dir(dir)
        .args(args)
        .env_remove("ANYBCQ_THREADS")
        .output()
        .expect("spawn mpbcq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[track_caller]
fn assert_exit(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
    if code != 0 {
        assert!(o.stdout.is_empty(), "failure wrote to stdout: {}", stdout(o));
        assert!(!o.stderr.is_empty());
    }
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// Quantizes seeded weights into `m.abcq` (and `w.fmat`) inside `dir`.
fn quantize(dir: &Path, shape: &str, bits: &str) -> Output {
    let o = mpbcq(
        dir,
        &[
            "quantize",
            "--random",
            shape,
            "--seed",
            "1",
            "--bits",
            bits,
            "--out",
            "m.abcq",
            "--save-weights",
            "w.fmat",
            "--format",
            "csv",
        ],
    );
    assert_exit(&o, 0);
    o
}

#[test]
fn quantize_range_reports_non_increasing_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = quantize(dir.path(), "256x256", "2:4");
    let rows = csv_rows(&stdout(&o));
    let errs: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["2", "3", "4"]);
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    assert!(dir.path().join("m.abcq").exists());
}

#[test]
fn quantize_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    quantize(dir.path(), "32x96", "1:3");
    let first = std::fs::read(dir.path().join("m.abcq")).unwrap();
    quantize(dir.path(), "32x96", "1:3");
    assert_eq!(first, std::fs::read(dir.path().join("m.abcq")).unwrap());
}

#[test]
fn quantize_rejects_bad_flags_and_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_exit(&mpbcq(d, &["quantize", "--random", "8x8", "--bits", "4:2", "--out", "z.abcq"]), 2);
    assert_exit(&mpbcq(d, &["quantize", "--random", "8by8", "--bits", "2", "--out", "z.abcq"]), 2);
    assert_exit(&mpbcq(d, &["quantize", "--random", "8x8", "--bits", "2", "--mode", "odd", "--out", "z.abcq"]), 2);
    assert_exit(&mpbcq(d, &["quantize", "--bits", "2", "--out", "z.abcq"]), 2);
    assert_exit(&mpbcq(d, &["quantize", "--no-such-flag"]), 2);
    assert_exit(&mpbcq(d, &["quantize", "--input", "missing.fmat", "--bits", "2", "--out", "z.abcq"]), 3);
    assert!(!d.join("z.abcq").exists());
}

#[test]
fn non_finite_weights_exit_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = random_gaussian(2, 4, 1).unwrap().to_bytes();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(dir.path().join("nan.fmat"), bytes).unwrap();
    assert_exit(&mpbcq(dir.path(), &["quantize", "--input", "nan.fmat", "--bits", "2", "--out", "z.abcq"]), 4);
}

#[test]
fn refine_exact_and_gd_never_increase_loss() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quantize(d, "48x128", "2:3");
    save_matrix(&random_gaussian(64, 128, 9).unwrap(), d.join("x.fmat")).unwrap();

    let o = mpbcq(
        d,
        &[
            "refine",
            "--model",
            "m.abcq",
            "--weights",
            "w.fmat",
            "--calib",
            "x.fmat",
            "--bits",
            "2",
            "--out",
            "r.abcq",
            "--format",
            "csv",
        ],
    );
    assert_exit(&o, 0);
    let row = &csv_rows(&stdout(&o))[0];
    let (before, after): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
    assert!(after <= before, "{after} > {before}");

    // Weights regenerated from the same seed are accepted in place of a file.
    let o = mpbcq(
        d,
        &[
            "refine", "--model", "r.abcq", "--random", "48x128", "--seed", "1", "--calib", "x.fmat", "--bits", "3",
            "--solver", "gd",
        ],
    );
    assert_exit(&o, 0);
    let text = stdout(&o);
    assert!(text.contains("epochs=10 lr=0.0001"), "{text}");
    let losses: Vec<f64> = text
        .split_whitespace()
        .filter_map(|t| t.strip_prefix("loss_before=").or_else(|| t.strip_prefix("loss_after=")))
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(losses[1] <= losses[0], "{losses:?}");
}

#[test]
fn refine_rejects_out_of_range_bits_and_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quantize(d, "16x64", "2:3");
    save_matrix(&random_gaussian(8, 64, 2).unwrap(), d.join("x.fmat")).unwrap();
    save_matrix(&random_gaussian(8, 32, 2).unwrap(), d.join("x_bad.fmat")).unwrap();
    let base = ["refine", "--model", "m.abcq", "--weights", "w.fmat"];
    assert_exit(&mpbcq(d, &[&base[..], &["--calib", "x.fmat", "--bits", "4"]].concat()), 2);
    assert_exit(&mpbcq(d, &[&base[..], &["--calib", "x_bad.fmat", "--bits", "2"]].concat()), 2);
    assert_exit(&mpbcq(d, &[&base[..], &["--calib", "x.fmat", "--bits", "2", "--solver", "adam"]].concat()), 2);
}

#[test]
fn gemv_paths_match_and_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quantize(d, "64x200", "2:4");
    save_matrix(&random_gaussian(5, 200, 3).unwrap(), d.join("x.fmat")).unwrap();
    let lut = mpbcq(d, &["gemv", "--model", "m.abcq", "--bits", "3", "--x", "x.fmat", "--out", "y_lut.fmat"]);
    assert_exit(&lut, 0);
    assert!(stdout(&lut).contains("crc32="));
    let naive = mpbcq(
        d,
        &["gemv", "--model", "m.abcq", "--bits", "3", "--x", "x.fmat", "--out", "y_naive.fmat", "--path", "naive"],
    );
    assert_exit(&naive, 0);
    let a = load_matrix(d.join("y_lut.fmat")).unwrap();
    let b = load_matrix(d.join("y_naive.fmat")).unwrap();
    assert_eq!((a.rows(), a.cols()), (5, 64));
    let scale = b.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    let worst = a.data().iter().zip(b.data()).fold(0f32, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst <= 1e-4 * scale, "{worst} vs {scale}");

    assert_exit(&mpbcq(d, &["gemv", "--model", "m.abcq", "--bits", "5", "--x", "x.fmat", "--out", "y.fmat"]), 2);
    assert_exit(
        &mpbcq(d, &["gemv", "--model", "m.abcq", "--bits", "3", "--x", "w.fmat", "--out", "y.fmat", "--path", "fast"]),
        2,
    );
    assert_exit(&mpbcq(d, &["gemv", "--model", "m.abcq", "--bits", "3", "--x", "m.abcq", "--out", "y.fmat"]), 3);
}

#[test]
fn inspect_rows_are_additive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quantize(d, "64x256", "2:4");
    let o = mpbcq(d, &["inspect", "--model", "m.abcq", "--format", "csv"]);
    assert_exit(&o, 0);
    let rows = csv_rows(&stdout(&o));
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["bcq2", "bcq3", "bcq4", "multi_model", "shared"]);
    for r in &rows {
        let v: Vec<u64> = r[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[0] + v[1], v[2], "{r:?}");
    }
    let text = stdout(&mpbcq(d, &["inspect", "--model", "m.abcq"]));
    assert!(text.contains("Multi-model") && text.contains("Shared"), "{text}");
    assert_exit(&mpbcq(d, &["inspect", "--model", "m.abcq", "--scale-width", "3"]), 2);
}

#[test]
fn inspect_rejects_corrupt_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quantize(d, "8x64", "2:3");
    let mut bytes = std::fs::read(d.join("m.abcq")).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0xff;
    std::fs::write(d.join("flip.abcq"), &bytes).unwrap();
    std::fs::write(d.join("short.abcq"), &bytes[..n / 2]).unwrap();
    for name in ["flip.abcq", "short.abcq", "w.fmat", "none.abcq"] {
        assert_exit(&mpbcq(d, &["inspect", "--model", name]), 3);
    }
}

#[test]
fn bench_plane_bytes_follow_precision() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quantize(d, "64x256", "2:4");
    let o = mpbcq(d, &["bench", "--model", "m.abcq", "--bits", "all", "--repeats", "3", "--format", "csv"]);
    assert_exit(&o, 0);
    let rows = csv_rows(&stdout(&o));
    for path in ["lut", "naive"] {
        let bytes: Vec<u64> = rows.iter().filter(|r| r[1] == path).map(|r| r[5].parse().unwrap()).collect();
        assert_eq!(bytes.len(), 3);
        assert_eq!(bytes[0] * 3, bytes[1] * 2);
        assert_eq!(bytes[0] * 4, bytes[2] * 2);
    }
    assert!(rows.iter().any(|r| r[1] == "dense"));

    let o = mpbcq(
        d,
        &["bench", "--shapes", "96x100,33x64", "--bits", "3", "--repeats", "2", "--no-dense", "--format", "csv"],
    );
    assert_exit(&o, 0);
    assert_eq!(csv_rows(&stdout(&o)).len(), 4);
    assert_exit(&mpbcq(d, &["bench", "--model", "m.abcq", "--bits", "5", "--repeats", "2"]), 2);
    assert_exit(&mpbcq(d, &["bench", "--model", "m.abcq", "--repeats", "0"]), 2);
}

#[test]
fn thread_count_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_mpbcq"))
            .current_dir(d)
            .args(["quantize", "--random", "32x64", "--bits", "2:3", "--out", "t.abcq", "--format", "csv"])
            .env("ANYBCQ_THREADS", threads)
            .output()
            .unwrap()
    };
    let one = run("1");
    assert_exit(&one, 0);
    let auto = run("0");
    assert_exit(&auto, 0);
    assert_eq!(one.stdout, auto.stdout);
    assert_exit(&run("many"), 2);
}

#[test]
fn generate_writes_seeded_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_exit(&mpbcq(d, &["generate", "--rows", "3", "--cols", "5", "--seed", "4", "--out", "g.fmat"]), 0);
    assert_eq!(load_matrix(d.join("g.fmat")).unwrap(), random_gaussian(3, 5, 4).unwrap());
    assert_exit(&mpbcq(d, &["generate", "--rows", "0", "--cols", "5", "--out", "g.fmat"]), 2);
}
