use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointseg_core::data::load_dataset;
use pointseg_core::nn::{encode_checkpoint, init_params, ModelSpec};

fn pointseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointseg")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pointseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// An annotated 8x8 dataset with 4 train and 2 test images.
fn tiny_dataset(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    fs::write(&spec, r#"{"H": 8, "W": 8, "train": 4, "test": 2, "radius": [0.25, 0.3]}"#).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", s(&spec), "--out", s(&data)]);
    ok(&["annotate", "--data", s(&data), "--seed", "1"]);
    data
}

#[test]
fn default_synth_has_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["synth", "--out", s(&data)]);
    let ds = load_dataset(&data).unwrap();
    let m = ds.manifest.clone().unwrap();
    assert_eq!((m.classes, m.height, m.width), (3, 64, 64));
    assert_eq!((ds.train().len(), ds.test().len()), (40, 10));
}

#[test]
fn colliding_means_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"means": [0.2, 0.25, 0.8], "sigma": 0.05}"#).unwrap();
    let out = pointseg(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn annotate_is_repeatable_and_needs_masks() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let first = fs::read(data.join("annotations.json")).unwrap();
    ok(&["annotate", "--data", s(&data), "--seed", "1"]);
    assert_eq!(fs::read(data.join("annotations.json")).unwrap(), first);
    for sample in load_dataset(&data).unwrap().samples {
        let mask = sample.mask.unwrap();
        for p in sample.annotation.unwrap().points() {
            assert_eq!(mask.get(p.row, p.col), p.class);
        }
    }

    fs::remove_dir_all(data.join("masks")).unwrap();
    let out = pointseg(&["annotate", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_iterations_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--mode", "pce", "--iterations", "0", "--seed", "4"]);
    let init = init_params(&ModelSpec::conv_ed(3, 8, 8), 4).unwrap();
    assert_eq!(fs::read(run.join("model.pscv")).unwrap(), encode_checkpoint(&init));
}

#[test]
fn rerun_from_manifest_reproduces_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--data", s(&data), "--out", s(&a), "--iterations", "4", "--batch-size", "2"]);
    ok(&["train", "--config", s(&a.join("run_manifest.json")), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("model.pscv")).unwrap(), fs::read(b.join("model.pscv")).unwrap());
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = pointseg(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("r")),
        "--iterations",
        "20",
        "--lr0",
        "1e300",
        "--mode",
        "pce+ms",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(!dir.path().join("r/model.pscv").exists());
}

#[test]
fn zero_central_bias_width_equals_no_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--iterations", "3", "--batch-size", "2"]);
    let ckpt = run.join("model.pscv");
    let (a, b) = (dir.path().join("ea"), dir.path().join("eb"));
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&a)]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&b),
        "--central-bias-width",
        "0",
        "--save-masks",
    ]);
    assert_eq!(fs::read(a.join("eval.json")).unwrap(), fs::read(b.join("eval.json")).unwrap());
    assert!(b.join("predictions/test_0000.pgm").exists());
    assert!(b.join("predictions/test_0000.ppm").exists());
}

#[test]
fn eval_shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--model",
        "logit-field",
        "--iterations",
        "1",
        "--batch-size",
        "2",
    ]);
    let out = pointseg(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.pscv")),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("e")),
        "--resize",
        "4x4",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--trials", "3", "--out", s(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("tv_term"));
    assert!(dir.path().join("gradcheck.json").exists());

    let out = pointseg(&["gradcheck", "--trials", "3", "--inject-fault", "tv_term"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tv_term"), "{err}");
    assert!(!err.contains("pce:"), "{err}");
}

#[test]
fn sweep_rows_follow_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--param",
        "tau",
        "--values",
        "0.5,0.07,0.2",
        "--iterations",
        "2",
        "--batch-size",
        "2",
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let firsts: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(firsts, ["0.5", "0.07", "0.2"]);
    assert!(csv.starts_with("tau,dsc_avg,hd95_avg\n"));
    assert!(out.join("tau=0.07/eval.json").exists());
    assert_eq!(fs::read_to_string(out.join("sweep.dat")).unwrap().lines().count(), 4);
}

#[test]
fn unknown_sweep_parameter_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = pointseg(&[
        "sweep",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("x")),
        "--param",
        "momentum",
        "--values",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
