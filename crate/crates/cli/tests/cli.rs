//! End-to-end runs of the `flowinv` binary on a tiny shapes model.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use flowinv_core::edit::EditConfig;
use flowinv_core::experiments::HELDOUT_SEED;
use flowinv_core::inversion::reconstruct;
use flowinv_core::shapes::gen_shapes_dataset;
use flowinv_core::StepRule;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowinv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn flowinv")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &[&str] = &[
    "train",
    "--steps",
    "20",
    "--batch-size",
    "8",
    "--data-size",
    "60",
    "--out",
    "m",
];

/// A directory holding `m/model.ckpt` from the tiny training run.
fn trained() -> &'static TempDir {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), TINY);
        dir
    })
}

/// A fresh working directory with a copy of the tiny model at `model.ckpt`.
fn workdir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(
        trained().path().join("m/model.ckpt"),
        dir.path().join("model.ckpt"),
    )
    .unwrap();
    dir
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn training_is_byte_reproducible() {
    let base = trained().path();
    let again = tempfile::tempdir().unwrap();
    ok(again.path(), TINY);
    for f in ["model.ckpt", "loss.csv"] {
        assert_eq!(
            fs::read(base.join("m").join(f)).unwrap(),
            fs::read(again.path().join("m").join(f)).unwrap(),
            "{f}"
        );
    }
    let loss = data_lines(&base.join("m/loss.csv"));
    assert_eq!(loss[0], "step,loss");
    assert_eq!(loss.len(), 21);
}

#[test]
fn zero_step_training_writes_a_model() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["train", "--steps", "0", "--data-size", "10", "--out", "z"],
    );
    assert!(dir.path().join("z/model.ckpt").exists());
    assert_eq!(data_lines(&dir.path().join("z/loss.csv")), ["step,loss"]);
}

#[test]
fn uni_edit_reports_nfe_and_masks() {
    let dir = workdir();
    let args = [
        "edit",
        "--model",
        "model.ckpt",
        "--alpha",
        "0.6",
        "--omega",
        "5",
        "--steps",
        "15",
        "--out",
        "e",
    ];
    ok(dir.path(), &args);
    let e = dir.path().join("e");
    let j = json(&e.join("edit.json"));
    assert_eq!(j["nfe"], 28);
    assert_eq!(j["expected_nfe"], 28);
    assert_eq!(j["steps"].as_array().unwrap().len(), 9);
    assert_eq!(fs::read_dir(e.join("masks")).unwrap().count(), 9);
    for f in ["original.ppm", "edited.ppm", "edited.lat", "report.csv"] {
        assert!(e.join(f).exists(), "{f}");
    }
    assert!(fs::read(e.join("edited.ppm"))
        .unwrap()
        .starts_with(b"P6\n# alpha=0.6\n"));

    ok(dir.path(), &{
        let mut a = args.to_vec();
        a[10] = "e2";
        a
    });
    for f in ["edit.json", "edited.lat", "edited.ppm", "report.csv"] {
        let strip = |p: &Path| String::from_utf8_lossy(&fs::read(p).unwrap()).replace("e2", "e");
        assert_eq!(
            strip(&e.join(f)),
            strip(&dir.path().join("e2").join(f)),
            "{f}"
        );
    }
}

#[test]
fn baselines_write_no_masks() {
    let dir = workdir();
    ok(
        dir.path(),
        &[
            "edit",
            "--model",
            "model.ckpt",
            "--baseline",
            "delayed",
            "--out",
            "d",
        ],
    );
    let d = dir.path().join("d");
    assert!(d.join("edited.lat").exists());
    assert!(!d.join("masks").exists());
    assert_eq!(json(&d.join("edit.json"))["method"], "delayed");
}

/// Payload of a FLOWLAT1 file as `f64` values.
fn latent_values(path: &Path) -> Vec<f64> {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..8], b"FLOWLAT1");
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    bytes[nl + 1..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

#[test]
fn identical_conditions_reproduce_the_reconstruction() {
    let dir = workdir();
    ok(
        dir.path(),
        &[
            "edit",
            "--model",
            "model.ckpt",
            "--index",
            "2",
            "--source",
            "red_circle",
            "--target",
            "red_circle",
            "--out",
            "same",
        ],
    );
    let edited = latent_values(&dir.path().join("same/edited.lat"));

    let (_, field) = flowinv_core::checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    let image = gen_shapes_dataset(3, HELDOUT_SEED)
        .unwrap()
        .pop()
        .unwrap()
        .image;
    let c = flowinv_core::shapes::ShapeClass::parse("red_circle")
        .unwrap()
        .condition();
    let cfg = EditConfig::new(15, c, c);
    let rule = StepRule::euler(&field, cfg.grid().unwrap());
    let recon = reconstruct(&rule, &image, c).unwrap().z0_hat;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&edited), bits(recon.as_slice()));
}

#[test]
fn converge_octaves_and_slope_gate() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "converge", "--dt-min", "2^-8", "--dt-max", "2^-3", "--out", "c",
        ],
    );
    let rows = data_lines(&dir.path().join("c/converge.csv"));
    for m in ["uni_inv", "at_prev", "at_target"] {
        let n = rows
            .iter()
            .filter(|r| r.starts_with(&format!("{m},")))
            .count();
        assert_eq!(n, 6, "{m}");
    }
    let slopes = data_lines(&dir.path().join("c/slopes.csv"));
    let uni: f64 = slopes[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((2.7..=3.3).contains(&uni), "{uni}");
    assert!(dir.path().join("c/converge.svg").exists());

    let gate = run(
        dir.path(),
        &["converge", "--min-slope", "3.5", "--out", "g"],
    );
    assert_eq!(code(&gate), 3);
}

#[test]
fn flags_override_file_over_defaults() {
    let dir = workdir();
    fs::write(
        dir.path().join("run.cfg"),
        "# edit settings\nalpha = 0.4\nomega=3\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "--config",
            "run.cfg",
            "edit",
            "--model",
            "model.ckpt",
            "--alpha",
            "0.2",
            "--out",
            "p",
        ],
    );
    let cfg = &json(&dir.path().join("p/edit.json"))["config"];
    assert_eq!(cfg["alpha"], "0.2");
    assert_eq!(cfg["omega"], "3");
    assert_eq!(cfg["steps"], "15");

    fs::write(dir.path().join("bad.cfg"), "alpah=0.4\n").unwrap();
    let bad = run(
        dir.path(),
        &[
            "--config",
            "bad.cfg",
            "edit",
            "--model",
            "model.ckpt",
            "--out",
            "q",
        ],
    );
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("alpah"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(dir.path(), &["edit", "--model", "nope.ckpt"]);
    assert_eq!(code(&missing), 1);
    assert_eq!(code(&run(dir.path(), &["edit", "--alpah", "0.3"])), 1);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    let empty = run(dir.path(), &["report", "--input", "."]);
    assert_eq!(code(&empty), 1);
}

#[test]
fn sample_invert_and_report() {
    let dir = workdir();
    ok(
        dir.path(),
        &[
            "sample",
            "--model",
            "model.ckpt",
            "--condition",
            "blue_square",
            "--count",
            "2",
            "--steps",
            "10",
            "--out",
            "s",
        ],
    );
    let s = json(&dir.path().join("s/samples.json"));
    assert_eq!(s["nfe"], 20);
    assert!(dir.path().join("s/sample_01.ppm").exists());

    ok(
        dir.path(),
        &[
            "invert",
            "--model",
            "model.ckpt",
            "--steps",
            "10",
            "--out",
            "i",
        ],
    );
    let inv = json(&dir.path().join("i/invert.json"));
    assert_eq!(inv["nfe_invert"], 11);
    assert!(inv["roundtrip_mse"].as_f64().unwrap().is_finite());

    fs::create_dir(dir.path().join("r")).unwrap();
    fs::copy(
        trained().path().join("m/loss.csv"),
        dir.path().join("r/loss.csv"),
    )
    .unwrap();
    ok(dir.path(), &["report", "--input", "r", "--out", "r"]);
    let md = fs::read_to_string(dir.path().join("r/report.md")).unwrap();
    assert!(md.contains("20 steps"), "{md}");
    assert!(dir.path().join("r/loss.svg").exists());
}
