use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unifiq_core::image::RgbImage;
use unifiq_core::{Model, ModelConfig};

fn unifiq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unifiq")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Saves freshly initialised weights with the two role embeddings tied.
fn tied_weights(path: &Path) {
    let model = Model::new(ModelConfig::default());
    let mut w = model.init_weights(3);
    model.tie_embeddings(&mut w).unwrap();
    w.save(path).unwrap();
}

#[test]
fn unknown_subcommand_and_flag_exit_one_with_usage() {
    for args in [&["bogus"][..], &["score", "--nope", "x"][..], &[][..]] {
        let out = unifiq(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = stderr(&out);
        assert!(err.contains("Usage"), "{err}");
        assert!(err.lines().last().unwrap().starts_with("{\"error\":\"usage\""), "{err}");
        assert!(out.stdout.is_empty());
    }
    let help = unifiq(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("grad-check"));
}

#[test]
fn missing_files_exit_two_and_bad_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.ppm");
    RgbImage::filled(64, 64, [10, 20, 30]).write_ppm(&img).unwrap();

    let out = unifiq(&[
        "score",
        "--image",
        s(&img),
        "--weights",
        s(&dir.path().join("none.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("{\"error\":\"io\""));

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not weights").unwrap();
    let out = unifiq(&["score", "--image", s(&img), "--weights", s(&junk)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("{\"error\":\"format\""), "{}", stderr(&out));

    let w = dir.path().join("w.bin");
    tied_weights(&w);
    let small = dir.path().join("small.ppm");
    RgbImage::filled(32, 32, [1, 2, 3]).write_ppm(&small).unwrap();
    let out = unifiq(&["score", "--image", s(&small), "--weights", s(&w)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("{\"error\":\"contract\""));
}

#[test]
fn score_with_identical_reference_matches_no_reference() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.ppm");
    unifiq_core::datagen::gen_base_image(5, 64)
        .unwrap()
        .write_ppm(&img)
        .unwrap();
    let w = dir.path().join("w.bin");
    tied_weights(&w);

    let nr = unifiq(&["score", "--image", s(&img), "--weights", s(&w)]);
    let fr = unifiq(&["score", "--image", s(&img), "--ref", s(&img), "--weights", s(&w)]);
    assert!(nr.status.success() && fr.status.success());
    let line = stdout(&nr);
    assert_eq!(line, stdout(&fr));
    assert_eq!(line.lines().count(), 1);
    let value: f64 = line.trim().parse().unwrap();
    assert_eq!(line.trim().split('.').nth(1).unwrap().len(), 6);
    assert!(value.is_finite());
}

#[test]
fn data_train_eval_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = unifiq(&["gen-data", "--out", s(&data), "--n-base", "2", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(data.join("manifest.csv").is_file());

    let mut weight_files = Vec::new();
    for run in 0..2 {
        let w = dir.path().join(format!("w{run}.bin"));
        let out = unifiq(&[
            "train",
            "--data",
            s(&data),
            "--mode",
            "joint",
            "--epochs",
            "2",
            "--seed",
            "1",
            "--out",
            s(&w),
            "--batch",
            "4",
            "--lr",
            "1e-3",
            "--tmax",
            "2",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(stderr(&out).lines().filter(|l| l.starts_with("epoch")).count(), 2);
        weight_files.push(fs::read(&w).unwrap());
    }
    assert_eq!(weight_files[0], weight_files[1]);

    let w = dir.path().join("w0.bin");
    let mut reports = Vec::new();
    for run in 0..2 {
        let r = dir.path().join(format!("r{run}.json"));
        let out = unifiq(&[
            "eval",
            "--data",
            s(&data),
            "--weights",
            s(&w),
            "--mode",
            "fr",
            "--crops",
            "2",
            "--seed",
            "4",
            "--report",
            s(&r),
            "--consistency",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let text = fs::read_to_string(&r).unwrap();
        assert_eq!(stdout(&out), text);
        reports.push(text);
    }
    assert_eq!(reports[0], reports[1]);
    for key in ["plcc", "srocc", "mse_fr_nr", "n", "mode", "seed", "crops"] {
        assert!(reports[0].contains(&format!("\"{key}\":")), "{key}");
    }
    assert!(reports[0].contains("\"mode\": \"fr\""));
    assert!(!reports[0].contains("null"));

    let bad = unifiq(&["train", "--data", s(&data), "--mode", "both", "--out", s(&w)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn grad_check_passes_on_fresh_weights() {
    let out = unifiq(&["grad-check", "--seed", "2", "--per-param", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let err: f64 = stdout(&out).trim().parse().unwrap();
    assert!(err < 1e-3);
}

#[test]
fn dump_maps_writes_fourteen_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.ppm");
    let reference = dir.path().join("b.ppm");
    unifiq_core::datagen::gen_base_image(1, 64)
        .unwrap()
        .write_ppm(&img)
        .unwrap();
    unifiq_core::datagen::gen_base_image(2, 64)
        .unwrap()
        .write_ppm(&reference)
        .unwrap();
    let w = dir.path().join("w.bin");
    tied_weights(&w);
    let maps = dir.path().join("maps");
    let out = unifiq(&[
        "dump-maps",
        "--image",
        s(&img),
        "--ref",
        s(&reference),
        "--weights",
        s(&w),
        "--out",
        s(&maps),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 14);
    assert_eq!(fs::read_dir(&maps).unwrap().count(), 14);
}
