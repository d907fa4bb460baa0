//! End-to-end runs of the command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use htdg::scorer::decode_raw_map;
use htdg_cli::{run_command, FileConfig};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/two_class")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["htdg"];
    argv.extend_from_slice(args);
    let code = run_command(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn listing(dir: &Path) -> Vec<(PathBuf, u64)> {
    let mut all = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            all.extend(listing(&path));
        } else {
            all.push((path.clone(), fs::metadata(&path).unwrap().len()));
        }
    }
    all.sort();
    all
}

const SMALL: &str = "max_resolution = 32\niters_per_scale = 50\nd_steps = 1\ng_steps = 1\nhidden_width = 8\n";

#[test]
fn help_and_usage_errors() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train") && out.contains("visualize"));
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(!err.is_empty());
    assert_eq!(run(&["train", "--class", "x"]).0, 1);
    assert_eq!(run(&["score", "--model", "m"]).0, 1);

    let status = Command::new(env!("CARGO_BIN_EXE_htdg")).arg("frobnicate").output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = Command::new(env!("CARGO_BIN_EXE_htdg")).arg("--version").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
}

#[test]
fn config_files_reject_unknown_keys() {
    assert!(FileConfig::parse("iters_per_scale = 3\nalpha = 10.0").is_ok());
    assert!(FileConfig::parse("iters_per_sclae = 3").is_err());
    assert!(FileConfig::parse("variant = \"zzz\"").is_err());

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let data = fixtures();
    let (code, _, err) = run(&[
        "train", "--data", data.to_str().unwrap(), "--class", "texture", "--k", "1",
        "--out", dir.path().join("m").to_str().unwrap(), "--config", cfg.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let (code, _, err) = run(&[
        "score", "--model", missing.to_str().unwrap(), "--images", ".", "--out", "x.csv",
    ]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"));
    let data = fixtures();
    let (code, _, _) = run(&[
        "eval", "--data", data.to_str().unwrap(), "--class", "texture", "--k", "50",
        "--variant", "f", "--out", dir.path().join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn mse_baseline_eval_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures();
    let results = dir.path().join("results.csv");
    let (code, out, err) = run(&[
        "eval", "--data", data.to_str().unwrap(), "--class", "texture", "--k", "1",
        "--trials", "2", "--variant", "f", "--out", results.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("variant f"));
    let text = fs::read_to_string(results).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().starts_with("texture,1,f,"));
}

#[test]
fn train_score_visualize_generate() {
    let data = fixtures();
    let before = listing(&data);
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let model = dir.path().join("model");

    let (code, out, err) = run(&[
        "train", "--data", data.to_str().unwrap(), "--class", "texture", "--k", "1", "--seed", "2",
        "--out", model.to_str().unwrap(), "--config", config.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("iter 50"));
    let manifest = htdg::checkpoint::parse_manifest(&fs::read_to_string(model.join("manifest.toml")).unwrap()).unwrap();
    let scales = manifest.sigmas.len();
    let files: Vec<String> = fs::read_dir(&model)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let count = |prefix: &str| files.iter().filter(|f| f.starts_with(prefix) && f.ends_with(".bin")).count();
    assert!(scales > 1);
    assert_eq!(count("g_"), scales);
    assert_eq!(count("d_"), scales);
    assert_eq!(count("z_star"), 1);
    assert_eq!(manifest.meta.config.iters_per_scale, 50);

    let scores = dir.path().join("scores.csv");
    let images = data.join("inverted").join("test");
    let (code, _, err) = run(&[
        "score", "--model", model.to_str().unwrap(), "--images", images.to_str().unwrap(),
        "--out", scores.to_str().unwrap(), "--defect", "--fraction", "0.1",
    ]);
    assert_eq!(code, 0, "{err}");
    let mut reader = csv::Reader::from_path(&scores).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["path", "score"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), fs::read_dir(&images).unwrap().count());
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));

    let (png, raw) = (dir.path().join("map.png"), dir.path().join("map.bin"));
    let probe = images.join(fs::read_dir(&images).unwrap().next().unwrap().unwrap().file_name());
    let (code, _, err) = run(&[
        "visualize", "--model", model.to_str().unwrap(), "--image", probe.to_str().unwrap(),
        "--out", png.to_str().unwrap(), "--raw", raw.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let map = decode_raw_map(&fs::read(&raw).unwrap()).unwrap();
    assert_eq!((map.height, map.width), (32, 32));
    assert!(png.exists());

    let samples = dir.path().join("samples");
    let (code, _, err) = run(&[
        "generate", "--model", model.to_str().unwrap(), "--i", "0", "--count", "2",
        "--out", samples.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read_dir(&samples).unwrap().count(), 2);
    assert_eq!(run(&["generate", "--model", model.to_str().unwrap(), "--i", "1", "--out", samples.to_str().unwrap()]).0, 2);

    assert_eq!(listing(&data), before);
}
