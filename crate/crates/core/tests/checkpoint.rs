//! Checkpoint round trips and damage reporting.

use std::fs;

use htdg::checkpoint::{load_stack, parse_manifest, save_stack};
use htdg::imgpipe::{Image, Planes};
use htdg::scorer::{anomaly_score, ScoreOptions};
use htdg::trainer::{train_stack, TrainConfig};
use htdg::Error;

fn trained() -> htdg::trainer::ModelStack {
    let data = (0..256).map(|p| ((p * 37 % 256) as f32 / 127.5) - 1.0).collect();
    let img = Image::new(Planes::new(1, 16, 16, data).unwrap()).unwrap();
    let cfg = TrainConfig {
        max_resolution: 16,
        min_resolution: 12,
        iters_per_scale: 3,
        d_steps: 1,
        g_steps: 1,
        hidden_width: 6,
        ..TrainConfig::default()
    };
    train_stack(&[img], vec!["a.png".into()], &cfg, &mut |_| {}).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let stack = trained();
    let dir = tempfile::tempdir().unwrap();
    let (first, second) = (dir.path().join("one"), dir.path().join("two"));
    save_stack(&stack, &first).unwrap();
    let back = load_stack(&first).unwrap();
    assert_eq!(back, stack);
    save_stack(&back, &second).unwrap();

    let mut names: Vec<String> = fs::read_dir(&first)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["d_0.bin", "d_1.bin", "g_0.bin", "g_1.bin", "manifest.toml", "z_star.bin"]);
    for name in &names {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }

    let manifest = parse_manifest(&fs::read_to_string(first.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest.sigmas.len(), 2);
    assert_eq!(manifest.meta.config.alpha, 100.0);

    let probe = Image::filled(1, 16, 0.25).unwrap();
    let opts = ScoreOptions::default();
    assert_eq!(
        anomaly_score(&stack, &probe, &opts).unwrap().to_bits(),
        anomaly_score(&back, &probe, &opts).unwrap().to_bits()
    );
}

#[test]
fn damaged_blobs_are_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    save_stack(&trained(), dir.path()).unwrap();
    let path = dir.path().join("d_1.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match load_stack(dir.path()) {
        Err(e @ Error::Format { .. }) => assert!(e.to_string().contains("d_1.bin"), "{e}"),
        other => panic!("expected a format error, got {other:?}"),
    }

    let mut wrong_magic = bytes.clone();
    wrong_magic[..4].copy_from_slice(b"NOPE");
    fs::write(&path, &wrong_magic).unwrap();
    assert!(load_stack(dir.path()).unwrap_err().to_string().contains("d_1.bin"));

    let mut wrong_version = bytes;
    wrong_version[4] = 9;
    fs::write(&path, &wrong_version).unwrap();
    assert!(load_stack(dir.path()).unwrap_err().to_string().contains("version"));
}

#[test]
fn manifest_edits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_stack(&trained(), dir.path()).unwrap();
    let path = dir.path().join("manifest.toml");
    let text = fs::read_to_string(&path).unwrap();

    fs::write(&path, text.replacen("format = 1", "format = 2", 1)).unwrap();
    assert!(matches!(load_stack(dir.path()), Err(Error::Format { .. })));

    fs::write(&path, format!("surprise = true\n{text}")).unwrap();
    assert!(load_stack(dir.path()).is_err());

    fs::write(&path, &text).unwrap();
    fs::remove_file(dir.path().join("g_0.bin")).unwrap();
    assert!(load_stack(dir.path()).unwrap_err().to_string().contains("g_0.bin"));
}
