//! Trial plumbing on tiny datasets written to a temporary directory.

use std::path::Path;
use std::time::Instant;

use htdg::evalharness::{
    class_names, run_trial, run_trials, sample_subset, write_results, TrialConfig, TrialSummary,
};
use htdg::imgpipe::{byte_to_unit, save_png, Image};
use htdg::trainer::{TrainConfig, Variant};
use htdg::Error;

fn write_constant(dir: &Path, name: &str, byte: u8) {
    std::fs::create_dir_all(dir).unwrap();
    save_png(&Image::filled(1, 12, byte_to_unit(byte as f32)).unwrap(), &dir.join(name)).unwrap();
}

/// Two classes of constant gray images: `normal` around `base`, `shifted`
/// the same bytes plus `shift`.
fn shift_dataset(root: &Path, base: u8, shift: u8) {
    for (class, offset) in [("normal", 0u8), ("shifted", shift)] {
        for (split, count) in [("train", 4u8), ("test", 6)] {
            for n in 0..count {
                write_constant(&root.join(class).join(split), &format!("{n}.png"), base + offset + n);
            }
        }
    }
}

fn desk(iters: usize) -> TrialConfig {
    TrialConfig {
        train: TrainConfig {
            max_resolution: 12,
            min_resolution: 12,
            iters_per_scale: iters,
            d_steps: 1,
            g_steps: 1,
            hidden_width: 8,
            ..TrainConfig::default()
        },
        ..TrialConfig::default()
    }
}

#[test]
fn mse_baseline_separates_a_shifted_class_quickly() {
    let dir = tempfile::tempdir().unwrap();
    shift_dataset(dir.path(), 100, 60);
    let cfg = TrialConfig {
        train: TrainConfig { variant: Variant::F, ..TrainConfig::default() },
        ..TrialConfig::default()
    };
    let start = Instant::now();
    let auc = run_trial(dir.path(), "normal", 1, 3, &cfg, &mut |_| {}).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0, "{:?}", start.elapsed());
    assert_eq!(auc, 1.0);
}

#[test]
fn constant_classes_tie_under_the_vote_score() {
    // Every transformation leaves a constant image unchanged, so each patch's
    // votes are one softmax spread over all real classes and sum to exactly 1.
    // Black and white then score the same whatever the networks learned.
    let dir = tempfile::tempdir().unwrap();
    for (class, byte) in [("black", 0u8), ("white", 255u8)] {
        for split in ["train", "test"] {
            for n in 0..3 {
                write_constant(&dir.path().join(class).join(split), &format!("{n}.png"), byte);
            }
        }
    }
    assert_eq!(class_names(dir.path()).unwrap(), vec!["black", "white"]);
    let auc = run_trial(dir.path(), "black", 1, 0, &desk(40), &mut |_| {}).unwrap();
    assert_eq!(auc, 0.5);
}

#[test]
fn dataset_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    shift_dataset(dir.path(), 100, 60);
    let cfg = TrialConfig {
        train: TrainConfig { variant: Variant::F, ..TrainConfig::default() },
        ..TrialConfig::default()
    };
    assert!(matches!(run_trial(dir.path(), "normal", 5, 0, &cfg, &mut |_| {}), Err(Error::Dataset(_))));
    assert!(matches!(run_trial(dir.path(), "absent", 1, 0, &cfg, &mut |_| {}), Err(Error::Dataset(_))));
    std::fs::remove_dir_all(dir.path().join("shifted").join("test")).unwrap();
    assert!(matches!(run_trial(dir.path(), "normal", 1, 0, &cfg, &mut |_| {}), Err(Error::Dataset(_))));
}

#[test]
fn subsets_are_seeded_and_distinct() {
    let a = sample_subset(20, 5, 11).unwrap();
    assert_eq!(a, sample_subset(20, 5, 11).unwrap());
    let mut sorted = a.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 5);
    assert!(a.iter().all(|&i| i < 20));
    assert!(sample_subset(3, 4, 0).is_err());
}

#[test]
fn trials_use_consecutive_seeds_and_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    shift_dataset(dir.path(), 90, 70);
    let mut cfg = TrialConfig {
        train: TrainConfig { variant: Variant::F, ..TrainConfig::default() },
        ..TrialConfig::default()
    };
    cfg.train.seed = 40;
    let summary = run_trials(dir.path(), "normal", 2, 3, &cfg, &mut |_| {}).unwrap();
    assert_eq!(summary.seeds, vec![40, 41, 42]);
    assert_eq!(summary.mean, 1.0);
    assert_eq!(summary.std, 0.0);

    let spread = TrialSummary::new("c", 1, Variant::Full, vec![0, 1], vec![0.5, 0.7]);
    assert!((spread.mean - 0.6).abs() < 1e-12 && (spread.std - 0.1).abs() < 1e-12);

    let mut out = Vec::new();
    write_results(&mut out, &[summary]).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class,k,variant,trial,seed,auc");
    assert_eq!(lines[1], "normal,2,f,0,40,1");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[4], "normal,2,f,1,0");
}
