//! k-shot trial protocol: sample training images, train, score every test
//! image, report AUC with the class's own test images as positives.
//!
//! Datasets are laid out as `<root>/<class>/{train,test}/<image files>`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgpipe::{equalize_histogram, load_image, probe_channels, Image};
use crate::scorer::{anomaly_score, default_fraction, defect_score, mse_baseline_score, ScoreOptions};
use crate::trainer::{stream, train_stack, TrainConfig, Variant, STREAM_SUBSET};

/// Mann-Whitney AUC with normal samples as positives: the fraction of
/// (normal, anomalous) pairs where the normal one scores higher, ties
/// counting half.
pub fn auc(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::validation("AUC needs at least one score of each kind"));
    }
    if normal.iter().chain(anomalous).any(|v| v.is_nan()) {
        return Err(Error::validation("AUC scores contain NaN"));
    }
    // Rank-sum over the sorted anomalous scores: per normal score, count
    // strictly lower and equal anomalous scores by binary search.
    let mut neg = anomalous.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0f64;
    for &s in normal {
        let below = neg.partition_point(|&v| v < s);
        let not_above = neg.partition_point(|&v| v <= s);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (normal.len() as f64 * anomalous.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Anomaly,
    Defect,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Anomaly => "anomaly",
            ScoreMode::Defect => "defect",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anomaly" => Ok(ScoreMode::Anomaly),
            "defect" => Ok(ScoreMode::Defect),
            _ => Err(Error::validation(format!("unknown score mode `{s}`"))),
        }
    }
}

/// Training plus scoring settings of a trial.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialConfig {
    pub train: TrainConfig,
    pub mode: ScoreMode,
    /// Defect-score patch fraction; `None` picks the per-k default.
    pub fraction: Option<f64>,
    pub score: ScoreOptions,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if known && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Class directories under `root` that have a `test` split, sorted.
pub fn class_names(root: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", root.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.join("test").is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Load, resize to the working resolution and equalize.
pub fn preprocess(path: &Path, channels: usize, resolution: usize) -> Result<Image> {
    Ok(equalize_histogram(&load_image(path, channels, resolution)?))
}

/// Indices of the `k` training images for a trial, in draw order.
pub fn sample_subset(candidates: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > candidates {
        return Err(Error::Dataset(format!(
            "need {k} training images, found {candidates}"
        )));
    }
    let mut rng = stream(seed, STREAM_SUBSET);
    Ok(rand::seq::index::sample(&mut rng, candidates, k).into_vec())
}

/// Test images of every class, split into (normal, anomalous).
fn test_split(root: &Path, class: &str) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let classes = class_names(root)?;
    if !classes.iter().any(|c| c == class) {
        return Err(Error::Dataset(format!(
            "class `{class}` has no test split under {}",
            root.display()
        )));
    }
    let (mut normal, mut anomalous) = (Vec::new(), Vec::new());
    for c in &classes {
        let files = list_images(&root.join(c).join("test"))?;
        if c == class {
            normal = files;
        } else {
            anomalous.extend(files);
        }
    }
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::Dataset("test split needs normal and anomalous images".into()));
    }
    Ok((normal, anomalous))
}

/// One trial: train on `k` seeded-random images of `class`, score all test
/// images, return the AUC.
pub fn run_trial(
    root: &Path,
    class: &str,
    k: usize,
    seed: u64,
    cfg: &TrialConfig,
    log: &mut dyn FnMut(&str),
) -> Result<f64> {
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.for_variant()
    };
    train_cfg.validate()?;
    let candidates = list_images(&root.join(class).join("train"))?;
    let picks = sample_subset(candidates.len(), k, seed)?;
    let chosen: Vec<&PathBuf> = picks.iter().map(|&i| &candidates[i]).collect();
    let (normal, anomalous) = test_split(root, class)?;
    let channels = probe_channels(chosen[0])?;
    let res = train_cfg.max_resolution;
    let train: Vec<Image> = chosen
        .iter()
        .map(|p| preprocess(p, channels, res))
        .collect::<Result<_>>()?;

    let score_all = |paths: &[PathBuf], score: &dyn Fn(&Image) -> Result<f64>| {
        paths
            .iter()
            .map(|p| score(&preprocess(p, channels, res)?))
            .collect::<Result<Vec<f64>>>()
    };

    let (pos, neg) = if train_cfg.variant == Variant::F {
        let score = |img: &Image| mse_baseline_score(&train, img);
        (score_all(&normal, &score)?, score_all(&anomalous, &score)?)
    } else {
        let ids = chosen.iter().map(|p| p.display().to_string()).collect();
        let stack = train_stack(&train, ids, &train_cfg, log)?;
        let fraction = cfg.fraction.unwrap_or_else(|| default_fraction(k));
        let score = |img: &Image| match cfg.mode {
            ScoreMode::Anomaly => anomaly_score(&stack, img, &cfg.score),
            ScoreMode::Defect => defect_score(&stack, img, fraction, &cfg.score),
        };
        (score_all(&normal, &score)?, score_all(&anomalous, &score)?)
    };
    let value = auc(&pos, &neg)?;
    log(&format!("class {class} k {k} seed {seed} variant {} auc {value:.4}", train_cfg.variant));
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialSummary {
    pub class: String,
    pub k: usize,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl TrialSummary {
    pub fn new(class: &str, k: usize, variant: Variant, seeds: Vec<u64>, aucs: Vec<f64>) -> Self {
        let n = aucs.len().max(1) as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        TrialSummary {
            class: class.to_string(),
            k,
            variant,
            seeds,
            aucs,
            mean,
            std: var.sqrt(),
        }
    }
}

/// `n_trials` trials with seeds `seed0..seed0 + n_trials`, where `seed0`
/// is the configured training seed.
pub fn run_trials(
    root: &Path,
    class: &str,
    k: usize,
    n_trials: usize,
    cfg: &TrialConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrialSummary> {
    if n_trials == 0 {
        return Err(Error::validation("need at least one trial"));
    }
    let seeds: Vec<u64> = (0..n_trials as u64).map(|t| cfg.train.seed + t).collect();
    let aucs = seeds
        .iter()
        .map(|&s| run_trial(root, class, k, s, cfg, log))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialSummary::new(class, k, cfg.train.variant, seeds, aucs))
}

/// Trials of one ablation variant.
pub fn run_ablation(
    root: &Path,
    class: &str,
    k: usize,
    variant: Variant,
    n_trials: usize,
    cfg: &TrialConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrialSummary> {
    let mut cfg = cfg.clone();
    cfg.train.variant = variant;
    run_trials(root, class, k, n_trials, &cfg, log)
}

/// Per-trial rows `class,k,variant,trial,seed,auc`, then one summary row
/// `class,k,variant,mean,std` per summary.
pub fn write_results<W: std::io::Write>(out: W, summaries: &[TrialSummary]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["class", "k", "variant", "trial", "seed", "auc"]).map_err(csv_err)?;
    for s in summaries {
        for (t, (seed, a)) in s.seeds.iter().zip(&s.aucs).enumerate() {
            w.write_record([
                s.class.clone(),
                s.k.to_string(),
                s.variant.to_string(),
                t.to_string(),
                seed.to_string(),
                a.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([
            s.class.clone(),
            s.k.to_string(),
            s.variant.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[0.3; 2]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4], &[0.5]).unwrap(), 0.5);
        assert!(auc(&[], &[0.1]).is_err());
        assert!(auc(&[0.1], &[f64::NAN]).is_err());
    }

    #[test]
    fn summary_uses_population_std() {
        let s = TrialSummary::new("c", 1, Variant::Full, vec![0, 1], vec![0.6, 0.8]);
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.std - 0.1).abs() < 1e-15);
        let one = TrialSummary::new("c", 1, Variant::Full, vec![0], vec![0.6]);
        assert_eq!(one.std, 0.0);
    }

    #[test]
    fn subsets_are_seeded_and_distinct() {
        let a = sample_subset(20, 5, 7).unwrap();
        assert_eq!(a, sample_subset(20, 5, 7).unwrap());
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        assert!(sample_subset(3, 4, 0).is_err());
    }

    #[test]
    fn results_csv_layout() {
        let s = TrialSummary::new("7", 1, Variant::B, vec![3, 4], vec![0.5, 1.0]);
        let mut buf = Vec::new();
        write_results(&mut buf, &[s]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,k,variant,trial,seed,auc");
        assert_eq!(lines[1], "7,1,b,0,3,0.5");
        assert_eq!(lines[3], "7,1,b,0.75,0.25");
    }
}
