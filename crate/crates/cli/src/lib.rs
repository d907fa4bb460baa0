//! Command-line front end: argument parsing, config files and dispatch.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation
//! errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use htdg::checkpoint::{load_stack, save_stack};
use htdg::evalharness::{list_images, preprocess, run_ablation, sample_subset, write_results, ScoreMode, TrialConfig};
use htdg::imgpipe::{probe_channels, save_png};
use htdg::nets::NormMode;
use htdg::scorer::{anomaly_score, default_fraction, defect_map, defect_score, save_map_png, write_raw_map, ScoreOptions};
use htdg::trainer::{generate_sample, stream, train_stack, ModelStack, TrainConfig, Variant};
use htdg::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Key used for the generation stream so samples never reuse training draws.
const GENERATE_STREAM: u64 = 5 << 40;

#[derive(Parser, Debug)]
#[command(name = "htdg", version, about = "Few-shot anomaly detection with transformation-discriminating patch GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model stack on k images of one class.
    Train(TrainArgs),
    /// Score every image in a directory with a trained stack.
    Score(ScoreArgs),
    /// Run k-shot trials and report AUCs.
    Eval(EvalArgs),
    /// Write the defect-localization map of one image.
    Visualize(VisualizeArgs),
    /// Draw random samples from a trained stack.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root holding <class>/train and <class>/test.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    class: String,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score the lowest-vote patch fraction instead of all patches.
    #[arg(long)]
    defect: bool,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    class: String,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value = "full")]
    variant: String,
    /// First trial seed; trial t uses seed + t.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    defect: bool,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fraction: Option<f64>,
    /// Also dump the raw float map here.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Index of the training image to condition on.
    #[arg(long)]
    i: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Optional settings file; every key overrides a default.
#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub r: Option<f64>,
    pub max_resolution: Option<usize>,
    pub min_resolution: Option<usize>,
    pub iters_per_scale: Option<usize>,
    pub d_steps: Option<usize>,
    pub g_steps: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub alpha: Option<f64>,
    pub transform_chunk: Option<usize>,
    pub score_fraction: Option<f64>,
    pub per_scale_mean: Option<bool>,
    pub variant: Option<Variant>,
    pub hidden_width: Option<usize>,
    pub sigma0: Option<f64>,
    /// `instance` or `running`.
    pub score_norm: Option<String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                FileConfig::parse(&text)
            }
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            r: self.r.unwrap_or(d.r),
            max_resolution: self.max_resolution.unwrap_or(d.max_resolution),
            min_resolution: self.min_resolution.unwrap_or(d.min_resolution),
            iters_per_scale: self.iters_per_scale.unwrap_or(d.iters_per_scale),
            d_steps: self.d_steps.unwrap_or(d.d_steps),
            g_steps: self.g_steps.unwrap_or(d.g_steps),
            lr: self.lr.unwrap_or(d.lr),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            alpha: self.alpha.unwrap_or(d.alpha),
            sigma0: self.sigma0.unwrap_or(d.sigma0),
            transform_chunk: self.transform_chunk.unwrap_or(d.transform_chunk),
            hidden_width: self.hidden_width.unwrap_or(d.hidden_width),
            seed,
            variant: self.variant.unwrap_or(d.variant),
        }
    }

    pub fn score_options(&self) -> Result<ScoreOptions> {
        let norm = match self.score_norm.as_deref() {
            None | Some("instance") => NormMode::Instance,
            Some("running") => NormMode::Running,
            Some(other) => return Err(Error::Config(format!("unknown score_norm `{other}`"))),
        };
        Ok(ScoreOptions {
            per_scale_mean: self.per_scale_mean.unwrap_or(false),
            norm,
        })
    }
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`.
pub fn run_command<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a, out),
        Command::Score(a) => score(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Visualize(a) => visualize(a, out),
        Command::Generate(a) => generate(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let cfg = file.train_config(a.seed).for_variant();
    if cfg.variant == Variant::F {
        return Err(Error::Config(
            "variant f has no trainable model; use `eval --variant f`".into(),
        ));
    }
    cfg.validate()?;
    let candidates = list_images(&a.data.join(&a.class).join("train"))?;
    let picks = sample_subset(candidates.len(), a.k, a.seed)?;
    let chosen: Vec<&PathBuf> = picks.iter().map(|&i| &candidates[i]).collect();
    let channels = probe_channels(chosen[0])?;
    let images = chosen
        .iter()
        .map(|p| preprocess(p, channels, cfg.max_resolution))
        .collect::<Result<Vec<_>>>()?;
    let ids = chosen.iter().map(|p| p.display().to_string()).collect();

    fs::create_dir_all(&a.out)?;
    let mut log_file = fs::File::create(a.out.join("train.log"))?;
    let mut log = |line: &str| {
        let _ = writeln!(out, "{line}");
        let _ = writeln!(log_file, "{line}");
    };
    let stack = train_stack(&images, ids, &cfg, &mut log)?;
    save_stack(&stack, &a.out)?;
    writeln!(out, "saved {} scales to {}", stack.scales.len(), a.out.display())?;
    Ok(())
}

fn finest_side(stack: &ModelStack) -> usize {
    stack.meta.sizes[stack.meta.finest_index()][0]
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let opts = file.score_options()?;
    let stack = load_stack(&a.model)?;
    stack.require_trained()?;
    let fraction = a
        .fraction
        .or(file.score_fraction)
        .unwrap_or_else(|| default_fraction(stack.meta.k));
    let paths = list_images(&a.images)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_error)?;
    w.write_record(["path", "score"]).map_err(csv_error)?;
    for p in &paths {
        let img = preprocess(p, stack.meta.channels, finest_side(&stack))?;
        let s = if a.defect {
            defect_score(&stack, &img, fraction, &opts)?
        } else {
            anomaly_score(&stack, &img, &opts)?
        };
        w.write_record([p.display().to_string(), s.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    writeln!(out, "scored {} images into {}", paths.len(), a.out.display())?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let variant: Variant = a.variant.parse()?;
    let cfg = TrialConfig {
        train: file.train_config(a.seed),
        mode: if a.defect { ScoreMode::Defect } else { ScoreMode::Anomaly },
        fraction: a.fraction.or(file.score_fraction),
        score: file.score_options()?,
    };
    let mut log = |line: &str| {
        let _ = writeln!(out, "{line}");
    };
    let summary = run_ablation(&a.data, &a.class, a.k, variant, a.trials, &cfg, &mut log)?;
    let f = fs::File::create(&a.out)?;
    write_results(f, std::slice::from_ref(&summary))?;
    writeln!(
        out,
        "class {} k {} variant {}: auc {:.4} +- {:.4} over {} trials",
        summary.class,
        summary.k,
        summary.variant,
        summary.mean,
        summary.std,
        summary.aucs.len()
    )?;
    Ok(())
}

fn visualize(a: VisualizeArgs, out: &mut dyn Write) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let opts = file.score_options()?;
    let stack = load_stack(&a.model)?;
    let fraction = a
        .fraction
        .or(file.score_fraction)
        .unwrap_or_else(|| default_fraction(stack.meta.k));
    let img = preprocess(&a.image, stack.meta.channels, finest_side(&stack))?;
    let map = defect_map(&stack, &img, fraction, &opts)?;
    save_map_png(&map, &a.out)?;
    if let Some(raw) = &a.raw {
        write_raw_map(&map, raw)?;
    }
    writeln!(out, "wrote {}x{} map to {}", map.height, map.width, a.out.display())?;
    Ok(())
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let stack = load_stack(&a.model)?;
    if !stack.meta.variant().has_generator() {
        return Err(Error::Validation(format!(
            "variant {} has no generator",
            stack.meta.variant()
        )));
    }
    fs::create_dir_all(&a.out)?;
    let mut rng = stream(a.seed, GENERATE_STREAM);
    for s in 0..a.count {
        let img = generate_sample(&stack, a.i, &mut rng)?;
        save_png(&img, &a.out.join(format!("sample_{:03}_{s:04}.png", a.i)))?;
    }
    writeln!(out, "wrote {} samples to {}", a.count, a.out.display())?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
