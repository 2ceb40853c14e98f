//! Command-line front end: dataset generation, training, evaluation, method
//! comparison, and weight-curve export.
//!
//! All five commands resolve a single flat key=value [`RunConfig`] from an
//! optional `--config` file plus flag overrides, then echo the fully
//! resolved configuration to `resolved.cfg` in the output directory before
//! doing any work, so every run can be reproduced from its own output.
//! Randomized commands (`gen-data`, `train`) insist on an explicit seed;
//! nothing is ever seeded from the clock.
//!
//! Exit codes are a stable contract: 0 success, 1 usage or configuration
//! error, 2 data or format error, 3 numerical failure.

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::loss::{weight, LossConfig, WeightMode};
use crate::metrics::{
    paired_t_test, read_metrics_csv, write_comparison_csv, write_metrics_csv, ComparisonRow,
    MetricRow,
};
use crate::network::{Network, NetworkSpec, Variant};
use crate::training::{self, Hyperparams};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Salt folded into the seed for the train/val/test partition, so the
/// split, the weight initialization, and the training loop each consume an
/// independent deterministic stream.
const SPLIT_SALT: u64 = 0x53504c4954;
/// Salt folded into the seed for network weight initialization.
const INIT_SALT: u64 = 0x494e4954;

pub const RESOLVED_CONFIG_NAME: &str = "resolved.cfg";
pub const WEIGHT_CURVE_HEADER: &str = "beta,p,w";

/// The flat configuration shared by every command. Each key has the
/// documented default below; a config file may set any subset and flags
/// override the file. Unknown keys are rejected.
///
/// | key | default | meaning |
/// |---|---|---|
/// | `variant` | `plain` | network variant: `plain` or `bru` |
/// | `depth` | `4` | pooling stages (2–3 recommended at desk scale) |
/// | `base_channels` | `16` | channels of the first layer |
/// | `num_classes` | `3` | output classes |
/// | `dropout_rate` | `0.25` | dropout after contracting/bottleneck layers |
/// | `input_channels` | `1` | image channels |
/// | `batch_size` | `5` | samples per optimization step |
/// | `learning_rate` | `0.001` | Adam learning rate |
/// | `epochs` | `400` | training epochs |
/// | `iterations_per_epoch` | `auto` | batches per epoch (`auto` = one pass) |
/// | `loss` | `feedback` | weight mode: `uniform` or `feedback` |
/// | `beta` | `3` | feedback-weight exponent |
/// | `adam_beta1` | `0.9` | Adam first-moment decay |
/// | `adam_beta2` | `0.999` | Adam second-moment decay |
/// | `adam_epsilon` | `1e-8` | Adam denominator offset |
/// | `height` | `64` | generated image height |
/// | `width` | `64` | generated image width |
/// | `small_fraction` | `0.02` | target small-class pixel fraction |
/// | `noise_std` | `0.05` | intensity noise standard deviation |
/// | `contrast` | `0.12` | mean-intensity step between classes |
/// | `count` | `50` | samples to generate |
/// | `n_train` | `35` | training-split size |
/// | `n_val` | `5` | validation-split size (the rest is test) |
/// | `manifest` | *(empty)* | dataset manifest; empty = `{out}/manifest.csv` |
/// | `model` | *(empty)* | model file; empty = `{out}/model.funet` |
/// | `out` | `out` | output directory |
/// | `eval_split` | `all` | rows to evaluate: `all`, `train`, `val`, `test` |
/// | `include_background` | `false` | also score the background class |
/// | `metrics_a` | *(empty)* | first metrics CSV for `compare` |
/// | `metrics_b` | *(empty)* | second metrics CSV for `compare` |
/// | `method_a` | *(empty)* | label for `metrics_a`; empty = file stem |
/// | `method_b` | *(empty)* | label for `metrics_b`; empty = file stem |
/// | `betas` | `1,2,3,4` | weight-curve exponents |
/// | `points` | `101` | weight-curve samples over `[0, 1]` |
/// | `seed` | *(none)* | RNG seed; must be set explicitly where used |
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub input_channels: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub iterations_per_epoch: Option<usize>,
    pub loss: WeightMode,
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub height: usize,
    pub width: usize,
    pub small_fraction: f64,
    pub noise_std: f64,
    pub contrast: f64,
    pub count: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub manifest: PathBuf,
    pub model: PathBuf,
    pub out: PathBuf,
    pub eval_split: SplitChoice,
    pub include_background: bool,
    pub metrics_a: PathBuf,
    pub metrics_b: PathBuf,
    pub method_a: String,
    pub method_b: String,
    pub betas: Vec<f64>,
    pub points: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

impl SplitChoice {
    fn as_str(self) -> &'static str {
        match self {
            SplitChoice::All => "all",
            SplitChoice::Train => "train",
            SplitChoice::Val => "val",
            SplitChoice::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SplitChoice::All),
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "test" => Ok(SplitChoice::Test),
            _ => Err(Error::Config(format!(
                "expected all, train, val, or test, got {s:?}"
            ))),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Plain,
            depth: 4,
            base_channels: 16,
            num_classes: 3,
            dropout_rate: 0.25,
            input_channels: 1,
            batch_size: 5,
            learning_rate: 0.001,
            epochs: 400,
            iterations_per_epoch: None,
            loss: WeightMode::Feedback,
            beta: 3.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            height: 64,
            width: 64,
            small_fraction: 0.02,
            noise_std: 0.05,
            contrast: 0.12,
            count: 50,
            n_train: 35,
            n_val: 5,
            manifest: PathBuf::new(),
            model: PathBuf::new(),
            out: PathBuf::from("out"),
            eval_split: SplitChoice::All,
            include_background: false,
            metrics_a: PathBuf::new(),
            metrics_b: PathBuf::new(),
            method_a: String::new(),
            method_b: String::new(),
            betas: vec![1.0, 2.0, 3.0, 4.0],
            points: 101,
            seed: None,
        }
    }
}

fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("config key {key}: {e} (got {value:?})")))
}

impl RunConfig {
    /// Set one key from its textual value; errors name the offending key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let fail = |detail: String| Error::Config(format!("config key {key}: {detail}"));
        match key {
            "variant" => self.variant = Variant::parse(value).map_err(|e| fail(e.to_string()))?,
            "depth" => self.depth = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, value)?,
            "input_channels" => self.input_channels = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "iterations_per_epoch" => {
                self.iterations_per_epoch = if value == "auto" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "loss" => self.loss = WeightMode::parse(value).map_err(|e| fail(e.to_string()))?,
            "beta" => self.beta = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "small_fraction" => self.small_fraction = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "contrast" => self.contrast = parse_value(key, value)?,
            "count" => self.count = parse_value(key, value)?,
            "n_train" => self.n_train = parse_value(key, value)?,
            "n_val" => self.n_val = parse_value(key, value)?,
            "manifest" => self.manifest = PathBuf::from(value),
            "model" => self.model = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "eval_split" => self.eval_split = SplitChoice::parse(value).map_err(|e| fail(e.to_string()))?,
            "include_background" => self.include_background = parse_value(key, value)?,
            "metrics_a" => self.metrics_a = PathBuf::from(value),
            "metrics_b" => self.metrics_b = PathBuf::from(value),
            "method_a" => self.method_a = value.to_string(),
            "method_b" => self.method_b = value.to_string(),
            "betas" => {
                self.betas = value
                    .split(',')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<Vec<f64>>>()?;
                if self.betas.is_empty() {
                    return Err(fail("needs at least one value".into()));
                }
            }
            "points" => self.points = parse_value(key, value)?,
            "seed" => self.seed = Some(parse_value(key, value)?),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Layer a key=value file over the current values. Lines are
    /// `key = value`; `#` starts a comment; duplicate keys are rejected.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value, got {line:?}", path.display(), i + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate config key {key:?}",
                    path.display(),
                    i + 1
                )));
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// The full configuration as reloadable key=value text, keys in fixed
    /// order. `seed` appears only when set.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let p = |s: &mut String, k: &str, v: &str| writeln!(s, "{k}={v}").unwrap();
        p(&mut s, "variant", self.variant.as_str());
        p(&mut s, "depth", &self.depth.to_string());
        p(&mut s, "base_channels", &self.base_channels.to_string());
        p(&mut s, "num_classes", &self.num_classes.to_string());
        p(&mut s, "dropout_rate", &self.dropout_rate.to_string());
        p(&mut s, "input_channels", &self.input_channels.to_string());
        p(&mut s, "batch_size", &self.batch_size.to_string());
        p(&mut s, "learning_rate", &self.learning_rate.to_string());
        p(&mut s, "epochs", &self.epochs.to_string());
        let iters = self
            .iterations_per_epoch
            .map_or_else(|| "auto".to_string(), |v| v.to_string());
        p(&mut s, "iterations_per_epoch", &iters);
        p(&mut s, "loss", self.loss.as_str());
        p(&mut s, "beta", &self.beta.to_string());
        p(&mut s, "adam_beta1", &self.adam_beta1.to_string());
        p(&mut s, "adam_beta2", &self.adam_beta2.to_string());
        p(&mut s, "adam_epsilon", &self.adam_epsilon.to_string());
        p(&mut s, "height", &self.height.to_string());
        p(&mut s, "width", &self.width.to_string());
        p(&mut s, "small_fraction", &self.small_fraction.to_string());
        p(&mut s, "noise_std", &self.noise_std.to_string());
        p(&mut s, "contrast", &self.contrast.to_string());
        p(&mut s, "count", &self.count.to_string());
        p(&mut s, "n_train", &self.n_train.to_string());
        p(&mut s, "n_val", &self.n_val.to_string());
        p(&mut s, "manifest", &self.manifest.display().to_string());
        p(&mut s, "model", &self.model.display().to_string());
        p(&mut s, "out", &self.out.display().to_string());
        p(&mut s, "eval_split", self.eval_split.as_str());
        p(&mut s, "include_background", &self.include_background.to_string());
        p(&mut s, "metrics_a", &self.metrics_a.display().to_string());
        p(&mut s, "metrics_b", &self.metrics_b.display().to_string());
        p(&mut s, "method_a", &self.method_a);
        p(&mut s, "method_b", &self.method_b);
        let betas: Vec<String> = self.betas.iter().map(|b| b.to_string()).collect();
        p(&mut s, "betas", &betas.join(","));
        p(&mut s, "points", &self.points.to_string());
        if let Some(seed) = self.seed {
            p(&mut s, "seed", &seed.to_string());
        }
        s
    }

    /// Create the output directory and write `resolved.cfg` into it.
    fn prepare_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.resolved_text()).map_err(|e| Error::io(&path, e))
    }

    fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Usage("this command is randomized: set the seed explicitly (seed=N or --seed N)".into())
        })
    }

    fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            variant: self.variant,
            depth: self.depth,
            base_channels: self.base_channels,
            num_classes: self.num_classes,
            dropout_rate: self.dropout_rate,
            input_channels: self.input_channels,
        }
    }

    fn hyperparams(&self, seed: u64) -> Hyperparams {
        Hyperparams {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            iterations_per_epoch: self.iterations_per_epoch,
            loss: LossConfig { mode: self.loss, beta: self.beta },
            seed,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    fn synth_config(&self, seed: u64) -> data::SynthConfig {
        data::SynthConfig {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            small_fraction: self.small_fraction,
            noise_std: self.noise_std,
            contrast: self.contrast,
            count: self.count,
            seed,
        }
    }

    fn manifest_path(&self) -> PathBuf {
        if self.manifest.as_os_str().is_empty() {
            self.out.join("manifest.csv")
        } else {
            self.manifest.clone()
        }
    }

    fn model_path(&self) -> PathBuf {
        if self.model.as_os_str().is_empty() {
            self.out.join("model.funet")
        } else {
            self.model.clone()
        }
    }
}

// ── argument parsing ────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "funet",
    version,
    about = "Segmentation networks with feedback-weighted cross-entropy, at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key=value configuration file (defaults apply for unset keys)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (config key `out`)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RNG seed; required for randomized commands (config key `seed`)
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// File first, then flags on top.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic nested-ellipse dataset plus manifest
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
        /// Samples to generate (config key `count`)
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a network on a dataset manifest; writes model and logs
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset manifest CSV (config key `manifest`)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Network variant: plain or bru (config key `variant`)
        #[arg(long)]
        variant: Option<String>,
        /// Loss weight mode: uniform or feedback (config key `loss`)
        #[arg(long)]
        loss: Option<String>,
        /// Feedback-weight exponent (config key `beta`)
        #[arg(long)]
        beta: Option<f64>,
        /// Training epochs (config key `epochs`)
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model; writes per-image metrics CSV
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Model file (config key `model`)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset manifest CSV (config key `manifest`)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Which rows to score: all, train, val, or test (config key `eval_split`)
        #[arg(long)]
        split: Option<String>,
        /// Also score the background class (config key `include_background`)
        #[arg(long)]
        include_background: bool,
    },
    /// Paired t-tests between two metrics CSVs, per class
    Compare {
        #[command(flatten)]
        common: ConfigArgs,
        /// First metrics CSV (config key `metrics_a`)
        #[arg(long)]
        metrics_a: Option<PathBuf>,
        /// Second metrics CSV (config key `metrics_b`)
        #[arg(long)]
        metrics_b: Option<PathBuf>,
        /// Label for the first method; defaults to the file stem
        #[arg(long)]
        method_a: Option<String>,
        /// Label for the second method; defaults to the file stem
        #[arg(long)]
        method_b: Option<String>,
    },
    /// Export the feedback-weight curve w(p) for several betas
    WeightCurve {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated exponents (config key `betas`)
        #[arg(long)]
        betas: Option<String>,
        /// Samples over [0, 1] (config key `points`)
        #[arg(long)]
        points: Option<usize>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, count } => {
            let mut cfg = common.resolve()?;
            if let Some(count) = count {
                cfg.count = count;
            }
            cmd_gen_data(&cfg)
        }
        Command::Train { common, manifest, variant, loss, beta, epochs } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = manifest {
                cfg.manifest = m;
            }
            if let Some(v) = &variant {
                cfg.variant = Variant::parse(v)?;
            }
            if let Some(l) = &loss {
                cfg.loss = WeightMode::parse(l)?;
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cmd_train(&cfg)
        }
        Command::Eval { common, model, manifest, split, include_background } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(m) = manifest {
                cfg.manifest = m;
            }
            if let Some(s) = &split {
                cfg.eval_split = SplitChoice::parse(s)?;
            }
            if include_background {
                cfg.include_background = true;
            }
            cmd_eval(&cfg)
        }
        Command::Compare { common, metrics_a, metrics_b, method_a, method_b } => {
            let mut cfg = common.resolve()?;
            if let Some(a) = metrics_a {
                cfg.metrics_a = a;
            }
            if let Some(b) = metrics_b {
                cfg.metrics_b = b;
            }
            if let Some(a) = method_a {
                cfg.method_a = a;
            }
            if let Some(b) = method_b {
                cfg.method_b = b;
            }
            cmd_compare(&cfg)
        }
        Command::WeightCurve { common, betas, points } => {
            let mut cfg = common.resolve()?;
            if let Some(b) = &betas {
                cfg.set("betas", b)?;
            }
            if let Some(p) = points {
                cfg.points = p;
            }
            cmd_weight_curve(&cfg)
        }
    }
}

// ── commands ────────────────────────────────────────────────────────

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.require_seed()?;
    cfg.prepare_out()?;
    let dataset = data::generate(&cfg.synth_config(seed))?;
    let manifest = data::save_dataset(&cfg.out, &dataset)?;
    println!("wrote {} samples to {}", dataset.len(), manifest.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.require_seed()?;
    cfg.prepare_out()?;
    let dataset = data::load_dataset(&cfg.manifest_path(), cfg.num_classes)?;
    let (train_set, val_set, _test) =
        data::split(&dataset, cfg.n_train, cfg.n_val, seed ^ SPLIT_SALT)?;
    let net = Network::build(
        cfg.network_spec(),
        &mut ChaCha8Rng::seed_from_u64(seed ^ INIT_SALT),
    )?;
    let hp = cfg.hyperparams(seed);
    let outcome = training::train(net, &train_set, &val_set, &hp)?;

    let model_path = cfg.model_path();
    outcome.network.save(&model_path)?;
    outcome.log.write_steps_csv(&cfg.out.join("train_log.csv"))?;
    outcome.log.write_validation_csv(&cfg.out.join("validation.csv"))?;

    let last = outcome.log.records.last();
    println!(
        "trained {} {} for {} epochs ({} steps), final loss {}",
        cfg.variant,
        cfg.loss,
        cfg.epochs,
        outcome.log.records.len(),
        last.map_or(f64::NAN, |r| r.loss),
    );
    if let Some((epoch, dice)) = outcome.best {
        println!("best validation epoch {epoch}: mean foreground dice {dice}");
    }
    println!("model={}", model_path.display());
    Ok(())
}

/// Select the configured split of a dataset, reproducing the training
/// partition from the same seed and sizes.
fn select_split(cfg: &RunConfig, dataset: &Dataset) -> Result<Dataset> {
    if cfg.eval_split == SplitChoice::All {
        return Ok(dataset.clone());
    }
    let seed = cfg.require_seed()?;
    let (train_set, val_set, test_set) =
        data::split(dataset, cfg.n_train, cfg.n_val, seed ^ SPLIT_SALT)?;
    Ok(match cfg.eval_split {
        SplitChoice::Train => train_set,
        SplitChoice::Val => val_set,
        SplitChoice::Test => test_set,
        SplitChoice::All => unreachable!(),
    })
}

pub fn class_line(s: &crate::metrics::ClassSummary) -> String {
    format!("class={} dice_mean={} dice_std={}", s.class_id, s.mean, s.std)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    cfg.prepare_out()?;
    let net = Network::load(&cfg.model_path())?;
    let dataset = data::load_dataset(&cfg.manifest_path(), cfg.num_classes)?;
    let subset = select_split(cfg, &dataset)?;
    let report = training::evaluate(&net, &subset, cfg.include_background)?;
    let metrics_path = cfg.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &report.rows)?;
    for s in &report.summaries {
        println!("{}", class_line(s));
    }
    if report.degenerate_rows > 0 {
        println!("degenerate_rows={} (both masks empty, scored 1.0)", report.degenerate_rows);
    }
    println!("metrics={}", metrics_path.display());
    Ok(())
}

/// Pair two metrics files by (class, image) and t-test each class.
pub fn compare_rows(
    a: &[MetricRow],
    b: &[MetricRow],
    method_a: &str,
    method_b: &str,
    b_path: &Path,
) -> Result<Vec<(ComparisonRow, bool)>> {
    let by_class = |rows: &[MetricRow]| {
        let mut map: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
        for r in rows {
            map.entry(r.class_id).or_default().insert(r.image_id.clone(), r.dice);
        }
        map
    };
    let ca = by_class(a);
    let cb = by_class(b);
    if ca.keys().ne(cb.keys()) {
        return Err(Error::format(
            b_path,
            format!(
                "class sets differ: {:?} vs {:?}",
                ca.keys().collect::<Vec<_>>(),
                cb.keys().collect::<Vec<_>>()
            ),
        ));
    }
    let mut out = Vec::new();
    for (class_id, scores_a) in &ca {
        let scores_b = &cb[class_id];
        if scores_a.keys().ne(scores_b.keys()) {
            return Err(Error::format(
                b_path,
                format!("image ids for class {class_id} do not pair up exactly"),
            ));
        }
        let xs: Vec<f64> = scores_a.values().copied().collect();
        let ys: Vec<f64> = scores_b.values().copied().collect();
        let t = paired_t_test(&xs, &ys)?;
        out.push((
            ComparisonRow {
                class_id: *class_id,
                method_a: method_a.to_string(),
                method_b: method_b.to_string(),
                t: t.t,
                df: t.df,
                p: t.p,
            },
            t.degenerate,
        ));
    }
    Ok(out)
}

fn stem_or(path: &Path, fallback: &str) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| fallback.to_string())
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    if cfg.metrics_a.as_os_str().is_empty() || cfg.metrics_b.as_os_str().is_empty() {
        return Err(Error::Usage(
            "compare needs both metrics files (--metrics-a/--metrics-b or config keys)".into(),
        ));
    }
    cfg.prepare_out()?;
    let a = read_metrics_csv(&cfg.metrics_a)?;
    let b = read_metrics_csv(&cfg.metrics_b)?;
    let method_a = if cfg.method_a.is_empty() {
        stem_or(&cfg.metrics_a, "a")
    } else {
        cfg.method_a.clone()
    };
    let method_b = if cfg.method_b.is_empty() {
        stem_or(&cfg.metrics_b, "b")
    } else {
        cfg.method_b.clone()
    };
    let rows = compare_rows(&a, &b, &method_a, &method_b, &cfg.metrics_b)?;
    for (r, degenerate) in &rows {
        println!(
            "class={} t={} df={} p={} degenerate={}",
            r.class_id, r.t, r.df, r.p, degenerate
        );
    }
    let path = cfg.out.join("comparison.csv");
    let bare: Vec<ComparisonRow> = rows.into_iter().map(|(r, _)| r).collect();
    write_comparison_csv(&path, &bare)?;
    println!("comparison={}", path.display());
    Ok(())
}

pub fn cmd_weight_curve(cfg: &RunConfig) -> Result<()> {
    if cfg.points < 2 {
        return Err(Error::Config(format!("points must be at least 2, got {}", cfg.points)));
    }
    for &b in &cfg.betas {
        LossConfig { mode: WeightMode::Feedback, beta: b }.validate()?;
    }
    cfg.prepare_out()?;
    let mut out = String::from(WEIGHT_CURVE_HEADER);
    out.push('\n');
    for &beta in &cfg.betas {
        for i in 0..cfg.points {
            let p = i as f64 / (cfg.points - 1) as f64;
            writeln!(out, "{beta},{p},{}", weight(p, beta)).unwrap();
        }
    }
    let path = cfg.out.join("weight_curve.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {} curves x {} points to {}",
        cfg.betas.len(),
        cfg.points,
        path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_match_documentation() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.variant, Variant::Plain);
        assert_eq!(cfg.depth, 4);
        assert_eq!(cfg.batch_size, 5);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.epochs, 400);
        assert_eq!(cfg.loss, WeightMode::Feedback);
        assert_eq!(cfg.beta, 3.0);
        assert_eq!(cfg.betas, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cfg.points, 101);
        assert_eq!(cfg.seed, None);
    }

    #[test]
    fn config_file_parsing_and_overrides() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(
            &path,
            "# experiment\nvariant = bru\nbeta=2.5\nseed = 7\n\niterations_per_epoch=auto\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.variant, Variant::Bru);
        assert_eq!(cfg.beta, 2.5);
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.iterations_per_epoch, None);
        // Everything unset keeps its default.
        assert_eq!(cfg.depth, 4);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "granularity=9\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("granularity"), "{err}");

        std::fs::write(&path, "beta=1\nbeta=2\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_value_errors_name_the_key() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "small_fraction=lots\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("small_fraction"), "{err}");
    }

    #[test]
    fn resolved_text_reloads_identically() {
        let mut cfg = RunConfig::default();
        cfg.set("variant", "bru").unwrap();
        cfg.set("seed", "42").unwrap();
        cfg.set("manifest", "data/manifest.csv").unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("resolved.cfg");
        std::fs::write(&path, cfg.resolved_text()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn weight_curve_endpoints_and_monotonicity() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out = dir.path().to_path_buf();
        cfg.points = 21;
        cmd_weight_curve(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("weight_curve.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(WEIGHT_CURVE_HEADER));

        let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            curves
                .entry(f[0].to_string())
                .or_default()
                .push((f[1].parse().unwrap(), f[2].parse().unwrap()));
        }
        assert_eq!(curves.len(), 4);
        for (beta, pts) in &curves {
            assert_eq!(pts.first().unwrap().1, 1.0, "beta={beta}: w(0) must be 1");
            assert!((pts.last().unwrap().1 - 0.01).abs() < 1e-12, "beta={beta}: w(1) must be 0.01");
            for pair in pts.windows(2) {
                assert!(pair[1].1 < pair[0].1, "beta={beta}: not strictly decreasing");
            }
        }
        // Larger beta keeps the weight higher at mid-probabilities.
        let at_half = |beta: &str| {
            curves[beta]
                .iter()
                .find(|(p, _)| (*p - 0.5).abs() < 1e-12)
                .unwrap()
                .1
        };
        assert!(at_half("4") > at_half("1"));
    }

    #[test]
    fn compare_pairs_by_image_id() {
        let row = |id: &str, class_id: usize, dice: f64| MetricRow {
            image_id: id.into(),
            class_id,
            dice,
        };
        let a = vec![row("x", 1, 0.9), row("y", 1, 0.8), row("z", 1, 0.7)];
        let b = vec![row("z", 1, 0.6), row("x", 1, 0.9), row("y", 1, 0.5)];
        let rows = compare_rows(&a, &b, "m1", "m2", Path::new("b.csv")).unwrap();
        assert_eq!(rows.len(), 1);
        let (r, degenerate) = &rows[0];
        assert_eq!((r.class_id, r.df), (1, 2));
        assert!(r.t > 0.0, "method a scores higher, so t must be positive");
        assert!(!degenerate);

        let identical = compare_rows(&a, &a, "m1", "m1", Path::new("a.csv")).unwrap();
        assert_eq!(identical[0].0.p, 1.0);
        assert!(identical[0].1, "identical inputs must be flagged degenerate");

        let unmatched = vec![row("x", 1, 0.9), row("y", 1, 0.8), row("w", 1, 0.7)];
        assert!(compare_rows(&a, &unmatched, "m1", "m2", Path::new("b.csv")).is_err());

        let extra_class = vec![row("x", 2, 0.9), row("y", 2, 0.8), row("z", 2, 0.7)];
        assert!(compare_rows(&a, &extra_class, "m1", "m2", Path::new("b.csv")).is_err());
    }

    #[test]
    fn class_line_format() {
        let s = crate::metrics::ClassSummary {
            class_id: 1,
            mean: 0.5,
            std: 0.1,
            n: 4,
            degenerate: false,
        };
        assert_eq!(class_line(&s), "class=1 dice_mean=0.5 dice_std=0.1");
    }

    #[test]
    fn randomized_commands_require_seed() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out = dir.path().to_path_buf();
        let err = cmd_gen_data(&cfg).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err}");
        assert_eq!(err.exit_code(), 1);
    }
}
