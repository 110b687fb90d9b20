//! Run settings: a JSON config file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use kcp_core::data::{load_idx, synth_dataset, Dataset, SynthSpec};
use kcp_core::distill::DistillConfig;
use kcp_core::train::TrainConfig;
use kcp_core::{Criteria, FinetuneMode, PruneConfig};
use serde::{Deserialize, Serialize};

/// Config problems found while assembling a run. Reported all at once.
#[derive(Debug)]
pub struct UsageError(pub Vec<String>);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for UsageError {}

/// Every field may come from `--config` or from a flag; flags win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    /// JSON file supplying any of these settings
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Architecture spec (JSON)
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Training data: idx:IMAGES,LABELS or synth:SEED,N,CLASSES,SIZE,SEP
    #[arg(long)]
    pub data: Option<String>,
    /// Evaluation data, same syntax as --data
    #[arg(long)]
    pub eval_data: Option<String>,
    /// Use only the first N samples of each dataset
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to resume training from
    #[arg(long)]
    pub resume: Option<PathBuf>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Decay the learning rate every N epochs
    #[arg(long)]
    pub lr_step: Option<usize>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,

    /// Target kernel sparsity
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<FinetuneMode>,
    #[arg(long, value_parser = parse_criteria)]
    pub criteria: Option<Criteria>,
    /// Fraction of layers pruned adversarially
    #[arg(long)]
    pub adv_fraction: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub normalize_kernels: bool,
    /// Never prune the last kernel of an output channel
    #[arg(long)]
    #[serde(default)]
    pub guard_full_filters: bool,
    /// Conv layers to prune (comma separated); default all
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,

    /// Teacher checkpoint for feature distillation
    #[arg(long)]
    pub distill: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Layer whose output is distilled; default the layer before the classifier
    #[arg(long)]
    pub tap: Option<usize>,
    /// Scale the distillation loss by T^2
    #[arg(long)]
    #[serde(default)]
    pub t_squared: bool,
}

fn parse_mode(s: &str) -> Result<FinetuneMode, String> {
    match s {
        "soft" => Ok(FinetuneMode::Soft),
        "hard" => Ok(FinetuneMode::Hard),
        _ => Err(format!("expected soft or hard, got {s}")),
    }
}

fn parse_criteria(s: &str) -> Result<Criteria, String> {
    match s {
        "center" => Ok(Criteria::Center),
        "adversarial" => Ok(Criteria::Adversarial),
        _ => Err(format!("expected center or adversarial, got {s}")),
    }
}

impl Settings {
    /// Flags overlaid on the config file named by `--config`, if any.
    pub fn resolve(self) -> anyhow::Result<Settings> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: Settings = serde_json::from_str(&text)
            .map_err(|e| UsageError(vec![format!("{}: {e}", path.display())]))?;
        Ok(self.over(file))
    }

    fn over(self, file: Settings) -> Settings {
        Settings {
            config: self.config,
            arch: self.arch.or(file.arch),
            data: self.data.or(file.data),
            eval_data: self.eval_data.or(file.eval_data),
            limit: self.limit.or(file.limit),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
            resume: self.resume.or(file.resume),
            epochs: self.epochs.or(file.epochs),
            batch_size: self.batch_size.or(file.batch_size),
            lr: self.lr.or(file.lr),
            momentum: self.momentum.or(file.momentum),
            weight_decay: self.weight_decay.or(file.weight_decay),
            lr_step: self.lr_step.or(file.lr_step),
            lr_gamma: self.lr_gamma.or(file.lr_gamma),
            sparsity: self.sparsity.or(file.sparsity),
            mode: self.mode.or(file.mode),
            criteria: self.criteria.or(file.criteria),
            adv_fraction: self.adv_fraction.or(file.adv_fraction),
            normalize_kernels: self.normalize_kernels || file.normalize_kernels,
            guard_full_filters: self.guard_full_filters || file.guard_full_filters,
            layers: self.layers.or(file.layers),
            distill: self.distill.or(file.distill),
            alpha: self.alpha.or(file.alpha),
            temperature: self.temperature.or(file.temperature),
            tap: self.tap.or(file.tap),
            t_squared: self.t_squared || file.t_squared,
        }
    }

    pub fn train_config(&self, default_epochs: usize) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            lr_step: self.lr_step.or(d.lr_step),
            lr_gamma: self.lr_gamma.unwrap_or(d.lr_gamma),
        }
    }

    pub fn prune_config(&self, seed: u64) -> PruneConfig {
        let d = PruneConfig::default();
        PruneConfig {
            target_sparsity: self.sparsity.unwrap_or(d.target_sparsity),
            epochs: self.epochs.unwrap_or(d.epochs),
            criteria: self.criteria.unwrap_or(d.criteria),
            adversarial_layer_fraction: self.adv_fraction.unwrap_or(d.adversarial_layer_fraction),
            normalize_kernels: self.normalize_kernels,
            finetune_mode: self.mode.unwrap_or(d.finetune_mode),
            eligible_layers: self.layers.clone(),
            guard_full_filters: self.guard_full_filters,
            seed,
        }
    }

    /// Distillation settings when a teacher is given. `default_tap` is used
    /// when no tap was chosen.
    pub fn distill_config(&self, default_tap: usize) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha.unwrap_or(0.9),
            temperature: self.temperature.unwrap_or(15.0),
            tap: self.tap.unwrap_or(default_tap),
            t_squared: self.t_squared,
        }
    }
}

/// Collects problems so they can be reported together.
#[derive(Default)]
pub struct Problems(Vec<String>);

impl Problems {
    pub fn push(&mut self, p: impl Into<String>) {
        self.0.push(p.into());
    }

    pub fn require<T: Clone>(&mut self, v: &Option<T>, what: &str) -> Option<T> {
        if v.is_none() {
            self.push(format!("missing {what}"));
        }
        v.clone()
    }

    pub fn existing(&mut self, path: &Option<PathBuf>, what: &str) {
        if let Some(p) = path {
            if !p.exists() {
                self.push(format!("{what} {} does not exist", p.display()));
            }
        }
    }

    pub fn check(&mut self, r: kcp_core::Result<()>) {
        if let Err(e) = r {
            self.push(e.to_string());
        }
    }

    pub fn finish(self) -> anyhow::Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(UsageError(self.0).into())
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synth(SynthSpec),
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("idx:") {
            let (images, labels) = rest
                .split_once(',')
                .ok_or_else(|| format!("expected idx:IMAGES,LABELS, got {s}"))?;
            return Ok(DataSource::Idx {
                images: images.into(),
                labels: labels.into(),
            });
        }
        if let Some(rest) = s.strip_prefix("synth:") {
            let parts: Vec<&str> = rest.split(',').collect();
            let bad = || format!("expected synth:SEED,N,CLASSES,SIZE,SEP, got {s}");
            if parts.len() != 5 {
                return Err(bad());
            }
            return Ok(DataSource::Synth(SynthSpec {
                seed: parts[0].parse().map_err(|_| bad())?,
                n: parts[1].parse().map_err(|_| bad())?,
                class_count: parts[2].parse().map_err(|_| bad())?,
                image_size: parts[3].parse().map_err(|_| bad())?,
                separation: parts[4].parse().map_err(|_| bad())?,
            }));
        }
        Err(format!("unknown data source {s}; expected idx:... or synth:..."))
    }

    /// Held-out counterpart used when no evaluation data is given: synthetic
    /// data gets a fresh seed and a quarter of the samples; IDX data is
    /// evaluated on itself.
    pub fn held_out(&self) -> DataSource {
        match self {
            DataSource::Synth(s) => DataSource::Synth(SynthSpec {
                seed: s.seed ^ 0x9E37_79B9_7F4A_7C15,
                n: s.n.div_ceil(4),
                ..*s
            }),
            idx => idx.clone(),
        }
    }

    pub fn check(&self, problems: &mut Problems) {
        if let DataSource::Idx { images, labels } = self {
            problems.existing(&Some(images.clone()), "image file");
            problems.existing(&Some(labels.clone()), "label file");
        }
    }

    pub fn load(&self, limit: Option<usize>) -> kcp_core::Result<Dataset> {
        match self {
            DataSource::Idx { images, labels } => load_idx(images, labels, limit),
            DataSource::Synth(spec) => {
                let spec = SynthSpec {
                    n: limit.map_or(spec.n, |l| l.min(spec.n)),
                    ..*spec
                };
                synth_dataset(&spec)
            }
        }
    }
}

/// Training and evaluation sources, checked.
pub fn data_sources(s: &Settings, problems: &mut Problems) -> Option<(DataSource, DataSource)> {
    let train = match problems.require(&s.data, "--data").map(|d| DataSource::parse(&d)) {
        Some(Ok(d)) => d,
        Some(Err(e)) => {
            problems.push(e);
            return None;
        }
        None => return None,
    };
    train.check(problems);
    let eval = match &s.eval_data {
        None => train.held_out(),
        Some(e) => match DataSource::parse(e) {
            Ok(d) => {
                d.check(problems);
                d
            }
            Err(e) => {
                problems.push(e);
                return None;
            }
        },
    };
    Some((train, eval))
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
