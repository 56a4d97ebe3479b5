//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::ensemble::E2EConfig;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ConvStage, HeadConfig, HeadVariant};
use crate::optim::DecayUnit;
use crate::train::{Stage, StagedPlan, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    FashionMnist,
    Cifar10,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "fashion-mnist" | "fashion_mnist" | "fmnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(format!("unknown dataset `{s}` (fashion-mnist, cifar10, synthetic)")),
        }
    }
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Training samples kept before the validation split; 0 keeps all.
    pub train_limit: usize,
    /// Test samples kept; 0 keeps all.
    pub test_limit: usize,
    pub val_fraction: f64,
    pub synthetic_samples: usize,
    pub synthetic_size: usize,
    pub synthetic_channels: usize,
    pub synthetic_classes: usize,
    pub synthetic_noise: f64,

    pub filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub variant: HeadVariant,
    pub rnn_units: usize,
    pub fc_neurons: usize,
    pub noise_stddev: f64,

    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// `None` derives the decay constant from each stage.
    pub decay: Option<f64>,
    pub decay_unit: DecayUnit,

    pub repeats: usize,
    pub variants: Vec<HeadVariant>,

    pub members: Vec<PathBuf>,
    pub level1_models: usize,
    pub meta_hidden: usize,
    pub meta_slope: f64,
    pub meta_dropout: f64,
    pub meta_bias: bool,
    pub meta_stages: Vec<Stage>,
    pub meta_batch_size: usize,
    /// Pairwise agreement above which members count as redundant.
    pub redundancy_threshold: f64,
    pub prune_top_k: usize,

    pub augment: bool,
    pub augment_config: AugmentConfig,
    pub tta: bool,

    pub folds: usize,
    /// Validate on this k-fold part of the training data instead of a ratio split.
    pub fold: Option<usize>,
    /// Epochs without improvement before a stage ends early; `None` keeps the budget.
    pub patience: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub verbose: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let plan = StagedPlan::standard();
        ExperimentConfig {
            dataset: DatasetKind::FashionMnist,
            data_dir: PathBuf::from("data/fashion-mnist"),
            train_limit: 0,
            test_limit: 0,
            val_fraction: 1.0 / 6.0,
            synthetic_samples: 600,
            synthetic_size: 12,
            synthetic_channels: 1,
            synthetic_classes: 4,
            synthetic_noise: 0.2,
            filters: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
            variant: HeadVariant::Std,
            rnn_units: 2048,
            fc_neurons: 1024,
            noise_stddev: 0.1,
            stages: plan.stages().to_vec(),
            batch_size: 64,
            eval_batch_size: 500,
            decay: None,
            decay_unit: DecayUnit::Step,
            repeats: 3,
            variants: vec![HeadVariant::Std, HeadVariant::Rnn, HeadVariant::Gru, HeadVariant::BiLstm],
            members: Vec::new(),
            level1_models: 3,
            meta_hidden: 4096,
            meta_slope: 0.2,
            meta_dropout: 0.5,
            meta_bias: true,
            meta_stages: vec![Stage { lr: 1e-3, epochs: 10 }, Stage { lr: 1e-4, epochs: 3 }],
            meta_batch_size: 128,
            redundancy_threshold: 0.995,
            prune_top_k: 1,
            augment: false,
            augment_config: AugmentConfig::default(),
            tta: false,
            folds: 5,
            fold: None,
            patience: None,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            verbose: false,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse::<T>)
        .collect()
}

/// `lr:epochs,lr:epochs,…`.
fn parse_stages(v: &str) -> std::result::Result<Vec<Stage>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (lr, epochs) = s.split_once(':').ok_or_else(|| format!("stage `{s}` is not lr:epochs"))?;
            Ok(Stage {
                lr: parse(lr.trim())?,
                epochs: parse(epochs.trim())?,
            })
        })
        .collect()
}

fn fmt_stages(stages: &[Stage]) -> String {
    stages
        .iter()
        .map(|s| format!("{:e}:{}", s.lr, s.epochs))
        .collect::<Vec<_>>()
        .join(",")
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let a = &mut self.augment_config;
        match key.trim() {
            "dataset" => self.dataset = parse(v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_limit" => self.train_limit = parse(v)?,
            "test_limit" => self.test_limit = parse(v)?,
            "val_fraction" => self.val_fraction = parse(v)?,
            "synthetic_samples" => self.synthetic_samples = parse(v)?,
            "synthetic_size" => self.synthetic_size = parse(v)?,
            "synthetic_channels" => self.synthetic_channels = parse(v)?,
            "synthetic_classes" => self.synthetic_classes = parse(v)?,
            "synthetic_noise" => self.synthetic_noise = parse(v)?,
            "filters" => self.filters = parse_list(v)?,
            "kernel" => self.kernel = parse(v)?,
            "stride" => self.stride = parse(v)?,
            "variant" => self.variant = parse(v)?,
            "rnn_units" => self.rnn_units = parse(v)?,
            "fc_neurons" => self.fc_neurons = parse(v)?,
            "noise_stddev" => self.noise_stddev = parse(v)?,
            "stages" => self.stages = parse_stages(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "eval_batch_size" => self.eval_batch_size = parse(v)?,
            "decay" => self.decay = if v == "auto" { None } else { Some(parse(v)?) },
            "decay_unit" => {
                self.decay_unit = match v {
                    "step" => DecayUnit::Step,
                    "epoch" => DecayUnit::Epoch,
                    _ => return Err(format!("decay unit `{v}` is not step or epoch")),
                }
            }
            "repeats" => self.repeats = parse(v)?,
            "variants" => self.variants = parse_list(v)?,
            "members" => self.members = parse_list::<String>(v)?.into_iter().map(PathBuf::from).collect(),
            "level1_models" => self.level1_models = parse(v)?,
            "meta_hidden" => self.meta_hidden = parse(v)?,
            "meta_slope" => self.meta_slope = parse(v)?,
            "meta_dropout" => self.meta_dropout = parse(v)?,
            "meta_bias" => self.meta_bias = parse_bool(v)?,
            "meta_stages" => self.meta_stages = parse_stages(v)?,
            "meta_batch_size" => self.meta_batch_size = parse(v)?,
            "redundancy_threshold" => self.redundancy_threshold = parse(v)?,
            "prune_top_k" => self.prune_top_k = parse(v)?,
            "augment" => self.augment = parse_bool(v)?,
            "rotation" => a.rotation_deg = parse(v)?,
            "width_shift" => a.width_shift = parse(v)?,
            "height_shift" => a.height_shift = parse(v)?,
            "shear" => a.shear = parse(v)?,
            "zoom" => a.zoom = parse(v)?,
            "horizontal_flip" => a.horizontal_flip = parse_bool(v)?,
            "vertical_flip" => a.vertical_flip = parse_bool(v)?,
            "channel_shift" => a.channel_shift = parse(v)?,
            "tta" => self.tta = parse_bool(v)?,
            "tta_crops" => a.crops = parse(v)?,
            "pre_crop" => a.pre_crop = parse(v)?,
            "crop" => a.crop = parse(v)?,
            "folds" => self.folds = parse(v)?,
            "fold" => self.fold = if v == "none" { None } else { Some(parse(v)?) },
            "patience" => self.patience = if v == "none" { None } else { Some(parse(v)?) },
            "seed" => self.seed = parse(v)?,
            "out" => self.out = PathBuf::from(v),
            "verbose" => self.verbose = parse_bool(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines (blank lines and `#` comments skipped) and
    /// then `overrides`, reporting every bad line at once.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut problems = Vec::new();
        let lines = text
            .unwrap_or("")
            .lines()
            .enumerate()
            .map(|(i, l)| (format!("line {}", i + 1), l.to_string()));
        let flags = overrides.iter().map(|o| (format!("override `{o}`"), o.clone()));
        for (origin, line) in lines.chain(flags) {
            let line = line.split('#').next().unwrap_or("").trim().to_string();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                None => problems.push(format!("{origin}: expected key = value")),
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k, v) {
                        problems.push(format!("{origin}: {e}"));
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            problems.push(format!("val_fraction {} not in (0, 1)", self.val_fraction));
        }
        if self.filters.is_empty() {
            problems.push("filters must list at least one stage".to_string());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.meta_batch_size == 0 {
            problems.push("batch sizes must be positive".to_string());
        }
        if self.repeats == 0 {
            problems.push("repeats must be at least 1".to_string());
        }
        if self.variants.is_empty() {
            problems.push("variants must list at least one head".to_string());
        }
        if let Some(f) = self.fold {
            if f >= self.folds {
                problems.push(format!("fold {f} out of range for {} folds", self.folds));
            }
        }
        if self.patience == Some(0) {
            problems.push("patience must be at least 1 epoch".to_string());
        }
        if self.prune_top_k == 0 {
            problems.push("prune_top_k must be at least 1".to_string());
        }
        for (name, stages) in [("stages", &self.stages), ("meta_stages", &self.meta_stages)] {
            if let Err(e) = StagedPlan::new(stages.clone()) {
                problems.push(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.head_config(10).validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.meta_config(3, 10).validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.augment_config.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn backbone_config(&self, (h, w, c): (usize, usize, usize)) -> BackboneConfig {
        BackboneConfig {
            stages: self
                .filters
                .iter()
                .map(|&filters| ConvStage {
                    filters,
                    kernel: self.kernel,
                    stride: self.stride,
                })
                .collect(),
            height: h,
            width: w,
            channels: c,
        }
    }

    pub fn head_config(&self, classes: usize) -> HeadConfig {
        HeadConfig {
            variant: self.variant,
            rnn_units: self.rnn_units,
            noise_stddev: self.noise_stddev,
            fc_neurons: self.fc_neurons,
            classes,
        }
    }

    pub fn meta_config(&self, members: usize, classes: usize) -> E2EConfig {
        E2EConfig {
            members,
            classes,
            hidden: self.meta_hidden,
            leaky_slope: self.meta_slope,
            dropout: self.meta_dropout,
            hidden_bias: self.meta_bias,
        }
    }

    pub fn plan(&self) -> Result<StagedPlan> {
        StagedPlan::new(self.stages.clone())
    }

    pub fn meta_plan(&self) -> Result<StagedPlan> {
        StagedPlan::new(self.meta_stages.clone())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            seed,
            decay: self.decay,
            decay_unit: self.decay_unit,
            augment: self.augment.then(|| self.augment_config.clone()),
            patience: self.patience,
            verbose: self.verbose,
        }
    }

    /// Every key with its current value, in a form [`Self::from_sources`] reads back.
    pub fn to_kv(&self) -> String {
        let a = &self.augment_config;
        let members: Vec<String> = self.members.iter().map(|p| p.display().to_string()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.name().to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("synthetic_samples", self.synthetic_samples.to_string()),
            ("synthetic_size", self.synthetic_size.to_string()),
            ("synthetic_channels", self.synthetic_channels.to_string()),
            ("synthetic_classes", self.synthetic_classes.to_string()),
            ("synthetic_noise", self.synthetic_noise.to_string()),
            ("filters", join(&self.filters)),
            ("kernel", self.kernel.to_string()),
            ("stride", self.stride.to_string()),
            ("variant", self.variant.to_string()),
            ("rnn_units", self.rnn_units.to_string()),
            ("fc_neurons", self.fc_neurons.to_string()),
            ("noise_stddev", self.noise_stddev.to_string()),
            ("stages", fmt_stages(&self.stages)),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("decay", self.decay.map_or_else(|| "auto".to_string(), |d| d.to_string())),
            (
                "decay_unit",
                match self.decay_unit {
                    DecayUnit::Step => "step",
                    DecayUnit::Epoch => "epoch",
                }
                .to_string(),
            ),
            ("repeats", self.repeats.to_string()),
            ("variants", join(&self.variants)),
            ("members", members.join(",")),
            ("level1_models", self.level1_models.to_string()),
            ("meta_hidden", self.meta_hidden.to_string()),
            ("meta_slope", self.meta_slope.to_string()),
            ("meta_dropout", self.meta_dropout.to_string()),
            ("meta_bias", self.meta_bias.to_string()),
            ("meta_stages", fmt_stages(&self.meta_stages)),
            ("meta_batch_size", self.meta_batch_size.to_string()),
            ("redundancy_threshold", self.redundancy_threshold.to_string()),
            ("prune_top_k", self.prune_top_k.to_string()),
            ("augment", self.augment.to_string()),
            ("rotation", a.rotation_deg.to_string()),
            ("width_shift", a.width_shift.to_string()),
            ("height_shift", a.height_shift.to_string()),
            ("shear", a.shear.to_string()),
            ("zoom", a.zoom.to_string()),
            ("horizontal_flip", a.horizontal_flip.to_string()),
            ("vertical_flip", a.vertical_flip.to_string()),
            ("channel_shift", a.channel_shift.to_string()),
            ("tta", self.tta.to_string()),
            ("tta_crops", a.crops.to_string()),
            ("pre_crop", a.pre_crop.to_string()),
            ("crop", a.crop.to_string()),
            ("folds", self.folds.to_string()),
            ("fold", self.fold.map_or_else(|| "none".to_string(), |f| f.to_string())),
            ("patience", self.patience.map_or_else(|| "none".to_string(), |p| p.to_string())),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("verbose", self.verbose.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
