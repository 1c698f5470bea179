//! Run configuration: architecture, training, and dataset settings with a
//! flat key=value text form. Every run snapshots its effective config so the
//! artifacts are reproducible from the file alone.

use std::fmt;
use std::str::FromStr;

use crate::error::{ProadError, Result};
use crate::rng::fnv1a64;

/// Activation applied inside linear attention; must map into [0, ∞).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiKind {
    EluPlusOne,
    Relu,
}

impl fmt::Display for PhiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhiKind::EluPlusOne => write!(f, "elu_plus_one"),
            PhiKind::Relu => write!(f, "relu"),
        }
    }
}

impl FromStr for PhiKind {
    type Err = ProadError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu_plus_one" => Ok(PhiKind::EluPlusOne),
            "relu" => Ok(PhiKind::Relu),
            other => Err(ProadError::Config(format!("unknown phi '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DefectKind {
    Scratch,
    Blob,
    ColorPatch,
    MissingPart,
    Misplacement,
}

impl DefectKind {
    pub const ALL: [DefectKind; 5] = [
        DefectKind::Scratch,
        DefectKind::Blob,
        DefectKind::ColorPatch,
        DefectKind::MissingPart,
        DefectKind::Misplacement,
    ];
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Blob => "blob",
            DefectKind::ColorPatch => "color_patch",
            DefectKind::MissingPart => "missing_part",
            DefectKind::Misplacement => "misplacement",
        };
        write!(f, "{s}")
    }
}

impl FromStr for DefectKind {
    type Err = ProadError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(DefectKind::Scratch),
            "blob" => Ok(DefectKind::Blob),
            "color_patch" => Ok(DefectKind::ColorPatch),
            "missing_part" => Ok(DefectKind::MissingPart),
            "misplacement" => Ok(DefectKind::Misplacement),
            other => Err(ProadError::Config(format!("unknown defect '{other}'"))),
        }
    }
}

/// Architecture settings shared by every command.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    /// 1-based inclusive range of encoder layers summed into the fused input.
    pub fuse_from: usize,
    pub fuse_to: usize,
    pub decoder_layers: usize,
    /// Prototype token count M; the constraint requires M == patch count.
    pub prototypes: usize,
    pub phi: PhiKind,
    pub normalize: bool,
    pub lca_eps: f64,
    pub drop_prob: f64,
    pub anb: bool,
    pub dynamic: bool,
    pub constraint: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            encoder_layers: 8,
            fuse_from: 2,
            fuse_to: 7,
            decoder_layers: 4,
            prototypes: 64,
            phi: PhiKind::EluPlusOne,
            normalize: true,
            lca_eps: 1e-6,
            drop_prob: 0.2,
            anb: true,
            dynamic: true,
            constraint: true,
        }
    }
}

impl ModelConfig {
    /// Paper-scale preset used only for the parameter ledger.
    pub fn paper_scale() -> Self {
        ModelConfig {
            image_size: 392,
            patch_size: 14,
            dim: 768,
            encoder_layers: 12,
            fuse_from: 2,
            fuse_to: 9,
            decoder_layers: 8,
            prototypes: 789,
            ..ModelConfig::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ProadError::Config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 {
            return Err(ProadError::Config("dim must be positive".into()));
        }
        if !(1 <= self.fuse_from && self.fuse_from <= self.fuse_to && self.fuse_to <= self.encoder_layers)
        {
            return Err(ProadError::Config(format!(
                "fuse range {}..{} invalid for {} encoder layers",
                self.fuse_from, self.fuse_to, self.encoder_layers
            )));
        }
        if self.decoder_layers == 0 {
            return Err(ProadError::Config("decoder_layers must be >= 1".into()));
        }
        if self.prototypes == 0 {
            return Err(ProadError::Config("prototypes must be >= 1".into()));
        }
        if self.constraint && self.prototypes != self.num_patches() {
            return Err(ProadError::Config(format!(
                "prototype-based constraint needs prototypes == patches ({} != {}); \
                 pass --no-constraint to run with a free prototype count",
                self.prototypes,
                self.num_patches()
            )));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(ProadError::Config(format!(
                "drop_prob must be in [0,1), got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// Optimization settings; defaults follow the reference recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub tau: f64,
    pub clip_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-5,
            warmup_epochs: 10,
            tau: 3.0,
            clip_threshold: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(ProadError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ProadError::Config("batch_size must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(ProadError::Config(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Synthetic dataset shape. `seed` here is the data seed so one dataset can
/// serve several training seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
    pub image_size: usize,
    pub defects: Vec<DefectKind>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 2,
            train_per_class: 16,
            test_normal_per_class: 8,
            test_anomalous_per_class: 12,
            image_size: 64,
            defects: vec![
                DefectKind::Blob,
                DefectKind::Scratch,
                DefectKind::Misplacement,
            ],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.num_classes == 0
            || self.train_per_class == 0
            || self.test_normal_per_class == 0
            || self.test_anomalous_per_class == 0
        {
            return Err(ProadError::Config("all dataset counts must be >= 1".into()));
        }
        if patch_size == 0 || self.image_size % patch_size != 0 {
            return Err(ProadError::Config(format!(
                "dataset image_size {} not divisible by encoder patch size {}",
                self.image_size, patch_size
            )));
        }
        if self.defects.is_empty() {
            return Err(ProadError::Config("at least one defect type required".into()));
        }
        Ok(())
    }
}

/// Everything one run needs; serializes to flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate(self.model.patch_size)?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let defects: Vec<String> = d.defects.iter().map(|k| k.to_string()).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("seed", self.seed.to_string());
        put("image_size", m.image_size.to_string());
        put("patch_size", m.patch_size.to_string());
        put("dim", m.dim.to_string());
        put("encoder_layers", m.encoder_layers.to_string());
        put("fuse_from", m.fuse_from.to_string());
        put("fuse_to", m.fuse_to.to_string());
        put("decoder_layers", m.decoder_layers.to_string());
        put("prototypes", m.prototypes.to_string());
        put("phi", m.phi.to_string());
        put("normalize", m.normalize.to_string());
        put("lca_eps", m.lca_eps.to_string());
        put("drop_prob", m.drop_prob.to_string());
        put("anb", m.anb.to_string());
        put("dynamic", m.dynamic.to_string());
        put("constraint", m.constraint.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", t.lr.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("warmup_epochs", t.warmup_epochs.to_string());
        put("tau", t.tau.to_string());
        put("clip_threshold", t.clip_threshold.to_string());
        put("num_classes", d.num_classes.to_string());
        put("train_per_class", d.train_per_class.to_string());
        put("test_normal_per_class", d.test_normal_per_class.to_string());
        put(
            "test_anomalous_per_class",
            d.test_anomalous_per_class.to_string(),
        );
        put("defects", defects.join(","));
        put("data_seed", d.seed.to_string());
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ProadError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| ProadError::Config(format!("{key}: {e}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "image_size" => {
                self.model.image_size = num(key, value)?;
                self.data.image_size = self.model.image_size;
            }
            "patch_size" => self.model.patch_size = num(key, value)?,
            "dim" => self.model.dim = num(key, value)?,
            "encoder_layers" => self.model.encoder_layers = num(key, value)?,
            "fuse_from" => self.model.fuse_from = num(key, value)?,
            "fuse_to" => self.model.fuse_to = num(key, value)?,
            "decoder_layers" => self.model.decoder_layers = num(key, value)?,
            "prototypes" => self.model.prototypes = num(key, value)?,
            "phi" => self.model.phi = value.parse()?,
            "normalize" => self.model.normalize = num(key, value)?,
            "lca_eps" => self.model.lca_eps = num(key, value)?,
            "drop_prob" => self.model.drop_prob = num(key, value)?,
            "anb" => self.model.anb = num(key, value)?,
            "dynamic" => self.model.dynamic = num(key, value)?,
            "constraint" => self.model.constraint = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "warmup_epochs" => self.train.warmup_epochs = num(key, value)?,
            "tau" => self.train.tau = num(key, value)?,
            "clip_threshold" => self.train.clip_threshold = num(key, value)?,
            "num_classes" => self.data.num_classes = num(key, value)?,
            "train_per_class" => self.data.train_per_class = num(key, value)?,
            "test_normal_per_class" => self.data.test_normal_per_class = num(key, value)?,
            "test_anomalous_per_class" => self.data.test_anomalous_per_class = num(key, value)?,
            "defects" => {
                let mut kinds = Vec::new();
                for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    kinds.push(part.parse()?);
                }
                self.data.defects = kinds;
            }
            "data_seed" => self.data.seed = num(key, value)?,
            other => return Err(ProadError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_kv().as_bytes()))
    }
}
