//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys, duplicate keys and unparsable values are errors.
//! See [`TrainConfig::KEYS`] for the accepted keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::selection::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    RandomRotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    // data
    pub data_source: DataSource,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub noise: f64,
    pub augmentation: Augmentation,
    pub subset_fraction: f64,
    // backbone
    pub orientations: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    // invariant integration
    pub num_monomials: usize,
    pub num_angles: usize,
    pub monomial_order: usize,
    pub group_order: u32,
    pub r_max: f64,
    pub epsilon: f64,
    // selection
    pub ridge_lambda: f64,
    pub candidate_pool: usize,
    pub patience: usize,
    pub selection_samples: usize,
    // optimization (SGD with momentum)
    pub learning_rate: f64,
    pub lr_exponents: f64,
    pub momentum: f64,
    /// Global gradient-norm clip per step; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Restore the parameters of the best-validation epoch at the end of
    /// each phase.
    pub keep_best: bool,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    // evaluation
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_source: DataSource::Synthetic,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_size: 1000,
            val_size: 200,
            test_size: 1000,
            image_size: 21,
            noise: 0.1,
            augmentation: Augmentation::None,
            subset_fraction: 1.0,
            orientations: 8,
            channels: vec![8, 16],
            kernel_size: 3,
            num_monomials: crate::iil::DEFAULT_NUM_MONOMIALS,
            num_angles: crate::iil::DEFAULT_NUM_ANGLES,
            monomial_order: 2,
            group_order: 4,
            r_max: crate::iil::DEFAULT_R_MAX,
            epsilon: crate::monomial::DEFAULT_EPSILON,
            ridge_lambda: crate::selection::DEFAULT_LAMBDA,
            candidate_pool: 40,
            patience: crate::selection::DEFAULT_PATIENCE,
            selection_samples: 0,
            learning_rate: 0.01,
            lr_exponents: 0.002,
            momentum: 0.9,
            grad_clip: 1.0,
            batch_size: 8,
            keep_best: true,
            epochs_phase1: 10,
            epochs_phase2: 10,
            repeats: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl TrainConfig {
    /// Every accepted key with a one-line description.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("seed", "base RNG seed (u64)"),
        ("data_source", "synthetic | idx"),
        ("train_images", "IDX images used for train and validation (idx source)"),
        ("train_labels", "IDX labels matching train_images"),
        ("test_images", "IDX test images"),
        ("test_labels", "IDX test labels"),
        ("train_size", "training samples (synthetic) or cap (idx)"),
        ("val_size", "validation samples"),
        ("test_size", "test samples"),
        ("image_size", "side length of synthetic images (odd)"),
        ("noise", "std of additive Gaussian noise on synthetic images"),
        ("augmentation", "none | random_rotation (training batches only)"),
        ("subset_fraction", "fraction of training data used, in (0, 1]"),
        ("orientations", "rotation group size N of the backbone"),
        ("channels", "comma-separated widths: lifting layer, then each group conv"),
        ("kernel_size", "odd convolution kernel size"),
        ("num_monomials", "monomial cap M"),
        ("num_angles", "integration angles N_phi"),
        ("monomial_order", "factors per monomial K (1-4)"),
        ("group_order", "bound on the sum of initial integer exponents"),
        ("r_max", "maximum factor offset radius in pixels"),
        ("epsilon", "floor of the input shift, in (0, 1)"),
        ("ridge_lambda", "ridge penalty of the closed-form classifier"),
        ("candidate_pool", "number of candidate monomials drawn for selection"),
        ("patience", "non-improving selection iterations before stopping"),
        ("selection_samples", "cap on training samples used for selection (0 = all)"),
        ("learning_rate", "SGD learning rate"),
        ("lr_exponents", "SGD learning rate of the monomial exponents"),
        ("momentum", "SGD momentum"),
        ("grad_clip", "rescale each step's gradient to this global L2 norm if larger (0 = off)"),
        ("batch_size", "minibatch size"),
        ("keep_best", "true | false: end each phase at its best-validation epoch"),
        ("epochs_phase1", "epochs of baseline training"),
        ("epochs_phase2", "epochs of training with the invariant layer"),
        ("repeats", "independent seeded runs for test-error statistics"),
    ];

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data_source" => {
                self.data_source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => DataSource::Idx,
                    _ => return Err(Error::Config(format!("unknown data_source {value:?}"))),
                }
            }
            "train_images" => self.train_images = path(value),
            "train_labels" => self.train_labels = path(value),
            "test_images" => self.test_images = path(value),
            "test_labels" => self.test_labels = path(value),
            "train_size" => self.train_size = parse(key, value)?,
            "val_size" => self.val_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "augmentation" => {
                self.augmentation = match value {
                    "none" => Augmentation::None,
                    "random_rotation" => Augmentation::RandomRotation,
                    _ => return Err(Error::Config(format!("unknown augmentation {value:?}"))),
                }
            }
            "subset_fraction" => self.subset_fraction = parse(key, value)?,
            "orientations" => self.orientations = parse(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "num_monomials" => self.num_monomials = parse(key, value)?,
            "num_angles" => self.num_angles = parse(key, value)?,
            "monomial_order" => self.monomial_order = parse(key, value)?,
            "group_order" => self.group_order = parse(key, value)?,
            "r_max" => self.r_max = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "ridge_lambda" => self.ridge_lambda = parse(key, value)?,
            "candidate_pool" => self.candidate_pool = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "selection_samples" => self.selection_samples = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lr_exponents" => self.lr_exponents = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "keep_best" => self.keep_best = parse(key, value)?,
            "epochs_phase1" => self.epochs_phase1 = parse(key, value)?,
            "epochs_phase2" => self.epochs_phase2 = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return bad("split sizes must be >= 1");
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad("subset_fraction must lie in (0, 1]");
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return bad("kernel_size must be odd");
        }
        if self.orientations == 0 || self.num_angles == 0 || self.num_monomials == 0 {
            return bad("orientations, num_angles and num_monomials must be >= 1");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a nonempty list of positive widths");
        }
        if !(1..=4).contains(&self.monomial_order) {
            return bad("monomial_order must lie in 1..=4");
        }
        if self.group_order == 0 {
            return bad("group_order must be >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.r_max >= 0.0) || !(self.ridge_lambda >= 0.0) || !(self.noise >= 0.0) {
            return bad("r_max, ridge_lambda and noise must be >= 0");
        }
        if self.candidate_pool == 0 || self.batch_size == 0 || self.repeats == 0 {
            return bad("candidate_pool, batch_size and repeats must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_exponents >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be > 0, lr_exponents >= 0, momentum in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        let needed = self.channels.len() * (self.kernel_size - 1) + 1;
        if self.data_source == DataSource::Synthetic && self.image_size < needed {
            return bad("image_size too small for the backbone depth");
        }
        if self.data_source == DataSource::Idx && (self.train_images.is_none() || self.train_labels.is_none()) {
            return bad("idx data_source needs train_images and train_labels");
        }
        Ok(())
    }

    /// Serializes back to the flat `key = value` form.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let source = match self.data_source {
            DataSource::Synthetic => "synthetic",
            DataSource::Idx => "idx",
        };
        let aug = match self.augmentation {
            Augmentation::None => "none",
            Augmentation::RandomRotation => "random_rotation",
        };
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data_source", source.into()),
            ("train_images", opt(&self.train_images)),
            ("train_labels", opt(&self.train_labels)),
            ("test_images", opt(&self.test_images)),
            ("test_labels", opt(&self.test_labels)),
            ("train_size", self.train_size.to_string()),
            ("val_size", self.val_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("image_size", self.image_size.to_string()),
            ("noise", self.noise.to_string()),
            ("augmentation", aug.into()),
            ("subset_fraction", self.subset_fraction.to_string()),
            ("orientations", self.orientations.to_string()),
            ("channels", channels.join(",")),
            ("kernel_size", self.kernel_size.to_string()),
            ("num_monomials", self.num_monomials.to_string()),
            ("num_angles", self.num_angles.to_string()),
            ("monomial_order", self.monomial_order.to_string()),
            ("group_order", self.group_order.to_string()),
            ("r_max", self.r_max.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("ridge_lambda", self.ridge_lambda.to_string()),
            ("candidate_pool", self.candidate_pool.to_string()),
            ("patience", self.patience.to_string()),
            ("selection_samples", self.selection_samples.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_exponents", self.lr_exponents.to_string()),
            ("momentum", self.momentum.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("keep_best", self.keep_best.to_string()),
            ("epochs_phase1", self.epochs_phase1.to_string()),
            ("epochs_phase2", self.epochs_phase2.to_string()),
            ("repeats", self.repeats.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn backbone(&self, in_channels: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels,
            channels: self.channels.clone(),
            kernel_size: self.kernel_size,
            orientations: self.orientations,
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            max_monomials: self.num_monomials,
            patience: self.patience,
            lambda: self.ridge_lambda,
            num_angles: self.num_angles,
            pool_size: self.candidate_pool,
            order: self.monomial_order,
            group_order: self.group_order,
            r_max: self.r_max,
            seed: self.seed.wrapping_add(0x5e1ec7),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_kv() {
        let mut cfg = TrainConfig::default();
        cfg.channels = vec![4, 6, 8];
        cfg.augmentation = Augmentation::RandomRotation;
        cfg.noise = 0.25;
        let back = TrainConfig::parse_str(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(matches!(TrainConfig::parse_str("bogus = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse_str("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse_str("seed 1").is_err());
        assert!(TrainConfig::parse_str("seed = x").is_err());
        assert!(TrainConfig::parse_str("# comment\n\nseed = 3\n").unwrap().seed == 3);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::parse_str("subset_fraction = 0").is_err());
        assert!(TrainConfig::parse_str("kernel_size = 4").is_err());
        assert!(TrainConfig::parse_str("epsilon = 1.5").is_err());
        assert!(TrainConfig::parse_str("data_source = idx").is_err());
        assert!(TrainConfig::parse_str("monomial_order = 5").is_err());
    }

    #[test]
    fn keys_table_covers_every_serialized_key() {
        let kv = TrainConfig::default().to_kv();
        let keys: Vec<&str> = kv.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let documented: Vec<&str> = TrainConfig::KEYS.iter().map(|k| k.0).collect();
        assert_eq!(keys, documented);
    }
}
