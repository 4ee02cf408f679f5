//! Run configuration: defaults, plain-text `key = value` parsing, and
//! validation shared by training, inference, and the ablation driver.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::kernels::BANK_SIZE;
use crate::network::{BranchKind, NetworkConfig};
use crate::{Error, Result};

/// Which loss terms the trainer optimizes; `SimilarityOnly` reproduces a
/// traditional fusion objective for the loss-terms ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerms {
    Full,
    SimilarityOnly,
}

impl FromStr for LossTerms {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossTerms::Full),
            "similarity-only" => Ok(LossTerms::SimilarityOnly),
            other => Err(Error::arg(format!(
                "loss-terms must be `full` or `similarity-only`, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTerms::Full => "full",
            LossTerms::SimilarityOnly => "similarity-only",
        })
    }
}

/// Training and synthesis parameters; config-file keys are the
/// kebab-case field names.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batchsize: usize,
    pub lr: f64,
    pub epochs: usize,
    pub basis_count: usize,
    pub candidates: usize,
    pub branch_kind: BranchKind,
    pub eq8_literal: bool,
    pub eq6_literal: bool,
    pub scale: u32,
    pub seed: u64,
    pub crop_size: usize,
    pub momentum: f64,
    pub condition_branches: bool,
    pub condition_fusion: bool,
    pub illum_aug: bool,
    pub loss_terms: LossTerms,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batchsize: 16,
            lr: 0.001,
            epochs: 89,
            basis_count: BANK_SIZE,
            candidates: 4,
            branch_kind: BranchKind::Dynamic,
            eq8_literal: false,
            eq6_literal: true,
            scale: 1,
            seed: 0,
            crop_size: 32,
            momentum: 0.9,
            condition_branches: true,
            condition_fusion: true,
            illum_aug: false,
            loss_terms: LossTerms::Full,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::arg(format!("invalid value {value:?} for config key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::arg(format!(
            "invalid value {value:?} for config key `{key}` (expected true/false)"
        ))),
    }
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batchsize" => self.batchsize = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "basis-count" => self.basis_count = parse_value(key, value)?,
            "candidates" => self.candidates = parse_value(key, value)?,
            "branch-kind" => self.branch_kind = value.parse()?,
            "eq8-literal" => self.eq8_literal = parse_bool(key, value)?,
            "eq6-literal" => self.eq6_literal = parse_bool(key, value)?,
            "scale" => self.scale = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "crop-size" => self.crop_size = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "condition-branches" => self.condition_branches = parse_bool(key, value)?,
            "condition-fusion" => self.condition_fusion = parse_bool(key, value)?,
            "illum-aug" => self.illum_aug = parse_bool(key, value)?,
            "loss-terms" => self.loss_terms = value.parse()?,
            other => return Err(Error::arg(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// ignored. Later assignments override earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::data(format!(
                    "config line {} is not a `key = value` assignment: {raw:?}",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batchsize == 0 {
            return Err(Error::arg("batchsize must be >= 1".to_string()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1".to_string()));
        }
        if self.basis_count != BANK_SIZE {
            return Err(Error::arg(format!(
                "basis-count is fixed at {BANK_SIZE} (4 variants per blur family), got {}",
                self.basis_count
            )));
        }
        if self.candidates == 0 {
            return Err(Error::arg("candidates must be >= 1".to_string()));
        }
        if self.scale != 1 && self.scale != 2 {
            return Err(Error::arg(format!("scale must be 1 or 2, got {}", self.scale)));
        }
        if self.crop_size < 16 {
            return Err(Error::arg(format!(
                "crop-size must be >= 16 so losses have full SSIM windows, got {}",
                self.crop_size
            )));
        }
        if self.scale == 2 && self.crop_size % 2 != 0 {
            return Err(Error::arg(format!(
                "crop-size must be even at scale 2 so upsampling restores it, got {}",
                self.crop_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// The architecture settings implied by this configuration.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            branch_kind: self.branch_kind,
            candidates: self.candidates,
            eq6_literal: self.eq6_literal,
            condition_branches: self.condition_branches,
            condition_fusion: self.condition_fusion,
            ..NetworkConfig::default()
        }
    }
}
