//! Stage orchestration: `stl_n -> stl_m -> sstl_m -> finetune`, checkpoints,
//! evaluation and the configuration file.

mod checkpoint;
mod config;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::AugmentPolicy;
use crate::ssl::{RegionReduction, DEFAULT_ALPHA, DEFAULT_MOMENTUM, DEFAULT_TAU};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{parse_sections, DataSettings, ModelSettings, PipelineConfig, Sections};
pub use train::{
    dummy_distributions, eval_batch, evaluate, finetune, generate_datasets, run_stage, run_stage_ssl, run_stage_supervised, EpochRecord,
    SslEpochRecord, SslHistory, StageOutcome, DATASET_DIRS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    StlN,
    StlM,
    SstlM,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::StlN, Stage::StlM, Stage::SstlM, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::StlN => "stl_n",
            Stage::StlM => "stl_m",
            Stage::SstlM => "sstl_m",
            Stage::Finetune => "finetune",
        }
    }

    /// Rejects `next` unless it comes strictly after every stage already
    /// applied.
    pub fn check_order(applied: &[Stage], next: Stage) -> Result<()> {
        match applied.last() {
            Some(&last) if last >= next => Err(Error::Config(format!(
                "stage {} cannot follow {}; stages run in the order stl_n, stl_m, sstl_m, finetune",
                next, last
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Step decay: `initial * decay^k` where `k` counts milestones `<= epoch`
/// (epochs are 0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.milestones.iter().filter(|&&m| m <= epoch).fold(self.initial, |lr, _| lr * self.decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Scale, crop, flip, jitter and grayscale.
    Full,
    /// Scale, crop and flip.
    CropFlip,
    /// Scale and center crop only.
    None,
}

impl AugmentKind {
    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Full => "full",
            AugmentKind::CropFlip => "crop_flip",
            AugmentKind::None => "none",
        }
    }

    pub fn policy(self, input_size: usize) -> AugmentPolicy {
        match self {
            AugmentKind::Full => AugmentPolicy::for_input(input_size),
            AugmentKind::CropFlip => AugmentPolicy::flip_only(input_size),
            AugmentKind::None => AugmentPolicy {
                flip_prob: 0.0,
                jitter_prob: 0.0,
                gray_prob: 0.0,
                ..AugmentPolicy::for_input(input_size)
            },
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AugmentKind::Full),
            "crop_flip" => Ok(AugmentKind::CropFlip),
            "none" => Ok(AugmentKind::None),
            _ => Err(Error::Config(format!("unknown augmentation `{s}` (full, crop_flip, none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslSettings {
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Key-encoder momentum.
    pub key_momentum: f64,
    pub queue_capacity: usize,
    pub embed_dim: usize,
    pub unscaled_negatives: bool,
    pub region_reduction: RegionReduction,
}

impl Default for SslSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha1: DEFAULT_ALPHA,
            alpha2: DEFAULT_ALPHA,
            key_momentum: DEFAULT_MOMENTUM,
            queue_capacity: 256,
            embed_dim: 32,
            unscaled_negatives: false,
            region_reduction: RegionReduction::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub dataset: PathBuf,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentKind,
    /// Expected class count of the stage's dataset; checked when set.
    pub num_classes: Option<usize>,
    pub ssl: SslSettings,
}

impl StageConfig {
    /// Full-scale per-stage optimizer settings (epochs, schedule, batch size).
    pub fn defaults(stage: Stage) -> Self {
        let (epochs, lr, milestones, batch_size, augment) = match stage {
            Stage::StlN => (90, 0.1, vec![30, 60], 512, AugmentKind::CropFlip),
            Stage::StlM => (30, 2e-4, vec![], 64, AugmentKind::CropFlip),
            Stage::SstlM | Stage::Finetune => (200, 0.3, vec![120, 160], 256, AugmentKind::Full),
        };
        Self {
            stage,
            dataset: PathBuf::from(match stage {
                Stage::StlN => "natural",
                Stage::StlM => "medical",
                Stage::SstlM | Stage::Finetune => "target",
            }),
            epochs,
            lr: LrSchedule { initial: lr, decay: 0.1, milestones },
            batch_size,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment,
            num_classes: None,
            ssl: SslSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{}: batch_size must be positive", self.stage)));
        }
        if !(self.lr.initial >= 0.0) || !(self.lr.decay > 0.0) {
            return Err(Error::Config(format!("{}: lr must be >= 0 and lr_decay > 0", self.stage)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("{}: need 0 <= momentum < 1 and weight_decay >= 0", self.stage)));
        }
        let s = &self.ssl;
        if !(s.tau > 0.0) || !(0.0..=1.0).contains(&s.key_momentum) || s.queue_capacity == 0 || s.embed_dim == 0 {
            return Err(Error::Config(format!("{}: invalid self-supervised settings", self.stage)));
        }
        if s.alpha1 < 0.0 || s.alpha2 < 0.0 || (s.alpha1 == 0.0 && s.alpha2 == 0.0) {
            return Err(Error::Config(format!("{}: alpha1/alpha2 must be nonnegative, not both zero", self.stage)));
        }
        Ok(())
    }
}

/// Process exit status for an error: 2 configuration, 3 I/O, 4 checkpoint,
/// 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}
