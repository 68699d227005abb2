//! Flat `key = value` configuration with `[section]` headers.
//!
//! Sections: `[model]`, `[data]` and one per stage (`[stl_n]`, `[stl_m]`,
//! `[sstl_m]`, `[finetune]`). `#` and `;` start comment lines. Unknown
//! sections and keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AugmentKind, Stage, StageConfig};
use crate::backbone::{BackboneConfig, Variant};
use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;

pub type Sections = BTreeMap<String, BTreeMap<String, String>>;

pub fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| at("unterminated section header".into()))?.trim();
            if name.is_empty() {
                return Err(at("empty section name".into()));
            }
            current = name.to_string();
            out.entry(current.clone()).or_default();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(at("empty key".into()));
        }
        if out.entry(current.clone()).or_default().insert(k.to_string(), v.to_string()).is_some() {
            return Err(at(format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub variant: Variant,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let p = BackboneConfig::preset(Variant::FiveAttns);
        Self {
            variant: Variant::FiveAttns,
            stage_channels: p.stage_channels,
            blocks_per_stage: p.blocks_per_stage,
            input_size: p.input_size,
            seed: 0,
        }
    }
}

impl ModelSettings {
    pub fn backbone(&self, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.stage_channels,
            blocks_per_stage: self.blocks_per_stage,
            attn_plan: self.variant.attn_plan(),
            input_size: self.input_size,
            in_channels: 1,
            num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub image_size: usize,
    pub natural_count: usize,
    pub medical_count: usize,
    pub target_count: usize,
    pub noise_sigma: f64,
    /// Per-lobe lesion probability of positive target images.
    pub lesion_probability: f64,
    pub seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            image_size: 64,
            natural_count: 256,
            medical_count: 192,
            target_count: 400,
            noise_sigma: 0.03,
            lesion_probability: 0.3,
            seed: 0,
        }
    }
}

impl DataSettings {
    /// Phantom spec of the binary target task.
    pub fn target_spec(&self) -> PhantomSpec {
        let mut spec = PhantomSpec {
            image_size: self.image_size,
            num_classes: 2,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            ..PhantomSpec::default()
        };
        spec.lesion_probability_by_label.insert(1, self.lesion_probability);
        spec
    }

    /// Three-class medical source (normal, focal, diffuse), seeded apart
    /// from the target.
    pub fn medical_spec(&self) -> PhantomSpec {
        PhantomSpec {
            num_classes: 3,
            seed: self.seed.wrapping_add(1),
            ..self.target_spec()
        }
    }

    pub fn natural_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelSettings,
    pub data: DataSettings,
    pub stages: BTreeMap<Stage, StageConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelSettings::default(),
            data: DataSettings::default(),
            stages: Stage::ALL.iter().map(|&s| (s, StageConfig::defaults(s))).collect(),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{v}`")))
}

fn parse_list(section: &str, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(section, key, p.trim())).collect()
}

fn parse_four(section: &str, key: &str, v: &str) -> Result<[usize; 4]> {
    parse_list(section, key, v)?
        .try_into()
        .map_err(|_| Error::Config(format!("[{section}] {key}: expected four comma-separated values")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn unknown(section: &str, key: &str) -> Error {
    Error::Config(format!("[{section}] unknown key `{key}`"))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (section, entries) in parse_sections(text)? {
            let sec = section.as_str();
            for (key, v) in &entries {
                let k = key.as_str();
                match sec {
                    "model" => {
                        let m = &mut cfg.model;
                        match k {
                            "variant" => m.variant = v.parse()?,
                            "stage_channels" => m.stage_channels = parse_four(sec, k, v)?,
                            "blocks_per_stage" => m.blocks_per_stage = parse_four(sec, k, v)?,
                            "input_size" => m.input_size = parse(sec, k, v)?,
                            "seed" => m.seed = parse(sec, k, v)?,
                            _ => return Err(unknown(sec, k)),
                        }
                    }
                    "data" => {
                        let d = &mut cfg.data;
                        match k {
                            "image_size" => d.image_size = parse(sec, k, v)?,
                            "natural_count" => d.natural_count = parse(sec, k, v)?,
                            "medical_count" => d.medical_count = parse(sec, k, v)?,
                            "target_count" => d.target_count = parse(sec, k, v)?,
                            "noise_sigma" => d.noise_sigma = parse(sec, k, v)?,
                            "lesion_probability" => d.lesion_probability = parse(sec, k, v)?,
                            "seed" => d.seed = parse(sec, k, v)?,
                            _ => return Err(unknown(sec, k)),
                        }
                    }
                    "" => return Err(Error::Config(format!("key `{k}` outside any section"))),
                    _ => {
                        let stage: Stage = sec.parse()?;
                        let s = cfg.stages.get_mut(&stage).expect("all stages present");
                        match k {
                            "dataset" => s.dataset = PathBuf::from(v),
                            "epochs" => s.epochs = parse(sec, k, v)?,
                            "lr" => s.lr.initial = parse(sec, k, v)?,
                            "lr_decay" => s.lr.decay = parse(sec, k, v)?,
                            "lr_milestones" => s.lr.milestones = parse_list(sec, k, v)?,
                            "batch_size" => s.batch_size = parse(sec, k, v)?,
                            "momentum" => s.momentum = parse(sec, k, v)?,
                            "weight_decay" => s.weight_decay = parse(sec, k, v)?,
                            "seed" => s.seed = parse(sec, k, v)?,
                            "augment" => s.augment = v.parse::<AugmentKind>()?,
                            "num_classes" => s.num_classes = Some(parse(sec, k, v)?),
                            "tau" => s.ssl.tau = parse(sec, k, v)?,
                            "alpha1" => s.ssl.alpha1 = parse(sec, k, v)?,
                            "alpha2" => s.ssl.alpha2 = parse(sec, k, v)?,
                            "key_momentum" => s.ssl.key_momentum = parse(sec, k, v)?,
                            "queue_capacity" => s.ssl.queue_capacity = parse(sec, k, v)?,
                            "embed_dim" => s.ssl.embed_dim = parse(sec, k, v)?,
                            "unscaled_negatives" => s.ssl.unscaled_negatives = parse(sec, k, v)?,
                            "region_reduction" => s.ssl.region_reduction = v.parse()?,
                            _ => return Err(unknown(sec, k)),
                        }
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone(2).validate()?;
        if self.data.image_size < 16 {
            return Err(Error::Config("[data] image_size must be at least 16".into()));
        }
        if !(0.0..=1.0).contains(&self.data.lesion_probability) || self.data.noise_sigma < 0.0 {
            return Err(Error::Config("[data] lesion_probability in [0, 1] and noise_sigma >= 0 required".into()));
        }
        self.stages.values().try_for_each(StageConfig::validate)
    }

    /// Overrides the model, data and every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.data.seed = seed;
        for s in self.stages.values_mut() {
            s.seed = seed;
        }
        self
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        &self.stages[&stage]
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let d = &self.data;
        let _ = writeln!(s, "[model]\nvariant = {}\nstage_channels = {}", m.variant, join(&m.stage_channels));
        let _ = writeln!(s, "blocks_per_stage = {}\ninput_size = {}\nseed = {}", join(&m.blocks_per_stage), m.input_size, m.seed);
        let _ = writeln!(
            s,
            "\n[data]\nimage_size = {}\nnatural_count = {}\nmedical_count = {}\ntarget_count = {}",
            d.image_size, d.natural_count, d.medical_count, d.target_count
        );
        let _ = writeln!(s, "noise_sigma = {:?}\nlesion_probability = {:?}\nseed = {}", d.noise_sigma, d.lesion_probability, d.seed);
        for st in self.stages.values() {
            let _ = writeln!(s, "\n[{}]\ndataset = {}\nepochs = {}", st.stage, st.dataset.display(), st.epochs);
            let _ = writeln!(
                s,
                "lr = {:?}\nlr_decay = {:?}\nlr_milestones = {}\nbatch_size = {}",
                st.lr.initial,
                st.lr.decay,
                join(&st.lr.milestones),
                st.batch_size
            );
            let _ = writeln!(
                s,
                "momentum = {:?}\nweight_decay = {:?}\nseed = {}\naugment = {}",
                st.momentum,
                st.weight_decay,
                st.seed,
                st.augment.name()
            );
            if let Some(k) = st.num_classes {
                let _ = writeln!(s, "num_classes = {k}");
            }
            if st.stage == Stage::SstlM {
                let q = &st.ssl;
                let _ = writeln!(
                    s,
                    "tau = {:?}\nalpha1 = {:?}\nalpha2 = {:?}\nkey_momentum = {:?}\nqueue_capacity = {}\nembed_dim = {}\nunscaled_negatives = {}\nregion_reduction = {}",
                    q.tau,
                    q.alpha1,
                    q.alpha2,
                    q.key_momentum,
                    q.queue_capacity,
                    q.embed_dim,
                    q.unscaled_negatives,
                    q.region_reduction.name()
                );
            }
        }
        s
    }
}
