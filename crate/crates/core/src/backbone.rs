//! Desk-scale residual networks with optional self-attention blocks.
//!
//! Layout: 3x3 stride-2 stem, four residual stages `res2..res5` (strides
//! 1, 2, 2, 2) of basic blocks, attention blocks appended after the last
//! residual block of a stage according to the attention plan, global average
//! pooling and a linear head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STAGE_NAMES: [&str; 4] = ["res2", "res3", "res4", "res5"];
const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    OneAttn,
    FiveAttns,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::OneAttn, Variant::FiveAttns];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::OneAttn => "one_attn",
            Variant::FiveAttns => "five_attns",
        }
    }

    /// Attention blocks appended per stage.
    pub fn attn_plan(self) -> BTreeMap<String, usize> {
        let pairs: &[(&str, usize)] = match self {
            Variant::Baseline => &[],
            Variant::OneAttn => &[("res3", 1)],
            Variant::FiveAttns => &[("res3", 2), ("res4", 2), ("res5", 1)],
        };
        pairs.iter().map(|&(s, n)| (s.to_string(), n)).collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub attn_plan: BTreeMap<String, usize>,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::preset(Variant::Baseline)
    }
}

impl BackboneConfig {
    /// Desk-scale defaults: 64x64 grayscale input, channels (16, 32, 64, 128),
    /// two blocks per stage.
    pub fn preset(variant: Variant) -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [2, 2, 2, 2],
            attn_plan: variant.attn_plan(),
            input_size: 64,
            in_channels: 1,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("stage channels and block counts must be positive".into()));
        }
        if self.input_size == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("input size, channels and class count must be positive".into()));
        }
        for stage in self.attn_plan.keys() {
            if !STAGE_NAMES.contains(&stage.as_str()) {
                return Err(Error::Config(format!("attention plan names unknown stage `{stage}`")));
            }
        }
        Ok(())
    }

    pub fn attn_count(&self, stage: &str) -> usize {
        self.attn_plan.get(stage).copied().unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Same network body, different head size.
    pub fn with_classes(&self, num_classes: usize) -> Self {
        Self { num_classes, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running statistics; the forward pass is a pure function.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: String, c: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[c]))?;
        Ok(Self { name, gamma, beta, running_mean: vec![0.0; c], running_var: vec![1.0; c] })
    }

    fn update_running(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    kernel: ParamId,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct StageLayers {
    blocks: Vec<ResidualBlock>,
    attns: Vec<AttentionBlock>,
}

/// A residual network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub bn: Vec<BatchNorm>,
    stem: ConvBn,
    stages: Vec<StageLayers>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Pending running-statistics updates of one forward pass.
pub type StatSink = Vec<(usize, BatchStats)>;

fn kaiming<R: Rng + ?Sized>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    Tensor::randn(&[k, k, cin, cout], std, rng)
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let conv_bn = |params: &mut ParamStore,
                           bn: &mut Vec<BatchNorm>,
                           name: String,
                           k: usize,
                           cin: usize,
                           cout: usize,
                           stride: usize,
                           rng: &mut R|
         -> Result<ConvBn> {
            let kernel = params.add(format!("{name}.conv"), kaiming(k, cin, cout, rng))?;
            bn.push(BatchNorm::new(params, format!("{name}.bn"), cout)?);
            Ok(ConvBn { kernel, bn: bn.len() - 1, stride, pad: k / 2 })
        };

        let c0 = config.stage_channels[0];
        let stem = conv_bn(&mut params, &mut bn, "stem".into(), 3, config.in_channels, c0, 2, rng)?;
        let mut stages = Vec::new();
        let mut cin = c0;
        for (si, stage) in STAGE_NAMES.iter().enumerate() {
            let cout = config.stage_channels[si];
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage[si] {
                let stride = if bi == 0 { STAGE_STRIDES[si] } else { 1 };
                let prefix = format!("{stage}.{bi}");
                let conv1 = conv_bn(&mut params, &mut bn, format!("{prefix}.a"), 3, cin, cout, stride, rng)?;
                let conv2 = conv_bn(&mut params, &mut bn, format!("{prefix}.b"), 3, cout, cout, 1, rng)?;
                let shortcut = if stride != 1 || cin != cout {
                    Some(conv_bn(&mut params, &mut bn, format!("{prefix}.down"), 1, cin, cout, stride, rng)?)
                } else {
                    None
                };
                blocks.push(ResidualBlock { conv1, conv2, shortcut });
                cin = cout;
            }
            let attns = (0..config.attn_count(stage))
                .map(|ai| AttentionBlock::with_default_dims(&mut params, &format!("{stage}.attn{ai}"), cout, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageLayers { blocks, attns });
        }
        let feat = config.feature_dim();
        let head_w = params.add(
            "head.weight",
            Tensor::randn(&[feat, config.num_classes], (1.0 / feat as f64).sqrt(), rng),
        )?;
        let head_b = params.add("head.bias", Tensor::zeros(&[config.num_classes]))?;
        Ok(Self { config, params, bn, stem, stages, head_w, head_b })
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = (&'static str, &AttentionBlock)> {
        STAGE_NAMES.iter().zip(&self.stages).flat_map(|(s, st)| st.attns.iter().map(move |a| (*s, a)))
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Re-initializes the linear head for `num_classes` outputs.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        let feat = self.config.feature_dim();
        self.params
            .replace(self.head_w, Tensor::randn(&[feat, num_classes], (1.0 / feat as f64).sqrt(), rng));
        self.params.replace(self.head_b, Tensor::zeros(&[num_classes]));
        self.config.num_classes = num_classes;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w, c) = match *shape {
            [h, w, c] | [_, h, w, c] => (h, w, c),
            _ => return dim_err(format!("expected an image tensor, got {shape:?}")),
        };
        let s = self.config.input_size;
        if h != s || w != s {
            return dim_err(format!("input is {h}x{w}, model expects {s}x{s}"));
        }
        if c != self.config.in_channels {
            return dim_err(format!("input has {c} channels, model expects {}", self.config.in_channels));
        }
        Ok(())
    }

    fn conv_bn(
        &self,
        g: &mut Graph,
        x: Var,
        layer: &ConvBn,
        mode: Mode,
        sink: &mut StatSink,
    ) -> Result<Var> {
        let k = g.param(&self.params, layer.kernel);
        let y = g.conv2d(x, k, layer.stride, layer.pad)?;
        let bn = &self.bn[layer.bn];
        let gamma = g.param(&self.params, bn.gamma);
        let beta = g.param(&self.params, bn.beta);
        match mode {
            Mode::Train => {
                let (out, stats) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
                sink.push((layer.bn, stats));
                Ok(out)
            }
            Mode::Eval => g.batch_norm_eval(y, gamma, beta, &bn.running_mean, &bn.running_var, BN_EPS),
        }
    }

    fn block(&self, g: &mut Graph, x: Var, b: &ResidualBlock, mode: Mode, sink: &mut StatSink) -> Result<Var> {
        let h = self.conv_bn(g, x, &b.conv1, mode, sink)?;
        let h = g.relu(h);
        let h = self.conv_bn(g, h, &b.conv2, mode, sink)?;
        let skip = match &b.shortcut {
            Some(s) => self.conv_bn(g, x, s, mode, sink)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }

    fn features_inner(&self, g: &mut Graph, x: Var, mode: Mode, sink: &mut StatSink) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let x = if g.shape(x).len() == 3 {
            let s = g.shape(x).to_vec();
            g.reshape(x, &[1, s[0], s[1], s[2]])?
        } else {
            x
        };
        let h = self.conv_bn(g, x, &self.stem, mode, sink)?;
        let mut h = g.relu(h);
        for stage in &self.stages {
            for b in &stage.blocks {
                h = self.block(g, h, b, mode, sink)?;
            }
            for a in &stage.attns {
                h = a.forward(g, &self.params, h)?.output;
            }
        }
        g.global_avg_pool(h)
    }

    /// Like [`Model::forward_features`] but returns the batch statistics
    /// instead of committing them; see [`Model::commit_stats`].
    pub fn forward_features_deferred(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, StatSink)> {
        let mut sink = Vec::new();
        let f = self.features_inner(g, x, mode, &mut sink)?;
        Ok((f, sink))
    }

    pub fn commit_stats(&mut self, sink: StatSink) {
        self.commit(sink);
    }

    /// Replaces every running mean/variance with the size-weighted average of
    /// the batch statistics the current weights produce on `batches`.
    pub fn recalibrate_batch_norm(&mut self, batches: &[Tensor]) -> Result<()> {
        let mut mean: Vec<Vec<f64>> = self.bn.iter().map(|b| vec![0.0; b.running_mean.len()]).collect();
        let mut var = mean.clone();
        let mut total = 0.0;
        for batch in batches {
            let mut g = Graph::no_grad();
            let x = g.constant(batch.clone());
            let (_, sink) = self.forward_features_deferred(&mut g, x, Mode::Train)?;
            let w = if batch.ndim() == 4 { batch.shape()[0] as f64 } else { 1.0 };
            for (i, stats) in sink {
                for (acc, m) in mean[i].iter_mut().zip(&stats.mean) {
                    *acc += w * m;
                }
                for (acc, v) in var[i].iter_mut().zip(&stats.var) {
                    *acc += w * v;
                }
            }
            total += w;
        }
        if total == 0.0 {
            return Ok(());
        }
        for (b, (m, v)) in self.bn.iter_mut().zip(mean.into_iter().zip(var)) {
            b.running_mean = m.into_iter().map(|x| x / total).collect();
            b.running_var = v.into_iter().map(|x| x / total).collect();
        }
        Ok(())
    }

    fn commit(&mut self, sink: StatSink) {
        for (i, stats) in sink {
            self.bn[i].update_running(&stats);
        }
    }

    /// Pooled `n x feature_dim` features. In [`Mode::Train`] the running
    /// batch-norm statistics are updated.
    pub fn forward_features(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let mut sink = Vec::new();
        let f = self.features_inner(g, x, mode, &mut sink)?;
        self.commit(sink);
        Ok(f)
    }

    /// Applies the linear head to pooled features.
    pub fn head(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        let z = g.matmul(features, w)?;
        g.add_bias(z, b)
    }

    /// `n x num_classes` logits.
    pub fn forward_logits(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let f = self.forward_features(g, x, mode)?;
        self.head(g, f)
    }

    /// Eval-mode logits without touching any state.
    pub fn eval_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = self.features_inner(g, x, Mode::Eval, &mut Vec::new())?;
        self.head(g, f)
    }

    fn as_batch(&self, image: &Tensor) -> Result<Tensor> {
        match *image.shape() {
            [h, w] if self.config.in_channels == 1 => image.reshape(&[1, h, w, 1]),
            [h, w, c] => image.reshape(&[1, h, w, c]),
            [_, _, _, _] => Ok(image.clone()),
            _ => dim_err(format!("expected an image tensor, got {:?}", image.shape())),
        }
    }

    /// Eval-mode pooled features of one image (`h x w`, `h x w x c`) or a
    /// batch (`n x h x w x c`). A single image yields a feature vector.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let batch = self.as_batch(image)?;
        let mut g = Graph::no_grad();
        let x = g.constant(batch);
        let f = self.features_inner(&mut g, x, Mode::Eval, &mut Vec::new())?;
        let out = g.value(f).clone();
        if image.ndim() < 4 {
            Ok(out.index_axis0(0))
        } else {
            Ok(out)
        }
    }

    /// Eval-mode logits, shaped like [`Model::features`].
    pub fn classify(&self, image: &Tensor) -> Result<Tensor> {
        let batch = self.as_batch(image)?;
        let mut g = Graph::no_grad();
        let x = g.constant(batch);
        let z = self.eval_logits(&mut g, x)?;
        let out = g.value(z).clone();
        if image.ndim() < 4 {
            Ok(out.index_axis0(0))
        } else {
            Ok(out)
        }
    }

    /// Named non-trainable buffers (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        self.bn
            .iter()
            .flat_map(|b| {
                [
                    (format!("{}.running_mean", b.name), b.running_mean.clone()),
                    (format!("{}.running_var", b.name), b.running_var.clone()),
                ]
            })
            .collect()
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for b in &mut self.bn {
            let target = if name == format!("{}.running_mean", b.name) {
                &mut b.running_mean
            } else if name == format!("{}.running_var", b.name) {
                &mut b.running_var
            } else {
                continue;
            };
            if target.len() != values.len() {
                return dim_err(format!("buffer {name} has {} entries, got {}", target.len(), values.len()));
            }
            target.copy_from_slice(values);
            return Ok(());
        }
        Err(Error::Checkpoint(format!("unknown buffer `{name}`")))
    }
}

/// Builds a model from `config`; see [`Model::new`].
pub fn build_network<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Model> {
    Model::new(config, rng)
}
