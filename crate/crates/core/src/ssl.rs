//! Self-supervised objectives: image-scale contrastive learning against a
//! momentum key encoder and a negative queue, the five-way region-aware loss,
//! their weighted combination, and one training step over an image batch.

use std::collections::VecDeque;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, Graph, Var};
use crate::backbone::{Mode, Model};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::image::GrayImage;
use crate::param::{ParamId, ParamStore, Sgd};
use crate::phantom::{augment, AugmentPolicy};
use crate::regions::{generate_regions, LobeId};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_MOMENTUM: f64 = 0.999;
pub const DEFAULT_ALPHA: f64 = 0.8;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub x_q: Vec<f64>,
    pub x_k_pos: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub tau: f64,
    /// Leave the negative logits unscaled by `1/tau`.
    pub unscaled_negatives: bool,
}

impl ContrastiveBatch {
    pub fn new(x_q: Vec<f64>, x_k_pos: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        let b = Self { x_q, x_k_pos, negatives, tau, unscaled_negatives: false };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return contract_err(format!("temperature must be positive, got {}", self.tau));
        }
        let d = self.x_q.len();
        if d == 0 || self.x_k_pos.len() != d || self.negatives.iter().any(|n| n.len() != d) {
            return dim_err("query, positive key and negatives must share one nonzero dimension");
        }
        Ok(())
    }

    /// `[q.k+ / tau, q.k-_1 / tau, ...]`.
    pub fn logits(&self) -> Vec<f64> {
        let neg_scale = if self.unscaled_negatives { 1.0 } else { 1.0 / self.tau };
        let mut out = Vec::with_capacity(self.negatives.len() + 1);
        out.push(dot(&self.x_q, &self.x_k_pos) / self.tau);
        out.extend(self.negatives.iter().map(|n| dot(&self.x_q, n) * neg_scale));
        out
    }
}

/// Log-loss of the `(n + 1)`-way softmax that picks the positive key.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let logits = batch.logits();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == logits[0] {
        // avoids cancelling lse against the positive logit when the loss is tiny
        return Ok(logits[1..].iter().map(|l| (l - m).exp()).sum::<f64>().ln_1p());
    }
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok((lse - logits[0]).max(0.0))
}

/// Per-row contrastive losses on a graph: `q` and `k_pos` are `b x d` unit
/// rows, `negatives` an `n x d` matrix shared by every row.
pub fn contrastive_loss_rows(
    g: &mut Graph,
    q: Var,
    k_pos: Var,
    negatives: Option<&Tensor>,
    tau: f64,
    unscaled_negatives: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return contract_err(format!("temperature must be positive, got {tau}"));
    }
    let b = g.shape(q)[0];
    let pos = g.row_dot(q, k_pos)?;
    let pos = g.scale(pos, 1.0 / tau);
    let logits = match negatives {
        Some(neg) => {
            let nv = g.constant(neg.clone());
            let s = g.matmul_t(q, nv, false, true)?;
            let s = if unscaled_negatives { s } else { g.scale(s, 1.0 / tau) };
            g.concat_cols(pos, s)?
        }
        None => pos,
    };
    g.cross_entropy(logits, &vec![0; b])
}

/// Query and key encoders of identical architecture.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub query: Model,
    pub key: Model,
    pub momentum: f64,
}

impl EncoderPair {
    /// The key encoder starts as an exact copy of the query encoder.
    pub fn new(query: Model, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return contract_err(format!("momentum {momentum} outside [0, 1]"));
        }
        let key = query.clone();
        Ok(Self { query, key, momentum })
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key.params, &self.query.params, self.momentum)
    }
}

/// `theta_k <- m * theta_k + (1 - m) * theta_q` for every parameter.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    if key.manifest() != query.manifest() {
        return Err(Error::ModelPairing("key and query encoders have different parameter manifests".into()));
    }
    for (k, q) in key.iter_mut().zip(query.iter()) {
        for (a, &b) in k.value.data_mut().iter_mut().zip(q.value.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO of key vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    keys: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return contract_err("queue capacity and key dimension must be positive");
        }
        Ok(Self { capacity, dim, keys: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.keys.iter()
    }

    /// Appends in order, evicting the oldest keys beyond capacity.
    pub fn enqueue<K: AsRef<[f64]>>(&mut self, keys: &[K]) -> Result<()> {
        if let Some(bad) = keys.iter().find(|k| k.as_ref().len() != self.dim) {
            return dim_err(format!("key of dimension {} for a queue of dimension {}", bad.as_ref().len(), self.dim));
        }
        for k in keys {
            if self.keys.len() == self.capacity {
                self.keys.pop_front();
            }
            self.keys.push_back(k.as_ref().to_vec());
        }
        Ok(())
    }

    /// `len x dim` matrix, or `None` when empty.
    pub fn as_matrix(&self) -> Option<Tensor> {
        if self.keys.is_empty() {
            return None;
        }
        let data = self.keys.iter().flatten().copied().collect();
        Some(Tensor::matrix(self.keys.len(), self.dim, data).expect("consistent queue"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: DEFAULT_ALPHA, alpha2: DEFAULT_ALPHA }
    }
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        let w = Self { alpha1, alpha2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || (self.alpha1 == 0.0 && self.alpha2 == 0.0) {
            return contract_err(format!(
                "loss weights must be nonnegative and not both zero, got ({}, {})",
                self.alpha1, self.alpha2
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionPrediction {
    pub logits: Vec<f64>,
    pub target: LobeId,
}

/// Sum of the five region cross-entropies of one image.
pub fn region_aware_loss(preds: &[RegionPrediction]) -> Result<f64> {
    if preds.len() != 5 {
        return contract_err(format!("region loss needs exactly five predictions, got {}", preds.len()));
    }
    let mut seen = [false; 5];
    for p in preds {
        if p.logits.len() != 5 {
            return dim_err(format!("region logits must have 5 entries, got {}", p.logits.len()));
        }
        seen[p.target.index()] = true;
    }
    if seen.iter().any(|s| !s) {
        return contract_err("region targets must cover all five lobes once");
    }
    preds.iter().map(|p| cross_entropy(&Tensor::vector(p.logits.clone()), p.target.index())).sum()
}

/// `alpha1 * l_cons + alpha2 * (l_ra_query + sum(l_ra_negs))`.
pub fn final_loss(l_cons: f64, l_ra_query: f64, l_ra_negs: &[f64], weights: &LossWeights) -> f64 {
    weights.alpha1 * l_cons + weights.alpha2 * (l_ra_query + l_ra_negs.iter().sum::<f64>())
}

/// Dedicated five-way linear classifier over backbone features.
#[derive(Clone, Debug)]
pub struct RegionHead {
    pub params: ParamStore,
    weight: ParamId,
    bias: ParamId,
}

impl RegionHead {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let weight =
            params.add("region_head.weight", Tensor::randn(&[feature_dim, 5], (1.0 / feature_dim as f64).sqrt(), rng))?;
        let bias = params.add("region_head.bias", Tensor::zeros(&[5]))?;
        Ok(Self { params, weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let w = g.param(&self.params, self.weight);
        let b = g.param(&self.params, self.bias);
        let z = g.matmul(features, w)?;
        g.add_bias(z, b)
    }
}

/// How a batch combines the region losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionReduction {
    /// Every image also carries the region losses of its in-batch negatives,
    /// so the batch objective holds `a2 * sum(Lra)`.
    #[default]
    Sum,
    /// Each image carries only its own region loss: `a2 * mean(Lra)`.
    Mean,
}

impl RegionReduction {
    pub fn name(self) -> &'static str {
        match self {
            RegionReduction::Sum => "sum",
            RegionReduction::Mean => "mean",
        }
    }
}

impl std::str::FromStr for RegionReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(RegionReduction::Sum),
            "mean" => Ok(RegionReduction::Mean),
            _ => Err(Error::Config(format!("unknown region reduction `{s}` (sum, mean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub tau: f64,
    pub weights: LossWeights,
    pub unscaled_negatives: bool,
    pub region_reduction: RegionReduction,
    pub augment: AugmentPolicy,
}

impl SslConfig {
    pub fn for_input(size: usize) -> Self {
        Self {
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            unscaled_negatives: false,
            region_reduction: RegionReduction::Sum,
            augment: AugmentPolicy::for_input(size),
        }
    }
}

/// Everything that evolves across SSL steps.
#[derive(Clone, Debug)]
pub struct SslState {
    pub pair: EncoderPair,
    pub region_head: RegionHead,
    pub queue: NegativeQueue,
}

impl SslState {
    /// The query model's head output is the embedding; its width sets the
    /// queue dimension.
    pub fn new<R: Rng + ?Sized>(query: Model, momentum: f64, queue_capacity: usize, rng: &mut R) -> Result<Self> {
        let dim = query.config.num_classes;
        let head = RegionHead::new(query.config.feature_dim(), rng)?;
        Ok(Self {
            pair: EncoderPair::new(query, momentum)?,
            region_head: head,
            queue: NegativeQueue::new(queue_capacity, dim)?,
        })
    }
}

/// Augmented inputs of one step, drawn once so the objective can be
/// re-evaluated on identical data.
#[derive(Clone, Debug)]
pub struct SslBatch {
    pub query_views: Tensor,
    pub key_views: Tensor,
    /// `5b` regions, image-major in lobe order.
    pub regions: Tensor,
    pub images: usize,
    pub skipped: usize,
}

fn stack_images(images: &[GrayImage]) -> Result<Tensor> {
    Tensor::stack(&images.iter().map(|i| i.to_tensor()).collect::<Vec<_>>())
}

/// Two augmented views per image plus its five augmented lobe regions.
/// Images without usable lung anatomy are skipped and counted.
pub fn prepare_batch<R: Rng + ?Sized>(images: &[GrayImage], policy: &AugmentPolicy, rng: &mut R) -> Result<SslBatch> {
    if images.is_empty() {
        return contract_err("SSL batch is empty");
    }
    let (mut qs, mut ks, mut rs) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for (i, img) in images.iter().enumerate() {
        let regions = match generate_regions(img) {
            Ok(r) => r,
            Err(Error::DegenerateAnatomy(msg)) => {
                warn!("skipping image {i} of SSL batch: {msg}");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        qs.push(augment(img, policy, rng)?);
        ks.push(augment(img, policy, rng)?);
        for r in &regions.regions {
            rs.push(augment(r, policy, rng)?);
        }
    }
    if qs.is_empty() {
        return Ok(SslBatch {
            query_views: Tensor::zeros(&[1]),
            key_views: Tensor::zeros(&[1]),
            regions: Tensor::zeros(&[1]),
            images: 0,
            skipped,
        });
    }
    Ok(SslBatch {
        query_views: stack_images(&qs)?,
        key_views: stack_images(&ks)?,
        regions: stack_images(&rs)?,
        images: qs.len(),
        skipped,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch mean of the per-image final loss.
    pub total: f64,
    /// Batch mean of the contrastive term.
    pub contrastive: f64,
    /// Batch mean of the per-image region loss.
    pub region: f64,
    pub images: usize,
    pub skipped: usize,
}

struct Forward {
    graph: Graph,
    total: Var,
    breakdown: LossBreakdown,
    keys: Tensor,
    query_stats: crate::backbone::StatSink,
    region_stats: crate::backbone::StatSink,
    key_stats: crate::backbone::StatSink,
}

/// Builds the loss graph. Each image's region negatives are the other
/// images of the batch, so the batch mean of
/// `a1*Lcons_i + a2*(Lra_i + sum_{j!=i} Lra_j)` is `a1*mean(Lcons) + a2*sum(Lra)`.
/// With [`RegionReduction::Mean`] the negatives are dropped from each image's
/// loss and the region term becomes `a2*mean(Lra)`.
fn forward(state: &SslState, batch: &SslBatch, cfg: &SslConfig) -> Result<Forward> {
    cfg.weights.validate()?;
    let b = batch.images;

    let mut kg = Graph::no_grad();
    let kx = kg.constant(batch.key_views.clone());
    let (kf, key_stats) = state.pair.key.forward_features_deferred(&mut kg, kx, Mode::Train)?;
    let kz = state.pair.key.head(&mut kg, kf)?;
    let kn = kg.l2_normalize_rows(kz)?;
    let keys = kg.value(kn).clone();

    let mut g = Graph::new();
    let qx = g.constant(batch.query_views.clone());
    let (qf, query_stats) = state.pair.query.forward_features_deferred(&mut g, qx, Mode::Train)?;
    let qz = state.pair.query.head(&mut g, qf)?;
    let q = g.l2_normalize_rows(qz)?;
    let k = g.constant(keys.clone());
    let negatives = state.queue.as_matrix();
    let l_cons = contrastive_loss_rows(&mut g, q, k, negatives.as_ref(), cfg.tau, cfg.unscaled_negatives)?;

    let rx = g.constant(batch.regions.clone());
    let (rf, region_stats) = state.pair.query.forward_features_deferred(&mut g, rx, Mode::Train)?;
    let rz = state.region_head.forward(&mut g, rf)?;
    let targets: Vec<usize> = (0..5 * b).map(|i| i % 5).collect();
    let ce = g.cross_entropy(rz, &targets)?;
    let ce = g.reshape(ce, &[b, 5])?;
    let l_ra = g.sum_last_axis(ce);

    let cons_mean = g.mean(l_cons);
    let ra_term = match cfg.region_reduction {
        RegionReduction::Sum => g.sum(l_ra),
        RegionReduction::Mean => g.mean(l_ra),
    };
    let a = g.scale(cons_mean, cfg.weights.alpha1);
    let r = g.scale(ra_term, cfg.weights.alpha2);
    let total = g.add(a, r)?;

    let cons = g.value(l_cons).data().to_vec();
    let ra = g.value(l_ra).data().to_vec();
    let per_image: Vec<f64> = (0..b)
        .map(|i| {
            let negs: Vec<f64> = match cfg.region_reduction {
                RegionReduction::Sum => (0..b).filter(|&j| j != i).map(|j| ra[j]).collect(),
                RegionReduction::Mean => Vec::new(),
            };
            final_loss(cons[i], ra[i], &negs, &cfg.weights)
        })
        .collect();
    let breakdown = LossBreakdown {
        total: per_image.iter().sum::<f64>() / b as f64,
        contrastive: cons.iter().sum::<f64>() / b as f64,
        region: ra.iter().sum::<f64>() / b as f64,
        images: b,
        skipped: batch.skipped,
    };
    Ok(Forward { graph: g, total, breakdown, keys, query_stats, region_stats, key_stats })
}

/// The objective at the current parameters; no state changes.
pub fn ssl_objective(state: &SslState, batch: &SslBatch, cfg: &SslConfig) -> Result<LossBreakdown> {
    if batch.images == 0 {
        return Ok(LossBreakdown { skipped: batch.skipped, ..Default::default() });
    }
    Ok(forward(state, batch, cfg)?.breakdown)
}

/// One optimization step: backpropagate into the query encoder and region
/// head, apply `opt`, momentum-update the key encoder, enqueue the positive
/// keys. A batch with no usable image leaves the state untouched.
pub fn ssl_step(state: &mut SslState, batch: &SslBatch, cfg: &SslConfig, opt: &mut Sgd) -> Result<LossBreakdown> {
    if batch.images == 0 {
        return Ok(LossBreakdown { skipped: batch.skipped, ..Default::default() });
    }
    let fw = forward(state, batch, cfg)?;
    let grads = fw.graph.backward(fw.total)?;
    state.pair.query.params.zero_grad();
    state.region_head.params.zero_grad();
    fw.graph.accumulate_into(&grads, &mut state.pair.query.params);
    fw.graph.accumulate_into(&grads, &mut state.region_head.params);
    opt.step(&mut state.pair.query.params);
    opt.step(&mut state.region_head.params);

    state.pair.query.commit_stats(fw.query_stats);
    state.pair.query.commit_stats(fw.region_stats);
    state.pair.key.commit_stats(fw.key_stats);
    state.pair.momentum_update()?;

    let d = fw.keys.shape()[1];
    let rows: Vec<&[f64]> = fw.keys.data().chunks(d).collect();
    state.queue.enqueue(&rows)?;
    Ok(fw.breakdown)
}
