use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, DataSettings, PipelineConfig, Stage, StageConfig};
use crate::autodiff::{softmax_in_place, Graph};
use crate::backbone::{Mode, Model};
use crate::error::{contract_err, Error, Result};
use crate::image::GrayImage;
use crate::metrics::EvalResult;
use crate::param::Sgd;
use crate::phantom::{
    augment, center_crop, generate_phantom, generate_textures, read_dataset, write_dataset, AugmentPolicy, Split,
};
use crate::ssl::{prepare_batch, ssl_step, LossWeights, RegionReduction, SslConfig, SslState};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy of the training predictions made during the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub contrastive: f64,
    pub region: f64,
    pub skipped: usize,
}

/// Settings echo plus per-epoch loss breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslHistory {
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub key_momentum: f64,
    pub unscaled_negatives: bool,
    pub region_reduction: RegionReduction,
    pub epochs: Vec<SslEpochRecord>,
}

fn stack(images: &[GrayImage]) -> Result<Tensor> {
    Tensor::stack(&images.iter().map(GrayImage::to_tensor).collect::<Vec<_>>())
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn check_labels(cfg: &StageConfig, labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(expected) = cfg.num_classes {
        if expected != num_classes {
            return Err(Error::Config(format!(
                "{}: configured for {expected} classes, dataset has {num_classes}",
                cfg.stage
            )));
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("{}: label {l} outside {num_classes} classes", cfg.stage)));
    }
    Ok(())
}

/// Supervised training with cross-entropy and step-decayed SGD. The head is
/// re-initialized when its width differs from `num_classes`.
pub fn run_stage_supervised(
    model: &mut Model,
    cfg: &StageConfig,
    images: &[GrayImage],
    labels: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if images.len() != labels.len() {
        return contract_err("image and label counts differ");
    }
    check_labels(cfg, labels, num_classes)?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if images.is_empty() {
        return Err(Error::Config(format!("{}: no training images", cfg.stage)));
    }
    if model.config.num_classes != num_classes {
        model.reset_head(num_classes, rng);
    }
    let policy = cfg.augment.policy(model.config.input_size);
    let mut opt = Sgd::new(cfg.lr.initial, cfg.momentum, cfg.weight_decay)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr.at(epoch);
        order.shuffle(rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let views = chunk.iter().map(|&i| augment(&images[i], &policy, rng)).collect::<Result<Vec<_>>>()?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(stack(&views)?);
            let logits = model.forward_logits(&mut g, x, Mode::Train)?;
            let ce = g.cross_entropy(logits, &targets)?;
            let loss = g.mean(ce);
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            g.accumulate_into(&grads, &mut model.params);
            opt.step(&mut model.params);

            loss_sum += g.value(loss).item() * chunk.len() as f64;
            let z = g.value(logits);
            correct += z.data().chunks(num_classes).zip(&targets).filter(|(row, &t)| argmax(row) == t).count();
        }
        let rec = EpochRecord {
            epoch,
            lr: opt.lr,
            loss: loss_sum / images.len() as f64,
            accuracy: correct as f64 / images.len() as f64,
        };
        info!("{} epoch {}: loss {:.4} acc {:.3} lr {}", cfg.stage, epoch + 1, rec.loss, rec.accuracy, rec.lr);
        history.push(rec);
    }
    recalibrate(model, images, cfg.batch_size)?;
    Ok(history)
}

/// Batch-norm running statistics from the final weights over the
/// center-cropped training images.
fn recalibrate(model: &mut Model, images: &[GrayImage], batch_size: usize) -> Result<()> {
    let policy = AugmentPolicy::for_input(model.config.input_size);
    let batches = images
        .chunks(batch_size)
        .map(|chunk| stack(&chunk.iter().map(|i| center_crop(i, &policy)).collect::<Result<Vec<_>>>()?))
        .collect::<Result<Vec<_>>>()?;
    model.recalibrate_batch_norm(&batches)
}

/// Self-supervised pretraining. The model's head becomes the embedding
/// projection (`embed_dim` wide); the key encoder is discarded afterwards.
pub fn run_stage_ssl(model: &mut Model, cfg: &StageConfig, images: &[GrayImage], rng: &mut ChaCha8Rng) -> Result<SslHistory> {
    cfg.validate()?;
    let s = &cfg.ssl;
    let mut history = SslHistory {
        tau: s.tau,
        alpha1: s.alpha1,
        alpha2: s.alpha2,
        key_momentum: s.key_momentum,
        unscaled_negatives: s.unscaled_negatives,
        region_reduction: s.region_reduction,
        epochs: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if images.is_empty() {
        return Err(Error::Config(format!("{}: no training images", cfg.stage)));
    }
    if model.config.num_classes != s.embed_dim {
        model.reset_head(s.embed_dim, rng);
    }
    let ssl_cfg = SslConfig {
        tau: s.tau,
        weights: LossWeights::new(s.alpha1, s.alpha2)?,
        unscaled_negatives: s.unscaled_negatives,
        region_reduction: s.region_reduction,
        augment: cfg.augment.policy(model.config.input_size),
    };
    let mut state = SslState::new(model.clone(), s.key_momentum, s.queue_capacity, rng)?;
    let mut opt = Sgd::new(cfg.lr.initial, cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr.at(epoch);
        order.shuffle(rng);
        let (mut total, mut cons, mut region, mut seen, mut skipped) = (0.0, 0.0, 0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_images: Vec<GrayImage> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = prepare_batch(&batch_images, &ssl_cfg.augment, rng)?;
            let l = ssl_step(&mut state, &batch, &ssl_cfg, &mut opt)?;
            let w = l.images as f64;
            total += l.total * w;
            cons += l.contrastive * w;
            region += l.region * w;
            seen += l.images;
            skipped += l.skipped;
        }
        let denom = seen.max(1) as f64;
        let rec = SslEpochRecord {
            epoch,
            lr: opt.lr,
            total: total / denom,
            contrastive: cons / denom,
            region: region / denom,
            skipped,
        };
        info!(
            "sstl_m epoch {}: total {:.4} (contrastive {:.4}, region {:.4}) skipped {}",
            epoch + 1,
            rec.total,
            rec.contrastive,
            rec.region,
            rec.skipped
        );
        history.epochs.push(rec);
    }
    *model = state.pair.query;
    recalibrate(model, images, cfg.batch_size)?;
    Ok(history)
}

/// Fresh `num_classes` head on the given backbone, then supervised training.
pub fn finetune(
    model: &mut Model,
    cfg: &StageConfig,
    images: &[GrayImage],
    labels: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    check_labels(cfg, labels, num_classes)?;
    model.reset_head(num_classes, rng);
    run_stage_supervised(model, cfg, images, labels, num_classes, rng)
}

/// Eval-mode logits of center-cropped images, `n x num_classes`.
pub fn eval_batch(model: &Model, images: &[GrayImage]) -> Result<Tensor> {
    let policy = AugmentPolicy::for_input(model.config.input_size);
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(images.len() * k);
    for chunk in images.chunks(EVAL_CHUNK) {
        let crops = chunk.iter().map(|img| center_crop(img, &policy)).collect::<Result<Vec<_>>>()?;
        out.extend_from_slice(model.classify(&stack(&crops)?)?.data());
    }
    Tensor::matrix(images.len(), k, out)
}

/// Softmax outputs of `model` on each image (the LEEP dummy distributions).
pub fn dummy_distributions(model: &Model, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
    let logits = eval_batch(model, images)?;
    let k = model.config.num_classes;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            p
        })
        .collect())
}

/// Deterministic binary evaluation: argmax predictions, positive-class
/// probability as the AUC score.
pub fn evaluate(model: &Model, images: &[GrayImage], labels: &[usize]) -> Result<EvalResult> {
    if model.config.num_classes != 2 {
        return contract_err(format!("evaluation needs a binary head, model has {}", model.config.num_classes));
    }
    if images.len() != labels.len() || images.is_empty() {
        return contract_err("evaluation needs matching, nonempty images and labels");
    }
    let probs = dummy_distributions(model, images)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    EvalResult::compute(&preds, &scores, labels)
}

/// Dataset directory names under the data root, in stage order.
pub const DATASET_DIRS: [&str; 3] = ["natural", "medical", "target"];

/// Writes the natural-texture source, the three-class medical source and the
/// binary target under `root`; returns `(name, images)` per dataset.
pub fn generate_datasets(settings: &DataSettings, root: &Path) -> Result<Vec<(&'static str, usize)>> {
    let natural = generate_textures(settings.image_size, settings.natural_count, settings.noise_sigma, settings.natural_seed())?;
    let medical_spec = settings.medical_spec();
    let medical = generate_phantom(&medical_spec, settings.medical_count)?;
    let target_spec = settings.target_spec();
    let target = generate_phantom(&target_spec, settings.target_count)?;
    let metas = [
        serde_json::json!({ "kind": "textures", "num_classes": natural.num_classes, "seed": settings.natural_seed(),
            "image_size": settings.image_size, "noise_sigma": settings.noise_sigma }),
        serde_json::json!({ "kind": "phantom", "num_classes": medical.num_classes, "spec": medical_spec }),
        serde_json::json!({ "kind": "phantom", "num_classes": target.num_classes, "spec": target_spec }),
    ];
    let mut out = Vec::new();
    for ((name, data), meta) in DATASET_DIRS.into_iter().zip([&natural, &medical, &target]).zip(&metas) {
        write_dataset(&root.join(name), data, meta)?;
        info!("wrote {} images to {}", data.len(), root.join(name).display());
        out.push((name, data.len()));
    }
    Ok(out)
}

/// Result of one orchestrated stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub history: serde_json::Value,
    /// Test-split evaluation, for the finetune stage.
    pub eval: Option<EvalResult>,
}

fn same_backbone(a: &crate::backbone::BackboneConfig, b: &crate::backbone::BackboneConfig) -> bool {
    a.with_classes(1) == b.with_classes(1)
}

/// Runs `stage` on its configured dataset (relative paths resolve against
/// `root`), starting from `prev` or from a fresh model.
pub fn run_stage(prev: Option<Checkpoint>, stage: Stage, config: &PipelineConfig, root: &Path) -> Result<StageOutcome> {
    let cfg = config.stage(stage);
    cfg.validate()?;
    let applied = prev.as_ref().map(|c| c.provenance.clone()).unwrap_or_default();
    Stage::check_order(&applied, stage)?;
    let dir = if cfg.dataset.is_absolute() { cfg.dataset.clone() } else { root.join(&cfg.dataset) };
    let data = read_dataset(&dir)?;
    let (images, labels) = data.split(Split::Train);

    let mut model = match prev {
        Some(c) => {
            let want = config.model.backbone(c.model.config.num_classes);
            if !same_backbone(&c.model.config, &want) {
                return Err(Error::Checkpoint("checkpoint backbone differs from the configured model".into()));
            }
            c.model
        }
        None => Model::new(config.model.backbone(data.num_classes), &mut ChaCha8Rng::seed_from_u64(config.model.seed))?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval = None;
    let history = match stage {
        Stage::StlN | Stage::StlM => {
            let h = run_stage_supervised(&mut model, cfg, &images, &labels, data.num_classes, &mut rng)?;
            serde_json::json!({ "stage": stage.name(), "epochs": h })
        }
        Stage::SstlM => {
            let h = run_stage_ssl(&mut model, cfg, &images, &mut rng)?;
            let mut v = serde_json::to_value(&h)?;
            v["stage"] = stage.name().into();
            v
        }
        Stage::Finetune => {
            let h = finetune(&mut model, cfg, &images, &labels, data.num_classes, &mut rng)?;
            let (test_images, test_labels) = data.split(Split::Test);
            if data.num_classes == 2 && !test_images.is_empty() {
                eval = Some(evaluate(&model, &test_images, &test_labels)?);
            }
            serde_json::json!({ "stage": stage.name(), "epochs": h })
        }
    };
    let mut provenance = applied;
    provenance.push(stage);
    Ok(StageOutcome { checkpoint: Checkpoint { model, provenance, rng }, history, eval })
}
