//! Deterministic synthetic lung phantoms, a texture dataset for natural-image
//! style pretraining, the training-time augmentation pipeline and the on-disk
//! dataset layout.
//!
//! Phantom classes: `0` normal, `1` focal lesions (at least one bright blob in
//! a seeded lobe), `2` diffuse speckled opacity (only when `num_classes == 3`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::image::{read_pgm, write_pgm, GrayImage, Mask};
use crate::regions::LobeId;

const BACKGROUND: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Per-lobe probability of a lesion, keyed by label.
    pub lesion_probability_by_label: BTreeMap<usize, f64>,
    /// Base lung intensity per lobe, in `LobeId::ALL` order.
    pub lobe_intensity_profile: [f64; 5],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 2,
            lesion_probability_by_label: BTreeMap::from([(0, 0.0), (1, 0.3), (2, 0.6)]),
            lobe_intensity_profile: [0.62, 0.57, 0.52, 0.60, 0.54],
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Generator-side ground truth of one phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    pub lung_mask: Mask,
    pub lesion_mask: Mask,
    /// `(x0, y0, w, h)` per lobe in `LobeId::ALL` order.
    pub lobe_boxes: [(usize, usize, usize, usize); 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
    /// Present for generated phantoms; empty for textures and loaded sets
    /// without masks.
    pub truth: Vec<PhantomTruth>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Copies of the images and labels of one split.
    pub fn split(&self, split: Split) -> (Vec<GrayImage>, Vec<usize>) {
        let idx = self.indices(split);
        (idx.iter().map(|&i| self.images[i].clone()).collect(), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Independent generator stream for item `index` of a dataset seeded by
/// `seed`.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn master_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Balanced labels (`i mod k`) in seeded order, plus a 50/25/25 split.
fn labels_and_splits(n: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Split>) {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = n / 2;
    let n_val = n / 4;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    (labels, splits)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.ax;
        let dy = (y as f64 - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

fn render_phantom(spec: &PhantomSpec, label: usize, rng: &mut ChaCha8Rng) -> (GrayImage, PhantomTruth) {
    let s = spec.image_size;
    let sf = s as f64;
    let mut jitter = |v: f64| v * (1.0 + rng.random_range(-0.06..0.06));
    let right = Ellipse { cx: jitter(0.31 * sf), cy: jitter(0.50 * sf), ax: jitter(0.15 * sf), ay: jitter(0.34 * sf) };
    let left = Ellipse { cx: jitter(0.69 * sf), cy: jitter(0.52 * sf), ax: jitter(0.13 * sf), ay: jitter(0.31 * sf) };

    let mut lung = Mask::empty(s, s);
    let mut side = vec![0u8; s * s]; // 1 = right lung (image-left), 2 = left lung
    for y in 0..s {
        for x in 0..s {
            if right.contains(x, y) {
                lung.set(x, y, true);
                side[y * s + x] = 1;
            } else if left.contains(x, y) {
                lung.set(x, y, true);
                side[y * s + x] = 2;
            }
        }
    }
    // lobe bands from each lung's own extent
    let extent = |which: u8| {
        let (mut x0, mut y0, mut x1, mut y1) = (s, s, 0, 0);
        for y in 0..s {
            for x in 0..s {
                if side[y * s + x] == which {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0, y0, x1, y1)
    };
    let (rx0, ry0, rx1, ry1) = extent(1);
    let (lx0, ly0, lx1, ly1) = extent(2);
    let rh = ry1 - ry0 + 1;
    let lh = ly1 - ly0 + 1;
    let r_edges = [0, rh / 3, 2 * rh / 3, rh];
    let l_edges = [0, lh / 2, lh];
    let mut lobe_boxes = [(0, 0, 0, 0); 5];
    for i in 0..3 {
        lobe_boxes[i] = (rx0, ry0 + r_edges[i], rx1 - rx0 + 1, r_edges[i + 1] - r_edges[i]);
    }
    for i in 0..2 {
        lobe_boxes[3 + i] = (lx0, ly0 + l_edges[i], lx1 - lx0 + 1, l_edges[i + 1] - l_edges[i]);
    }
    let lobe_of = |x: usize, y: usize| -> Option<usize> {
        match side[y * s + x] {
            1 => Some(((y - ry0) * 3 / rh).min(2)),
            2 => Some(3 + ((y - ly0) * 2 / lh).min(1)),
            _ => None,
        }
    };

    let mut img = GrayImage::filled(s, s, BACKGROUND);
    for y in 0..s {
        for x in 0..s {
            if let Some(l) = lobe_of(x, y) {
                img.set(x, y, spec.lobe_intensity_profile[l]);
            }
        }
    }

    let mut lesion = Mask::empty(s, s);
    let p = spec.lesion_probability_by_label.get(&label).copied().unwrap_or(0.0);
    let mut affected: Vec<usize> = (0..5).filter(|_| rng.random_bool(p.clamp(0.0, 1.0))).collect();
    if label != 0 && affected.is_empty() {
        affected.push(rng.random_range(0..5));
    }
    for &lobe in &affected {
        let pixels: Vec<(usize, usize)> =
            (0..s * s).map(|i| (i % s, i / s)).filter(|&(x, y)| lobe_of(x, y) == Some(lobe)).collect();
        if pixels.is_empty() {
            continue;
        }
        if label == 2 {
            // diffuse opacity: sparse speckle over the whole lobe
            for &(x, y) in &pixels {
                if rng.random_bool(0.35) {
                    img.set(x, y, (img.get(x, y) + 0.18).min(1.0));
                    lesion.set(x, y, true);
                }
            }
        } else {
            let (cx, cy) = pixels[rng.random_range(0..pixels.len())];
            let r = rng.random_range(0.045..0.075) * sf;
            let amp = rng.random_range(0.25..0.35);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                    if d2 <= r * r && lung.get(x, y) {
                        img.set(x, y, (img.get(x, y) + amp * (1.0 - 0.5 * d2 / (r * r))).min(1.0));
                        lesion.set(x, y, true);
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for v in img.data.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    (img.quantized(), PhantomTruth { lung_mask: lung, lesion_mask: lesion, lobe_boxes })
}

/// Generates `n` phantoms. Identical `(spec, n)` gives an identical dataset.
pub fn generate_phantom(spec: &PhantomSpec, n: usize) -> Result<LabeledDataset> {
    if n == 0 {
        return contract_err("phantom count must be at least 1");
    }
    if !(2..=3).contains(&spec.num_classes) {
        return contract_err(format!("phantoms support 2 or 3 classes, got {}", spec.num_classes));
    }
    if spec.image_size < 16 {
        return contract_err(format!("phantom image size {} is below the 16 px minimum", spec.image_size));
    }
    let (labels, splits) = labels_and_splits(n, spec.num_classes, &mut master_rng(spec.seed));
    let (images, truth): (Vec<_>, Vec<_>) = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| render_phantom(spec, label, &mut item_rng(spec.seed, i)))
        .unzip();
    Ok(LabeledDataset { images, labels, splits, num_classes: spec.num_classes, truth })
}

fn render_texture(size: usize, label: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut img = GrayImage::filled(size, size, 0.0);
    let period = rng.random_range(3.0..8.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let contrast = rng.random_range(0.25..0.45);
    let base = rng.random_range(0.35..0.65);
    let blobs: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64), rng.random_range(2.0..5.0))
        })
        .collect();
    let w = std::f64::consts::TAU / period;
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let v = match label {
                0 => (w * yf + phase).sin(),
                1 => (w * xf + phase).sin(),
                2 => (w * xf + phase).sin().signum() * (w * yf + phase).sin().signum(),
                _ => {
                    let near = blobs.iter().any(|&(bx, by, r)| (xf - bx).powi(2) + (yf - by).powi(2) <= r * r);
                    if near {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            img.set(x, y, base + contrast * v);
        }
    }
    let noise = Normal::new(0.0, noise_sigma.max(1e-12)).expect("finite sigma");
    for v in img.data.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img.quantized()
}

/// Natural-image stand-in: four texture classes (horizontal stripes, vertical
/// stripes, checkerboard, blobs) with random period, phase and contrast.
pub fn generate_textures(image_size: usize, n: usize, noise_sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return contract_err("texture count must be at least 1");
    }
    let (labels, splits) = labels_and_splits(n, 4, &mut master_rng(seed));
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| render_texture(image_size, l, noise_sigma, &mut item_rng(seed, i)))
        .collect();
    Ok(LabeledDataset { images, labels, splits, num_classes: 4, truth: Vec::new() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub scale_to: usize,
    pub crop_to: usize,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub gray_prob: f64,
    /// Multiplicative brightness range `1 +- brightness`.
    pub brightness: f64,
    /// Contrast range `1 +- contrast` around the image mean.
    pub contrast: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::for_input(64)
    }
}

impl AugmentPolicy {
    /// Scale to `size + size / 8`, crop `size`, all techniques at 0.5 with
    /// +-20% brightness and contrast.
    pub fn for_input(size: usize) -> Self {
        Self {
            scale_to: size + size / 8,
            crop_to: size,
            flip_prob: 0.5,
            jitter_prob: 0.5,
            gray_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
        }
    }

    /// Only the supervised-stage flip; no photometric changes.
    pub fn flip_only(size: usize) -> Self {
        Self { jitter_prob: 0.0, gray_prob: 0.0, ..Self::for_input(size) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_to == 0 || self.crop_to > self.scale_to {
            return contract_err(format!(
                "crop {} must be positive and fit inside the scaled {} image",
                self.crop_to, self.scale_to
            ));
        }
        for p in [self.flip_prob, self.jitter_prob, self.gray_prob] {
            if !(0.0..=1.0).contains(&p) {
                return contract_err(format!("probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Brightness/contrast jitter, the single-channel stand-in for color jitter.
pub fn jitter(img: &GrayImage, brightness: f64, contrast: f64) -> GrayImage {
    let mean = img.mean();
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
    }
    out
}

/// Scale, random crop, then flip / jitter / grayscale each with its own
/// probability. Output is `crop_to x crop_to`. Grayscale conversion is the
/// identity on single-channel input but still consumes its random draw.
pub fn augment<R: Rng + ?Sized>(img: &GrayImage, policy: &AugmentPolicy, rng: &mut R) -> Result<GrayImage> {
    policy.validate()?;
    let scaled = img.resize_bilinear(policy.scale_to, policy.scale_to)?;
    let room = policy.scale_to - policy.crop_to;
    let x0 = rng.random_range(0..=room);
    let y0 = rng.random_range(0..=room);
    let mut out = scaled.window(x0, y0, policy.crop_to, policy.crop_to)?;
    if rng.random_bool(policy.flip_prob) {
        out = out.flip_horizontal();
    }
    let do_jitter = rng.random_bool(policy.jitter_prob);
    let b = 1.0 + rng.random_range(-1.0..=1.0) * policy.brightness;
    let c = 1.0 + rng.random_range(-1.0..=1.0) * policy.contrast;
    if do_jitter {
        out = jitter(&out, b, c);
    }
    let _gray = rng.random_bool(policy.gray_prob);
    Ok(out)
}

/// Evaluation transform: scale, then the central `crop_to` window.
pub fn center_crop(img: &GrayImage, policy: &AugmentPolicy) -> Result<GrayImage> {
    policy.validate()?;
    let scaled = img.resize_bilinear(policy.scale_to, policy.scale_to)?;
    let off = (policy.scale_to - policy.crop_to) / 2;
    scaled.window(off, off, policy.crop_to, policy.crop_to)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    filename: String,
    label: usize,
    split: Split,
}

/// Writes `images/NNNNNN.pgm`, `masks/NNNNNN.pgm` (when ground truth is
/// present), `labels.csv` and `meta.json`.
pub fn write_dataset(dir: &Path, data: &LabeledDataset, meta: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    if !data.truth.is_empty() {
        fs::create_dir_all(dir.join("masks"))?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(dir.join("labels.csv"))?;
    for i in 0..data.len() {
        let filename = format!("{i:06}.pgm");
        write_pgm(&dir.join("images").join(&filename), &data.images[i])?;
        if let Some(t) = data.truth.get(i) {
            write_pgm(&dir.join("masks").join(&filename), &t.lung_mask.to_image())?;
        }
        w.serialize(LabelRow { filename, label: data.labels[i], split: data.splits[i] })?;
    }
    w.flush()?;
    let mut meta_text = serde_json::to_string_pretty(meta)?;
    meta_text.push('\n');
    fs::write(dir.join("meta.json"), meta_text)?;
    Ok(())
}

/// Reads a dataset directory. `num_classes` is taken from `meta.json`
/// (`num_classes` key) when present, else from the largest label.
pub fn read_dataset(dir: &Path) -> Result<LabeledDataset> {
    let labels_path = dir.join("labels.csv");
    if !labels_path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no labels.csv in {}", dir.display()),
        )));
    }
    let mut r = csv::Reader::from_path(&labels_path)?;
    let (mut images, mut labels, mut splits, mut truth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let masks_dir = dir.join("masks");
    for row in r.deserialize() {
        let row: LabelRow = row?;
        images.push(read_pgm(&dir.join("images").join(&row.filename))?);
        let mask_path = masks_dir.join(&row.filename);
        if mask_path.exists() {
            let m = read_pgm(&mask_path)?;
            let lung_mask = Mask::new(m.width, m.height, m.data.iter().map(|&v| v > 0.5).collect())?;
            truth.push(PhantomTruth {
                lesion_mask: Mask::empty(m.width, m.height),
                lung_mask,
                lobe_boxes: [(0, 0, 0, 0); 5],
            });
        }
        labels.push(row.label);
        splits.push(row.split);
    }
    if images.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dir.display())));
    }
    if truth.len() != images.len() {
        truth.clear();
    }
    let meta_classes = fs::read_to_string(dir.join("meta.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("num_classes").and_then(|c| c.as_u64()));
    let num_classes = match meta_classes {
        Some(c) => c as usize,
        None => labels.iter().max().map_or(1, |m| m + 1),
    };
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Config("label exceeds the dataset's class count".into()));
    }
    Ok(LabeledDataset { images, labels, splits, num_classes, truth })
}

/// Which lobe a generator lesion landed in, for inspection and tests.
pub fn lesion_lobes(truth: &PhantomTruth) -> Vec<LobeId> {
    LobeId::ALL
        .iter()
        .copied()
        .filter(|l| {
            let (x0, y0, w, h) = truth.lobe_boxes[l.index()];
            (y0..y0 + h).any(|y| (x0..x0 + w).any(|x| truth.lesion_mask.get(x, y)))
        })
        .collect()
}
