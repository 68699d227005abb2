//! Five-lobe region generator: locate, crop and resize.
//!
//! `locate` binarizes the lung fields, marks boundary pixels with a 3x3
//! window, takes the bounding box of the lung's boundary pixels and lays out
//! five fixed fractional bands inside it:
//!
//! ```text
//!  image-left half (right lung) | image-right half (left lung)
//!  +-----------+-----------+
//!  |    ru     |           |
//!  +-----------+    lu     |
//!  |    rm     |           |
//!  +-----------+-----------+
//!  |    rl     |    ll     |
//!  +-----------+-----------+
//! ```
//!
//! Image-left is the patient's right side (radiological convention). The
//! right half is split into vertical thirds and the left half into vertical
//! halves; the five bands tile the box exactly.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LobeId {
    Ru,
    Rm,
    Rl,
    Lu,
    Ll,
}

impl LobeId {
    pub const ALL: [LobeId; 5] = [LobeId::Ru, LobeId::Rm, LobeId::Rl, LobeId::Lu, LobeId::Ll];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_right_lung(self) -> bool {
        matches!(self, LobeId::Ru | LobeId::Rm | LobeId::Rl)
    }

    pub fn name(self) -> &'static str {
        match self {
            LobeId::Ru => "ru",
            LobeId::Rm => "rm",
            LobeId::Rl => "rl",
            LobeId::Lu => "lu",
            LobeId::Ll => "ll",
        }
    }
}

impl fmt::Display for LobeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Region location: center `(x, y)` and extent `w x h`, in pixels. The window
/// covers columns `x - w/2 .. x - w/2 + w` (integer division), likewise rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTuple {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub lobe: LobeId,
}

impl RegionTuple {
    /// Tuple for the window with top-left corner `(x0, y0)`.
    pub fn from_corner(x0: usize, y0: usize, w: usize, h: usize, lobe: LobeId) -> Self {
        Self { x: x0 + w / 2, y: y0 + h / 2, w, h, lobe }
    }

    pub fn left(&self) -> usize {
        self.x - self.w / 2
    }

    pub fn top(&self) -> usize {
        self.y - self.h / 2
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Inclusive pixel rectangle `(x0, y0)..=(x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

#[derive(Clone, Debug)]
pub struct RegionSet {
    /// One image per lobe in [`LobeId::ALL`] order, each resized to the
    /// source image size.
    pub regions: Vec<GrayImage>,
    pub tuples: Vec<RegionTuple>,
}

impl RegionSet {
    pub fn iter(&self) -> impl Iterator<Item = (LobeId, &GrayImage, &RegionTuple)> {
        LobeId::ALL.iter().zip(&self.regions).zip(&self.tuples).map(|((&l, r), t)| (l, r, t))
    }
}

fn replicate(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// 3x3 box filter with replicated edges.
pub fn mean_smooth(img: &GrayImage) -> GrayImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += img.get(
                        replicate(x as isize + dx, img.width),
                        replicate(y as isize + dy, img.height),
                    );
                }
            }
            out.set(x, y, s / 9.0);
        }
    }
    out
}

/// Otsu threshold over a 256-bin histogram of `[0, 1]` intensities. Returns
/// the highest bin assigned to the dark class, or `None` when no threshold
/// separates two nonempty classes.
pub fn otsu_threshold(img: &GrayImage) -> Option<usize> {
    let mut hist = [0usize; 256];
    for b in img.to_u8() {
        hist[b as usize] += 1;
    }
    let total = img.data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.filter(|&(_, b)| b > 0.0).map(|(t, _)| t)
}

/// 4-connected components of the set pixels, largest first. Ties keep
/// raster-scan discovery order.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if mask.data[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        comps.push(comp);
    }
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps
}

/// Lung-field mask: Otsu threshold of the 3x3 mean-smoothed image applied to
/// the source pixels (bright = lung), then the two largest 4-connected
/// components. Thresholding the source keeps sharp corners that the box
/// filter would round off.
pub fn binarize_lung_mask(img: &GrayImage) -> Result<Mask> {
    let smooth = mean_smooth(img);
    let t = otsu_threshold(&smooth)
        .ok_or_else(|| Error::DegenerateAnatomy("no threshold separates two intensity classes".into()))?;
    let levels = img.to_u8();
    let fg = Mask::new(img.width, img.height, levels.iter().map(|&b| b as usize > t).collect())?;
    let min_area = (img.width * img.height) as f64 * 0.01;
    let comps: Vec<_> =
        connected_components(&fg).into_iter().filter(|c| c.len() as f64 > min_area).collect();
    if comps.len() < 2 {
        return Err(Error::DegenerateAnatomy(format!(
            "found {} lung-sized component(s), need two",
            comps.len()
        )));
    }
    let mut mask = Mask::empty(img.width, img.height);
    for &p in comps[0].iter().chain(&comps[1]) {
        mask.data[p] = true;
    }
    Ok(mask)
}

/// A pixel is on the boundary iff its 3x3 neighbourhood (replicated at the
/// image edges) holds both mask values.
pub fn boundary_map(mask: &Mask) -> Mask {
    let mut out = Mask::empty(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let (mut any_on, mut any_off) = (false, false);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = mask.get(
                        replicate(x as isize + dx, mask.width),
                        replicate(y as isize + dy, mask.height),
                    );
                    any_on |= v;
                    any_off |= !v;
                }
            }
            out.set(x, y, any_on && any_off);
        }
    }
    out
}

/// Bounding box of the boundary pixels that belong to the lung mask.
pub fn lung_bbox(mask: &Mask) -> Result<BoundingBox> {
    let boundary = boundary_map(mask);
    let inner = Mask::new(
        mask.width,
        mask.height,
        boundary.data.iter().zip(&mask.data).map(|(&b, &m)| b && m).collect(),
    )?;
    // a lung touching every image edge has no interior boundary; fall back to the mask
    let (x0, y0, x1, y1) = inner
        .bbox()
        .or_else(|| mask.bbox())
        .ok_or_else(|| Error::DegenerateAnatomy("empty lung mask".into()))?;
    Ok(BoundingBox { x0, y0, x1, y1 })
}

/// The five fractional bands inside `bbox`.
pub fn layout_regions(bbox: &BoundingBox) -> Vec<RegionTuple> {
    let (w, h) = (bbox.width(), bbox.height());
    let right_w = (w / 2).max(1);
    let left_w = w.saturating_sub(right_w).max(1);
    let left_x = (bbox.x0 + right_w).min(bbox.x1);
    let thirds = [0, h / 3, 2 * h / 3, h];
    let halves = [0, h / 2, h];
    let band = |edges: &[usize], i: usize| {
        let top = bbox.y0 + edges[i];
        (top, (edges[i + 1] - edges[i]).max(1))
    };
    let mut out = Vec::with_capacity(5);
    for (i, lobe) in [LobeId::Ru, LobeId::Rm, LobeId::Rl].into_iter().enumerate() {
        let (top, bh) = band(&thirds, i);
        out.push(RegionTuple::from_corner(bbox.x0, top.min(bbox.y1), right_w, bh, lobe));
    }
    for (i, lobe) in [LobeId::Lu, LobeId::Ll].into_iter().enumerate() {
        let (top, bh) = band(&halves, i);
        out.push(RegionTuple::from_corner(left_x, top.min(bbox.y1), left_w, bh, lobe));
    }
    out
}

/// Computes the five region tuples of a lung image.
pub fn locate(img: &GrayImage) -> Result<Vec<RegionTuple>> {
    let mask = binarize_lung_mask(img)?;
    let bbox = lung_bbox(&mask)?;
    Ok(layout_regions(&bbox))
}

/// Cuts out the `w x h` window centred at the tuple's `(x, y)`.
pub fn crop(img: &GrayImage, t: &RegionTuple) -> Result<GrayImage> {
    if t.w == 0 || t.h == 0 || t.x < t.w / 2 || t.y < t.h / 2 {
        return Err(Error::Bounds(format!("region {t:?} outside the image")));
    }
    img.window(t.left(), t.top(), t.w, t.h)
}

pub fn resize_region(region: &GrayImage, target_h: usize, target_w: usize) -> Result<GrayImage> {
    region.resize_bilinear(target_h, target_w)
}

/// `locate`, then `crop` and `resize` each of the five regions back to the
/// source size.
pub fn generate_regions(img: &GrayImage) -> Result<RegionSet> {
    let tuples = locate(img)?;
    let regions = tuples
        .iter()
        .map(|t| resize_region(&crop(img, t)?, img.height, img.width))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionSet { regions, tuples })
}
