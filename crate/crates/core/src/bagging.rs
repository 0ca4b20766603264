//! Patch grids, mask-derived patch labels, bag soft labels and the two
//! soft-label distributors.
//!
//! An image is a bag and each patch is an instance. The un-shuffled distributor
//! keeps every bag intact; the shuffled distributor draws one permutation over
//! every `(bag, slot)` position of the batch so patches migrate between bags,
//! then recomputes each bag's soft label from the patches it now holds.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasynth::ImageSample;
use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::rng::Rng;

/// Patch sizes below this cut typical cells into pieces.
pub const RECOMMENDED_MIN_PATCH: usize = 16;

/// Warning text for patch sizes under [`RECOMMENDED_MIN_PATCH`].
pub fn patch_size_warning(p: usize) -> Option<String> {
    (p < RECOMMENDED_MIN_PATCH).then(|| {
        format!("patch size {p} is below {RECOMMENDED_MIN_PATCH}; cells may be split across patches")
    })
}

/// An image split into `n = side²` square patches in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<RgbImage>,
    pub mask_patches: Vec<Mask>,
    pub n: usize,
    pub p: usize,
    /// Patches per row.
    pub side: usize,
    pub source_id: String,
    pub num_categories: u8,
}

/// Label of one patch: masked ratio and its per-category split.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLabel {
    pub mr: f64,
    /// `per_category[j-1]` is the ratio for category `j`.
    pub per_category: Vec<f64>,
}

/// Bag-level soft label: `(Σ MR_i, Σ MR_1i, …, Σ MR_Ki)`, optionally divided by `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct BagSoftLabel {
    pub total: f64,
    pub per_category: Vec<f64>,
    pub normalized: bool,
}

impl BagSoftLabel {
    /// `[total, per_category…]`, the regression target layout.
    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.total).chain(self.per_category.iter().copied()).collect()
    }
}

/// How far patches may travel in the shuffled distributor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleScope {
    /// One permutation over all slots of the batch.
    #[default]
    Batch,
    /// Patches only move within their own image.
    WithinBag,
}

impl std::str::FromStr for ShuffleScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(ShuffleScope::Batch),
            "within_bag" => Ok(ShuffleScope::WithinBag),
            _ => Err(Error::Config(format!("unknown shuffle scope {s:?} (expected batch|within_bag)"))),
        }
    }
}

/// The permutation applied by one shuffled distribution.
///
/// Destination slot `d = bag * n + slot` receives the patch from source slot
/// `permutation[d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleRecord {
    pub permutation: Vec<usize>,
    pub batch_shape: (usize, usize),
}

impl ShuffleRecord {
    pub fn identity(b: usize, n: usize) -> Self {
        ShuffleRecord { permutation: (0..b * n).collect(), batch_shape: (b, n) }
    }

    /// Reorders flattened slot items as the shuffle did.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.permutation.iter().map(|&src| items[src].clone()).collect()
    }

    /// Undoes [`ShuffleRecord::apply`].
    pub fn invert<T: Clone>(&self, items: &[T]) -> Vec<T> {
        let mut out: Vec<Option<T>> = vec![None; items.len()];
        for (dst, &src) in self.permutation.iter().enumerate() {
            out[src] = Some(items[dst].clone());
        }
        out.into_iter().map(|o| o.expect("permutation is a bijection")).collect()
    }

    pub fn is_bijection(&self) -> bool {
        let mut sorted = self.permutation.clone();
        sorted.sort_unstable();
        sorted.iter().enumerate().all(|(i, &v)| i == v) && sorted.len() == self.batch_shape.0 * self.batch_shape.1
    }
}

/// A regrouped bag of patches composed back into an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub image: RgbImage,
    /// Mask patches carried along with their image patches.
    pub mask: Mask,
    pub soft_label: BagSoftLabel,
    pub patch_labels: Vec<PatchLabel>,
    /// Source `(sample_id, patch_index)` for every slot.
    pub provenance: Vec<(String, usize)>,
}

pub fn patchify(sample: &ImageSample, p: usize) -> Result<PatchGrid> {
    let (h, w) = (sample.image.height, sample.image.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image size {h}x{w} is not divisible by patch size {p}")));
    }
    if h != w {
        return Err(Error::Shape(format!("square images required, got {h}x{w}")));
    }
    if (sample.mask.height, sample.mask.width) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            sample.mask.height, sample.mask.width
        )));
    }
    let side = w / p;
    let mut patches = Vec::with_capacity(side * side);
    let mut mask_patches = Vec::with_capacity(side * side);
    for gy in 0..side {
        for gx in 0..side {
            let mut patch = RgbImage::new(p, p);
            let mut mpatch = Mask::new(p, p);
            for y in 0..p {
                let src = ((gy * p + y) * w + gx * p) * 3;
                patch.data[y * p * 3..(y + 1) * p * 3].copy_from_slice(&sample.image.data[src..src + p * 3]);
                let msrc = (gy * p + y) * w + gx * p;
                mpatch.data[y * p..(y + 1) * p].copy_from_slice(&sample.mask.data[msrc..msrc + p]);
            }
            patches.push(patch);
            mask_patches.push(mpatch);
        }
    }
    Ok(PatchGrid {
        patches,
        mask_patches,
        n: side * side,
        p,
        side,
        source_id: sample.sample_id.clone(),
        num_categories: sample.num_categories,
    })
}

fn compose(patches: &[&RgbImage], masks: &[&Mask], side: usize, p: usize) -> (RgbImage, Mask) {
    let w = side * p;
    let mut img = RgbImage::new(w, w);
    let mut mask = Mask::new(w, w);
    for (slot, (patch, mpatch)) in patches.iter().zip(masks).enumerate() {
        let (gy, gx) = (slot / side, slot % side);
        for y in 0..p {
            let dst = ((gy * p + y) * w + gx * p) * 3;
            img.data[dst..dst + p * 3].copy_from_slice(&patch.data[y * p * 3..(y + 1) * p * 3]);
            let mdst = (gy * p + y) * w + gx * p;
            mask.data[mdst..mdst + p].copy_from_slice(&mpatch.data[y * p..(y + 1) * p]);
        }
    }
    (img, mask)
}

/// Reassembles a grid into its image and mask.
pub fn unpatchify(grid: &PatchGrid) -> (RgbImage, Mask) {
    let patches: Vec<&RgbImage> = grid.patches.iter().collect();
    let masks: Vec<&Mask> = grid.mask_patches.iter().collect();
    compose(&patches, &masks, grid.side, grid.p)
}

/// Masked-pixel ratio of a patch, attributed to its dominant category.
///
/// Mixed patches take the category with most pixels, lowest index on ties.
pub fn compute_patch_label(mask_patch: &Mask, k: u8) -> Result<PatchLabel> {
    let mut counts = vec![0usize; k as usize + 1];
    for &v in &mask_patch.data {
        if v > k {
            return Err(Error::Data(format!("mask value {v} exceeds category count {k}")));
        }
        counts[v as usize] += 1;
    }
    let total = mask_patch.data.len();
    let masked = total - counts[0];
    let mr = if total == 0 { 0.0 } else { masked as f64 / total as f64 };
    let mut per_category = vec![0.0; k as usize];
    if masked > 0 {
        let mut dominant = 1;
        for j in 2..=k as usize {
            if counts[j] > counts[dominant] {
                dominant = j;
            }
        }
        per_category[dominant - 1] = mr;
    }
    Ok(PatchLabel { mr, per_category })
}

/// Sums patch labels into a bag label; `normalize` divides by the patch count.
pub fn aggregate_bag_label(labels: &[PatchLabel], normalize: bool) -> Result<BagSoftLabel> {
    let first = labels.first().ok_or_else(|| Error::Contract("aggregate_bag_label of an empty bag".into()))?;
    let k = first.per_category.len();
    let mut total = 0.0;
    let mut per_category = vec![0.0; k];
    for l in labels {
        if l.per_category.len() != k {
            return Err(Error::Contract("patch labels disagree on category count".into()));
        }
        total += l.mr;
        for (acc, v) in per_category.iter_mut().zip(&l.per_category) {
            *acc += v;
        }
    }
    if normalize {
        let n = labels.len() as f64;
        total /= n;
        per_category.iter_mut().for_each(|v| *v /= n);
    }
    Ok(BagSoftLabel { total, per_category, normalized: normalize })
}

/// 0 iff every instance label is 0.
pub fn mil_bag_label(instance_labels: &[u8]) -> Result<u8> {
    if instance_labels.is_empty() {
        return Err(Error::Contract("mil_bag_label of an empty bag".into()));
    }
    if let Some(&v) = instance_labels.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("instance label {v} is not 0 or 1")));
    }
    Ok((instance_labels.iter().map(|&v| v as u32).sum::<u32>() > 0) as u8)
}

fn check_batch(batch: &[PatchGrid]) -> Result<(usize, usize, usize, u8)> {
    let first = batch.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for g in batch {
        if (g.n, g.p, g.num_categories) != (first.n, first.p, first.num_categories) {
            return Err(Error::Shape(format!(
                "heterogeneous batch: grid ({} patches of {}px, K={}) vs ({} patches of {}px, K={})",
                first.n, first.p, first.num_categories, g.n, g.p, g.num_categories
            )));
        }
    }
    Ok((first.n, first.p, first.side, first.num_categories))
}

/// Builds bags from an explicit slot permutation (see [`ShuffleRecord`]).
pub fn distribute_with(batch: &[PatchGrid], record: &ShuffleRecord, normalize: bool) -> Result<Vec<Bag>> {
    let (n, p, side, k) = check_batch(batch)?;
    if record.batch_shape != (batch.len(), n) || !record.is_bijection() {
        return Err(Error::Contract(format!(
            "permutation for shape {:?} does not fit a batch of {} bags x {n} patches",
            record.batch_shape,
            batch.len()
        )));
    }
    let labels: Vec<Vec<PatchLabel>> = batch
        .iter()
        .map(|g| g.mask_patches.iter().map(|m| compute_patch_label(m, k)).collect())
        .collect::<Result<_>>()?;
    let mut bags = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let sources = &record.permutation[b * n..(b + 1) * n];
        let patches: Vec<&RgbImage> = sources.iter().map(|&s| &batch[s / n].patches[s % n]).collect();
        let masks: Vec<&Mask> = sources.iter().map(|&s| &batch[s / n].mask_patches[s % n]).collect();
        let patch_labels: Vec<PatchLabel> = sources.iter().map(|&s| labels[s / n][s % n].clone()).collect();
        let (image, mask) = compose(&patches, &masks, side, p);
        bags.push(Bag {
            image,
            mask,
            soft_label: aggregate_bag_label(&patch_labels, normalize)?,
            patch_labels,
            provenance: sources.iter().map(|&s| (batch[s / n].source_id.clone(), s % n)).collect(),
        });
    }
    Ok(bags)
}

/// Draws a uniformly random slot permutation for a `b × n` batch.
pub fn draw_permutation(b: usize, n: usize, scope: ShuffleScope, rng: &mut Rng) -> ShuffleRecord {
    let mut permutation: Vec<usize> = (0..b * n).collect();
    match scope {
        ShuffleScope::Batch => permutation.shuffle(rng),
        ShuffleScope::WithinBag => permutation.chunks_mut(n.max(1)).for_each(|c| c.shuffle(rng)),
    }
    ShuffleRecord { permutation, batch_shape: (b, n) }
}

/// Shuffled (SF) distributor.
pub fn shuffle_distribute(
    batch: &[PatchGrid],
    rng: &mut Rng,
    scope: ShuffleScope,
    normalize: bool,
) -> Result<(Vec<Bag>, ShuffleRecord)> {
    let (n, ..) = check_batch(batch)?;
    let record = draw_permutation(batch.len(), n, scope, rng);
    let bags = distribute_with(batch, &record, normalize)?;
    Ok((bags, record))
}

/// Un-shuffled (USF) distributor: every bag keeps its own patches in place.
pub fn unshuffle_distribute(batch: &[PatchGrid], normalize: bool) -> Result<Vec<Bag>> {
    let (n, ..) = check_batch(batch)?;
    distribute_with(batch, &ShuffleRecord::identity(batch.len(), n), normalize)
}
