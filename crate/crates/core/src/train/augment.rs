//! Geometric and color augmentation plus the cutout / mixup / cutmix baselines.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::color::{apply_jitter, ColorJitter, JitterFactors};
use crate::datasynth::ImageSample;
use crate::error::{Error, Result};
use crate::heads::NUM_CLASSES;
use crate::image::{Mask, RgbImage};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central crop fraction: a 700 px crop out of a 1038 px tile.
pub const DEFAULT_CROP_FRAC: f64 = 700.0 / 1038.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Random rotation by any angle.
    pub rotate: bool,
    pub crop_frac: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub jitter: ColorJitter,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            crop_frac: DEFAULT_CROP_FRAC,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            jitter: ColorJitter::default(),
        }
    }
}

impl AugmentConfig {
    /// Crop and resize only.
    pub fn eval_only(crop_frac: f64) -> Self {
        AugmentConfig { rotate: false, crop_frac, hflip_prob: 0.0, vflip_prob: 0.0, jitter: ColorJitter::none() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_frac > 0.0 && self.crop_frac <= 1.0) {
            return Err(Error::Config(format!("crop fraction must be in (0, 1], got {}", self.crop_frac)));
        }
        for (name, p) in [("hflip", self.hflip_prob), ("vflip", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability must be in [0, 1], got {p}")));
            }
        }
        if !self.jitter.is_valid() {
            return Err(Error::Config(format!("invalid color jitter {:?}", self.jitter)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    /// Radians, counter-clockwise.
    pub angle: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub jitter: JitterFactors,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { angle: 0.0, hflip: false, vflip: false, jitter: JitterFactors::IDENTITY };

    pub fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let angle = if cfg.rotate { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
        let hflip = rng.random_bool(cfg.hflip_prob);
        let vflip = rng.random_bool(cfg.vflip_prob);
        Transform { angle, hflip, vflip, jitter: cfg.jitter.sample(rng) }
    }
}

fn background(sample: &ImageSample) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (px, &m) in sample.image.data.chunks(3).zip(&sample.mask.data) {
        if m == 0 {
            (0..3).for_each(|c| acc[c] += px[c]);
            n += 1;
        }
    }
    if n == 0 {
        for px in sample.image.data.chunks(3) {
            (0..3).for_each(|c| acc[c] += px[c]);
        }
        n = sample.mask.data.len().max(1);
    }
    acc.map(|v| v / n as f64)
}

fn bilinear(img: &RgbImage, y: f64, x: f64, fill: [f64; 3]) -> [f64; 3] {
    let (h, w) = (img.height as isize, img.width as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            fill
        } else {
            img.get(yy as usize, xx as usize)
        }
    };
    let (a, b, c, d) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] * (1.0 - fx) + b[ch] * fx;
        let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
        out[ch] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Rotation, central crop resized back to full size, flips, then color jitter.
///
/// Image pixels are resampled bilinearly, mask pixels by nearest neighbour.
/// Everything is done in one inverse mapping so the image is resampled once.
pub fn apply_transform(sample: &ImageSample, t: &Transform, crop_frac: f64) -> ImageSample {
    let (h, w) = (sample.image.height, sample.image.width);
    let fill = background(sample);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = t.angle.sin_cos();
    let mut image = RgbImage::new(h, w);
    let mut mask = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut dy = (y as f64 + 0.5 - cy) * crop_frac;
            let mut dx = (x as f64 + 0.5 - cx) * crop_frac;
            if t.hflip {
                dx = -dx;
            }
            if t.vflip {
                dy = -dy;
            }
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            image.set(y, x, bilinear(&sample.image, sy - 0.5, sx - 0.5, fill));
            let (my, mx) = (sy.floor(), sx.floor());
            if my >= 0.0 && mx >= 0.0 && (my as usize) < h && (mx as usize) < w {
                mask.set(y, x, sample.mask.get(my as usize, mx as usize));
            }
        }
    }
    apply_jitter(&mut image, &t.jitter);
    ImageSample { image, mask, ..sample.clone() }
}

pub fn train_view(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut Rng) -> ImageSample {
    apply_transform(sample, &Transform::sample(cfg, rng), cfg.crop_frac)
}

pub fn eval_view(sample: &ImageSample, crop_frac: f64) -> ImageSample {
    apply_transform(sample, &Transform::IDENTITY, crop_frac)
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// Rectangle of the given size centred uniformly at random, clipped to the image.
    pub fn random(h: usize, w: usize, rh: usize, rw: usize, rng: &mut Rng) -> Self {
        let cy = rng.random_range(0..h.max(1)) as isize;
        let cx = rng.random_range(0..w.max(1)) as isize;
        let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
        let (hh, hw) = ((rh / 2) as isize, (rw / 2) as isize);
        Rect {
            y0: clip(cy - hh, h),
            x0: clip(cx - hw, w),
            y1: clip(cy - hh + rh as isize, h),
            x1: clip(cx - hw + rw as isize, w),
        }
    }
}

pub fn fill_rect(img: &mut RgbImage, r: &Rect, rgb: [f64; 3]) {
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            img.set(y, x, rgb);
        }
    }
}

/// Copies `src` pixels inside `r` into `dst`.
pub fn paste_rect(dst: &mut RgbImage, src: &RgbImage, r: &Rect) {
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            dst.set(y, x, src.get(y, x));
        }
    }
}

/// Zeroes a random square with side `frac` of the image side. Labels are unchanged.
pub fn cutout(img: &mut RgbImage, frac: f64, rng: &mut Rng) {
    let side = (frac * img.height.min(img.width) as f64).round() as usize;
    let r = Rect::random(img.height, img.width, side, side, rng);
    fill_rect(img, &r, [0.0; 3]);
}

/// `λ·a + (1-λ)·b`.
pub fn mix_pair(a: &RgbImage, b: &RgbImage, lambda: f64) -> RgbImage {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    RgbImage { data, ..a.clone() }
}

/// Pastes `b` into `a` inside `r`; returns the image and the label weight of `b`.
pub fn cutmix_pair(a: &RgbImage, b: &RgbImage, r: &Rect) -> (RgbImage, f64) {
    let mut out = a.clone();
    paste_rect(&mut out, b, r);
    let weight = r.area() as f64 / (a.height * a.width) as f64;
    (out, weight)
}

fn soft_targets(labels: &[u8], partner: &[usize], weight_b: &[f64]) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), NUM_CLASSES]);
    for (i, &l) in labels.iter().enumerate() {
        let d = t.data_mut();
        d[i * NUM_CLASSES + l as usize] += 1.0 - weight_b[i];
        d[i * NUM_CLASSES + labels[partner[i]] as usize] += weight_b[i];
    }
    t
}

fn draw_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mix alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

fn partners(b: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..b).collect();
    p.shuffle(rng);
    p
}

/// Mixup over a batch with one `λ ~ Beta(α, α)` and a random partner per image.
///
/// A single-image batch is returned unmixed.
pub fn mixup_batch(images: &[RgbImage], labels: &[u8], alpha: f64, rng: &mut Rng) -> Result<(Vec<RgbImage>, Tensor)> {
    if images.len() < 2 {
        return Ok((images.to_vec(), crate::heads::one_hot(labels)));
    }
    let lambda = draw_lambda(alpha, rng)?;
    let partner = partners(images.len(), rng);
    let mixed = images.iter().zip(&partner).map(|(a, &j)| mix_pair(a, &images[j], lambda)).collect();
    Ok((mixed, soft_targets(labels, &partner, &vec![1.0 - lambda; images.len()])))
}

/// CutMix with a box of area about `(1-λ)` of the image; labels mix by actual box area.
pub fn cutmix_batch(images: &[RgbImage], labels: &[u8], alpha: f64, rng: &mut Rng) -> Result<(Vec<RgbImage>, Tensor)> {
    if images.len() < 2 {
        return Ok((images.to_vec(), crate::heads::one_hot(labels)));
    }
    let lambda = draw_lambda(alpha, rng)?;
    let partner = partners(images.len(), rng);
    let ratio = (1.0 - lambda).sqrt();
    let (h, w) = (images[0].height, images[0].width);
    let r = Rect::random(h, w, (ratio * h as f64) as usize, (ratio * w as f64) as usize, rng);
    let (mixed, weights): (Vec<RgbImage>, Vec<f64>) =
        images.iter().zip(&partner).map(|(a, &j)| cutmix_pair(a, &images[j], &r)).unzip();
    Ok((mixed, soft_targets(labels, &partner, &weights)))
}
