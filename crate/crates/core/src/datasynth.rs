//! Procedural cytology-style images with per-cell category masks.
//!
//! Each image is a circular field of view holding scattered normal cells and, for
//! positive samples, a cluster of larger irregular cells with big dark nuclei.
//! The last category index `K` is the cancer category; `1..K-1` are benign cell
//! types. Impurities (fibers, pale blobs, bright specks) never enter the mask.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::{apply_jitter, ColorJitter};
use crate::error::{Error, Result};
use crate::image::{read_mask, read_ppm, write_mask, write_ppm, Mask, RgbImage};
use crate::rng::{derive_seed, seeded, Rng};

pub const NEGATIVE: u8 = 0;
pub const POSITIVE: u8 = 1;

/// One labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: RgbImage,
    pub mask: Mask,
    /// 1 iff the mask contains the cancer category.
    pub class_label: u8,
    pub sample_id: String,
    pub seed: u64,
    /// Number of cell categories `K`; the mask holds values `0..=K`.
    pub num_categories: u8,
}

impl ImageSample {
    pub fn cancer_category(&self) -> u8 {
        self.num_categories
    }

    /// Per-pixel cell instances reduced to positive/negative flags.
    pub fn label_from_mask(mask: &Mask, k: u8) -> u8 {
        mask.data.contains(&k) as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    /// Number of cell categories `K` (at least 2; `K` itself is cancer).
    pub k: u8,
    /// Patch size the data is meant for; `image_size` must be a multiple.
    pub patch_size: usize,
    /// Benign cells per image, inclusive range.
    pub cells_per_image: (usize, usize),
    /// Cancer cells per positive image, inclusive range.
    pub cancer_cells: (usize, usize),
    pub normal_radius: (f64, f64),
    pub cancer_radius: (f64, f64),
    /// Nucleus radius as a fraction of the cell radius.
    pub normal_nucleus_ratio: f64,
    pub cancer_nucleus_ratio: f64,
    /// Boundary irregularity amplitude for cancer cells.
    pub cancer_irregularity: f64,
    /// Standard deviation (pixels) of cancer cell offsets around the cluster center.
    pub cluster_spread: f64,
    /// Radius of the circular field holding cells, as a fraction of `image_size`.
    pub field_radius_frac: f64,
    pub jitter: ColorJitter,
    pub impurities: (usize, usize),
    pub blur_prob: f64,
    /// Disables color cast, impurities and blur.
    pub perturb: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            k: 2,
            patch_size: 8,
            cells_per_image: (6, 12),
            cancer_cells: (2, 4),
            normal_radius: (2.5, 3.5),
            cancer_radius: (4.0, 5.5),
            normal_nucleus_ratio: 0.35,
            cancer_nucleus_ratio: 0.65,
            cancer_irregularity: 0.18,
            cluster_spread: 5.0,
            field_radius_frac: 0.33,
            jitter: ColorJitter::default(),
            impurities: (2, 6),
            blur_prob: 0.3,
            perturb: true,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.k < 2 {
            return bad(format!("need at least 2 categories (benign and cancer), got {}", self.k));
        }
        for (name, (lo, hi)) in [("normal_radius", self.normal_radius), ("cancer_radius", self.cancer_radius)] {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("{name} range ({lo}, {hi}) must be positive and ordered"));
            }
        }
        if self.cells_per_image.0 > self.cells_per_image.1
            || self.cancer_cells.0 > self.cancer_cells.1
            || self.cancer_cells.0 == 0
            || self.impurities.0 > self.impurities.1
        {
            return bad("count ranges must be ordered and positives need at least one cancer cell".into());
        }
        if !self.jitter.is_valid() {
            return bad(format!("jitter strengths must be non-negative: {:?}", self.jitter));
        }
        let field = self.field_radius_frac * self.image_size as f64;
        if self.cancer_radius.1 >= field {
            return bad(format!("cancer radius {} does not fit the field radius {field}", self.cancer_radius.1));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return bad(format!("blur probability {} outside [0, 1]", self.blur_prob));
        }
        Ok(())
    }
}

struct Cell {
    cx: f64,
    cy: f64,
    radius: f64,
    /// `(amplitude, frequency, phase)` boundary harmonics.
    harmonics: Vec<(f64, f64, f64)>,
    nucleus_ratio: f64,
    nucleus_dx: f64,
    nucleus_dy: f64,
    cytoplasm: [f64; 3],
    nucleus: [f64; 3],
    category: u8,
}

impl Cell {
    fn boundary(&self, theta: f64) -> f64 {
        let wobble: f64 = self.harmonics.iter().map(|(a, f, p)| a * (f * theta + p).cos()).sum();
        self.radius * (1.0 + wobble)
    }

    fn reach(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.0.abs()).sum::<f64>())
    }

    fn paint(&self, img: &mut RgbImage, mask: &mut Mask) {
        let reach = self.reach().ceil() as isize + 1;
        let (x0, y0) = (self.cx.floor() as isize, self.cy.floor() as isize);
        let (ncx, ncy) = (self.cx + self.nucleus_dx, self.cy + self.nucleus_dy);
        let nr = self.nucleus_ratio * self.radius;
        for y in (y0 - reach).max(0)..=(y0 + reach).min(img.height as isize - 1) {
            for x in (x0 - reach).max(0)..=(x0 + reach).min(img.width as isize - 1) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = (px - self.cx, py - self.cy);
                let d = dx.hypot(dy);
                if d > self.boundary(dy.atan2(dx)) {
                    continue;
                }
                let in_nucleus = (px - ncx).hypot(py - ncy) <= nr;
                let color = if in_nucleus { self.nucleus } else { self.cytoplasm };
                img.set(y as usize, x as usize, color);
                mask.set(y as usize, x as usize, self.category);
            }
        }
    }
}

fn tint(rng: &mut Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn range_usize(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn range_f64(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Uniform point in the disc of radius `r` around the image center.
fn point_in_disc(rng: &mut Rng, center: f64, r: f64) -> (f64, f64) {
    let rho = r * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..TAU);
    (center + rho * phi.cos(), center + rho * phi.sin())
}

const BACKGROUND: [f64; 3] = [0.93, 0.90, 0.92];
const NORMAL_CYTO: [f64; 3] = [0.82, 0.66, 0.78];
const NORMAL_NUC: [f64; 3] = [0.52, 0.38, 0.66];
const CANCER_CYTO: [f64; 3] = [0.76, 0.55, 0.74];
const CANCER_NUC: [f64; 3] = [0.30, 0.16, 0.48];

fn benign_cell(cfg: &GenConfig, rng: &mut Rng, center: f64, field: f64) -> Cell {
    let radius = range_f64(rng, cfg.normal_radius);
    let (cx, cy) = point_in_disc(rng, center, (field - radius).max(0.0));
    let category = rng.random_range(1..cfg.k);
    // benign subtypes shift the palette slightly
    let shift = (category - 1) as f64 * 0.06;
    Cell {
        cx,
        cy,
        radius,
        harmonics: vec![(rng.random_range(0.0..0.05), 2.0, rng.random_range(0.0..TAU))],
        nucleus_ratio: cfg.normal_nucleus_ratio * rng.random_range(0.9..1.1),
        nucleus_dx: rng.random_range(-0.15..0.15) * radius,
        nucleus_dy: rng.random_range(-0.15..0.15) * radius,
        cytoplasm: tint(rng, [NORMAL_CYTO[0] - shift, NORMAL_CYTO[1], NORMAL_CYTO[2] + shift], 0.03),
        nucleus: tint(rng, NORMAL_NUC, 0.03),
        category,
    }
}

fn cancer_cell(cfg: &GenConfig, rng: &mut Rng, cluster: (f64, f64), center: f64, field: f64) -> Cell {
    let radius = range_f64(rng, cfg.cancer_radius);
    let spread = Normal::new(0.0, cfg.cluster_spread.max(1e-9)).expect("finite spread");
    // keep the whole cell inside the field so center crops never remove it
    let limit = field - radius * (1.0 + 2.0 * cfg.cancer_irregularity);
    let (mut cx, mut cy) = (cluster.0 + spread.sample(rng), cluster.1 + spread.sample(rng));
    let (dx, dy) = (cx - center, cy - center);
    let d = dx.hypot(dy);
    if d > limit.max(0.0) {
        let s = limit.max(0.0) / d;
        cx = center + dx * s;
        cy = center + dy * s;
    }
    let amp = cfg.cancer_irregularity;
    Cell {
        cx,
        cy,
        radius,
        harmonics: vec![
            (rng.random_range(0.5..1.0) * amp, 3.0, rng.random_range(0.0..TAU)),
            (rng.random_range(0.0..0.5) * amp, 5.0, rng.random_range(0.0..TAU)),
        ],
        nucleus_ratio: cfg.cancer_nucleus_ratio * rng.random_range(0.9..1.1),
        nucleus_dx: rng.random_range(-0.2..0.2) * radius,
        nucleus_dy: rng.random_range(-0.2..0.2) * radius,
        cytoplasm: tint(rng, CANCER_CYTO, 0.03),
        nucleus: tint(rng, CANCER_NUC, 0.03),
        category: cfg.k,
    }
}

fn draw_fiber(rng: &mut Rng, img: &mut RgbImage) {
    let size = img.width as f64;
    let (x0, y0) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
    let len = rng.random_range(0.3..0.8) * size;
    let phi = rng.random_range(0.0..TAU);
    let color = tint(rng, [0.78, 0.72, 0.80], 0.04);
    let steps = (len * 2.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps.max(1) as f64;
        let (x, y) = (x0 + t * len * phi.cos(), y0 + t * len * phi.sin());
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(y as usize, x as usize, color);
        }
    }
}

fn draw_blob(rng: &mut Rng, img: &mut RgbImage) {
    let size = img.width as f64;
    let (cx, cy) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
    let r = rng.random_range(1.5..4.0);
    let color = tint(rng, [0.86, 0.80, 0.84], 0.03);
    for y in 0..img.height {
        for x in 0..img.width {
            if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                img.set(y, x, color);
            }
        }
    }
}

fn draw_speck(rng: &mut Rng, img: &mut RgbImage) {
    let (x, y) = (rng.random_range(0..img.width), rng.random_range(0..img.height));
    let c = rng.random_range(0.95..=1.0);
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        if y + dy < img.height && x + dx < img.width {
            img.set(y + dy, x + dx, [c, c, c]);
        }
    }
}

fn box_blur(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    let (h, w) = (img.height as isize, img.width as isize);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w {
                        let p = img.get(yy as usize, xx as usize);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
            }
            out.set(y as usize, x as usize, acc.map(|v| v / n));
        }
    }
    out
}

/// Renders sample `index` of the dataset described by `cfg`.
///
/// A pure function of `(cfg, index, positive)`.
pub fn generate_sample(cfg: &GenConfig, index: usize, positive: bool) -> Result<ImageSample> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, index as u64);
    let mut rng = seeded(seed);
    let size = cfg.image_size;
    let center = size as f64 / 2.0;
    let field = cfg.field_radius_frac * size as f64;

    let mut img = RgbImage::filled(size, size, tint(&mut rng, BACKGROUND, 0.02));
    let mut mask = Mask::new(size, size);

    // impurity counts are drawn even when unused so perturbation toggling
    // does not shift the cell layout
    let n_impurities = range_usize(&mut rng, cfg.impurities);
    let mut impurity_rng = seeded(derive_seed(seed, 1));
    if cfg.perturb {
        for i in 0..n_impurities {
            if i % 2 == 0 {
                draw_fiber(&mut impurity_rng, &mut img);
            } else {
                draw_blob(&mut impurity_rng, &mut img);
            }
        }
    }

    let n_benign = range_usize(&mut rng, cfg.cells_per_image);
    for _ in 0..n_benign {
        benign_cell(cfg, &mut rng, center, field).paint(&mut img, &mut mask);
    }
    if positive {
        let n_cancer = range_usize(&mut rng, cfg.cancer_cells);
        let cluster_r = (field - cfg.cancer_radius.1 * 1.5).max(0.0);
        let cluster = point_in_disc(&mut rng, center, cluster_r);
        for _ in 0..n_cancer {
            cancer_cell(cfg, &mut rng, cluster, center, field).paint(&mut img, &mut mask);
        }
    }

    if cfg.perturb {
        for _ in 0..n_impurities {
            draw_speck(&mut impurity_rng, &mut img);
        }
        if impurity_rng.random_bool(cfg.blur_prob) {
            img = box_blur(&img);
        }
        let cast = cfg.jitter.sample(&mut impurity_rng);
        apply_jitter(&mut img, &cast);
    }
    img.quantize();

    let class_label = ImageSample::label_from_mask(&mask, cfg.k);
    if class_label != positive as u8 {
        return Err(Error::Data(format!("sample {index}: rendered mask disagrees with requested class")));
    }
    Ok(ImageSample {
        image: img,
        mask,
        class_label,
        sample_id: format!("s{}_{index:05}", cfg.seed),
        seed,
        num_categories: cfg.k,
    })
}

/// `n_pos` positives (indices `0..n_pos`) followed by `n_neg` negatives.
pub fn generate_dataset(cfg: &GenConfig, n_pos: usize, n_neg: usize) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    (0..n_pos + n_neg).map(|i| generate_sample(cfg, i, i < n_pos)).collect()
}

pub const INDEX_FILE: &str = "index.tsv";

fn image_file(id: &str) -> String {
    format!("{id}.ppm")
}

fn mask_file(id: &str) -> String {
    format!("{id}.mask.pgm")
}

/// Writes PPM images, PGM masks (max value `K`) and a tab-separated index.
pub fn write_dataset(samples: &[ImageSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let mut index = Vec::new();
    for s in samples {
        write_ppm(&s.image, &dir.join(image_file(&s.sample_id)))?;
        write_mask(&s.mask, s.num_categories, &dir.join(mask_file(&s.sample_id)))?;
        writeln!(index, "{}\t{}\t{}", s.sample_id, s.class_label, s.seed).expect("in-memory write");
    }
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut samples = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: &str| Error::format(&index_path, format!("line {}: {m}", line_no + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, label, seed] = fields.as_slice() else {
            return Err(bad("expected id<TAB>label<TAB>seed"));
        };
        let label: u8 = label.parse().map_err(|_| bad("label is not an integer"))?;
        let seed: u64 = seed.parse().map_err(|_| bad("seed is not an integer"))?;

        let img_path = dir.join(image_file(id));
        let mask_path = dir.join(mask_file(id));
        let image = read_ppm(&img_path)?;
        let (mask, k) = read_mask(&mask_path)?;
        if (mask.height, mask.width) != (image.height, image.width) {
            return Err(Error::format(
                &mask_path,
                format!(
                    "mask is {}x{} but image {} is {}x{}",
                    mask.width,
                    mask.height,
                    img_path.display(),
                    image.width,
                    image.height
                ),
            ));
        }
        if ImageSample::label_from_mask(&mask, k) != label {
            return Err(Error::format(&mask_path, format!("mask contradicts index label {label}")));
        }
        samples.push(ImageSample { image, mask, class_label: label, sample_id: id.to_string(), seed, num_categories: k });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagging::mil_bag_label;

    fn small(seed: u64) -> GenConfig {
        GenConfig { seed, ..GenConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(7), 2, 2).unwrap();
        let b = generate_dataset(&small(7), 2, 2).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(8), 2, 2).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn negatives_have_no_cancer_pixels() {
        let cfg = small(3);
        let data = generate_dataset(&cfg, 0, 6).unwrap();
        assert!(data.iter().all(|s| s.class_label == 0 && s.mask.count(cfg.k) == 0));
        // benign cells are still present
        assert!(data.iter().all(|s| s.mask.count(1) > 0));
    }

    #[test]
    fn positives_are_mil_positive() {
        let cfg = small(11);
        for s in generate_dataset(&cfg, 5, 0).unwrap() {
            // instances are pixels of the mask; an instance is positive iff cancer
            let instances: Vec<u8> = s.mask.data.iter().map(|&v| (v == cfg.k) as u8).collect();
            assert_eq!(mil_bag_label(&instances).unwrap(), 1);
            assert_eq!(s.class_label, 1);
        }
    }

    #[test]
    fn pixel_threshold_separates_unperturbed_data() {
        let cfg = GenConfig { perturb: false, ..small(5) };
        let data = generate_dataset(&cfg, 10, 10).unwrap();
        let correct = data.iter().filter(|s| ((s.mask.count(cfg.k) > 0) as u8) == s.class_label).count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn more_categories_use_all_benign_types() {
        let cfg = GenConfig { k: 3, ..small(2) };
        let data = generate_dataset(&cfg, 3, 3).unwrap();
        assert!(data.iter().any(|s| s.mask.count(2) > 0));
        assert!(data.iter().all(|s| s.mask.data.iter().all(|&v| v <= 3)));
    }

    #[test]
    fn indivisible_patch_size_is_a_config_error() {
        let cfg = GenConfig { patch_size: 7, ..GenConfig::default() };
        assert!(matches!(generate_dataset(&cfg, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&small(1), 5, 5).unwrap();
        write_dataset(&data, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);

        let pgm = fs::read(dir.path().join(mask_file(&data[0].sample_id))).unwrap();
        assert!(pgm.starts_with(b"P5\n64 64\n2\n"));
        let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(index.lines().next().unwrap(), format!("s1_00000\t1\t{}", data[0].seed));
    }

    #[test]
    fn size_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&small(1), 1, 0).unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let small_mask = Mask::new(4, 4);
        let path = dir.path().join(mask_file(&data[0].sample_id));
        write_mask(&small_mask, 2, &path).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(".mask.pgm"), "{err}");
    }
}
