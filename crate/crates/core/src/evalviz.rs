//! Classification metrics and gradient-weighted token attribution maps.

use std::fmt::Write as _;
use std::path::Path;

use crate::datasynth::{ImageSample, POSITIVE};
use crate::error::{Error, Result};
use crate::image::{encode_pgm, Mask, RgbImage};
use crate::model::SiVit;
use crate::tensor::{Tape, Tensor};
use crate::train::augment::eval_view;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[u8], truth: &[u8]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == POSITIVE, t == POSITIVE) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Names of metrics whose denominator was zero and were set to 0.
    pub degenerate: Vec<&'static str>,
}

fn ratio(num: usize, den: usize, name: &'static str, flags: &mut Vec<&'static str>) -> f64 {
    if den == 0 {
        flags.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let mut degenerate = Vec::new();
    let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", &mut degenerate);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut degenerate);
    let specificity = ratio(c.tn, c.tn + c.fp, "specificity", &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate.push("f1");
        0.0
    };
    Metrics { accuracy, precision, recall, specificity, f1, degenerate }
}

/// Classifies the evaluation views (central crop only) of `samples`.
pub fn evaluate(model: &SiVit, samples: &[ImageSample], crop_frac: f64) -> Result<ConfusionCounts> {
    let views: Vec<RgbImage> = samples.iter().map(|s| eval_view(s, crop_frac).image).collect();
    let refs: Vec<&RgbImage> = views.iter().collect();
    let predicted = model.classify(&refs)?;
    let truth: Vec<u8> = samples.iter().map(|s| s.class_label).collect();
    Ok(ConfusionCounts::from_predictions(&predicted, &truth))
}

pub const METRICS_HEADER: &str = "split,accuracy,precision,recall,specificity,f1";

pub fn metrics_row(split: &str, m: &Metrics) -> String {
    format!("{split},{},{},{},{},{}", m.accuracy, m.precision, m.recall, m.specificity, m.f1)
}

pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (split, m) in rows {
        let _ = writeln!(out, "{}", metrics_row(split, m));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// Patch-grid side.
    pub side: usize,
    /// `side × side` row-major values in `[0, 1]`.
    pub grid: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Nearest-neighbour upsampling of `grid` to `height × width`.
    pub upsampled: Vec<f64>,
    pub target_class: usize,
}

impl AttributionMap {
    /// Min-max normalizes raw patch scores; a constant grid becomes all zeros.
    pub fn from_scores(scores: &[f64], side: usize, height: usize, width: usize, target_class: usize) -> Self {
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let grid: Vec<f64> =
            if hi > lo { scores.iter().map(|s| (s - lo) / (hi - lo)).collect() } else { vec![0.0; scores.len()] };
        let mut upsampled = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                upsampled[y * width + x] = grid[(y * side / height) * side + x * side / width];
            }
        }
        AttributionMap { side, grid, height, width, upsampled, target_class }
    }

    /// Mean map value over pixels where `mask == category` and over the rest.
    pub fn inside_outside(&self, mask: &Mask, category: u8) -> (f64, f64) {
        let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.upsampled.iter().zip(&mask.data) {
            if m == category {
                a += v;
                na += 1;
            } else {
                b += v;
                nb += 1;
            }
        }
        (a / na.max(1) as f64, b / nb.max(1) as f64)
    }
}

/// Gradient-weighted activation map of the input tokens to the last block.
///
/// Each patch token is weighted by its own gradient: the score of token `i` is
/// `ReLU(Σ_d dlogit/dA[i, d] · A[i, d])`.
pub fn attribution(model: &SiVit, image: &RgbImage, target_class: usize) -> Result<AttributionMap> {
    if target_class >= crate::heads::NUM_CLASSES {
        return Err(Error::Contract(format!("target class {target_class} out of range")));
    }
    let cfg = &model.cfg.vit;
    let (side, seq, d) = (cfg.grid_side(), cfg.seq_len(), cfg.embed_dim);
    let start = cfg.depth.saturating_sub(1);

    // run the early blocks without gradients, then restart from a leaf
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let tokens = model.backbone.embed(&mut tape, &bound, &[image])?;
    let activations = if start == 0 {
        tape.value(tokens).clone()
    } else {
        let early = model.backbone.forward_from(&mut tape, &bound, tokens, 1, 0)?;
        tape.value(early.last_block_input).clone()
    };

    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let a = tape.leaf(activations.clone());
    let seq_out = model.backbone.forward_from(&mut tape, &bound, a, 1, start)?;
    let logits = model.heads.cls_head(&mut tape, &bound, seq_out.cls)?;
    let pick = Tensor::from_fn(&[1, crate::heads::NUM_CLASSES], |j| (j == target_class) as u8 as f64);
    let pick = tape.constant(pick);
    let picked = tape.mul(logits, pick)?;
    let logit = tape.sum(picked);
    if !tape.value(logit).all_finite() {
        return Err(Error::Numerical("non-finite logit in attribution".into()));
    }
    tape.backward(logit)?;
    let g = tape.grad(a).unwrap_or_else(|| Tensor::zeros(&[seq, d]));
    if !g.all_finite() {
        return Err(Error::Numerical("non-finite gradient in attribution".into()));
    }

    let scores: Vec<f64> = (1..seq)
        .map(|i| activations.row(i).iter().zip(g.row(i)).map(|(x, gx)| x * gx).sum::<f64>().max(0.0))
        .collect();
    Ok(AttributionMap::from_scores(&scores, side, image.height, image.width, target_class))
}

/// 8-bit grayscale PGM of the upsampled map.
pub fn encode_map(map: &AttributionMap) -> Vec<u8> {
    let pixels: Vec<u8> = map.upsampled.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_pgm(map.width, map.height, 255, &pixels)
}

pub fn write_map(map: &AttributionMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ViTConfig;
    use crate::bagging::{patchify, shuffle_distribute, ShuffleScope};
    use crate::datasynth::{generate_sample, GenConfig};
    use crate::heads::HeadConfig;
    use crate::image::decode_pgm;
    use crate::model::ModelConfig;
    use crate::rng::seeded;

    #[test]
    fn perfect_counts() {
        let m = metrics(&ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        assert_eq!((m.accuracy, m.precision, m.recall, m.specificity, m.f1), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn no_positive_predictions_flag_precision() {
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 });
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.contains(&"precision"));
        assert!(m.degenerate.contains(&"f1"));
    }

    #[test]
    fn worked_example() {
        let m = metrics(&ConfusionCounts { tp: 90, fp: 20, tn: 80, fn_: 10 });
        assert!((m.accuracy - 0.85).abs() < 1e-12);
        assert!((m.precision - 90.0 / 110.0).abs() < 1e-12);
        assert!((m.recall - 0.9).abs() < 1e-12);
        assert!((m.specificity - 0.8).abs() < 1e-12);
        assert!((m.f1 - 180.0 / 210.0).abs() < 1e-12);
    }

    #[test]
    fn counts_from_predictions() {
        let c = ConfusionCounts::from_predictions(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]);
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(c.total(), 5);
    }

    #[test]
    fn csv_layout() {
        let m = metrics(&ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(metrics_csv(&[("test".into(), m)]), "split,accuracy,precision,recall,specificity,f1\ntest,0.5,0.5,0.5,0.5,0.5\n");
    }

    fn model() -> SiVit {
        SiVit::new(ModelConfig {
            vit: ViTConfig { image_size: 64, patch_size: 8, embed_dim: 16, depth: 2, heads: 2, mlp_ratio: 2, seed: 1 },
            heads: HeadConfig::default(),
        })
        .unwrap()
    }

    #[test]
    fn map_shape_and_range() {
        let m = model();
        let s = generate_sample(&GenConfig::default(), 0, true).unwrap();
        let map = attribution(&m, &s.image, 1).unwrap();
        assert_eq!((map.side, map.grid.len(), map.upsampled.len()), (8, 64, 64 * 64));
        let hi = map.grid.iter().cloned().fold(0.0, f64::max);
        assert!(map.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(hi == 1.0 || map.grid.iter().all(|&v| v == 0.0));
        assert_eq!(map.upsampled[0], map.grid[0]);
        assert_eq!(map.upsampled[64 * 64 - 1], map.grid[63]);
        assert_eq!(map.upsampled[9 * 64 + 17], map.grid[8 + 2]);
    }

    #[test]
    fn zeroed_head_gives_zero_map() {
        let mut m = model();
        for id in [m.heads.cls_w, m.heads.cls_b] {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let s = generate_sample(&GenConfig::default(), 0, true).unwrap();
        let map = attribution(&m, &s.image, 1).unwrap();
        assert!(map.upsampled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invariant_to_positive_gradient_scale() {
        let m = model();
        let mut scaled = m.clone();
        scaled.params.get_mut(m.heads.cls_w).data_mut().iter_mut().for_each(|v| *v *= 3.5);
        let s = generate_sample(&GenConfig::default(), 3, true).unwrap();
        let a = attribution(&m, &s.image, 1).unwrap();
        let b = attribution(&scaled, &s.image, 1).unwrap();
        assert!(a.grid.iter().zip(&b.grid).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn works_on_shuffled_bags_and_shallow_models() {
        let cfg = GenConfig::default();
        let grids: Vec<_> = (0..3).map(|i| patchify(&generate_sample(&cfg, i, i % 2 == 0).unwrap(), 8).unwrap()).collect();
        let (bags, _) = shuffle_distribute(&grids, &mut seeded(2), ShuffleScope::Batch, true).unwrap();
        let mut m = model();
        for bag in &bags {
            attribution(&m, &bag.image, 0).unwrap();
        }
        m = SiVit::new(ModelConfig { vit: ViTConfig { depth: 1, ..m.cfg.vit }, heads: m.cfg.heads }).unwrap();
        attribution(&m, &bags[0].image, 1).unwrap();
    }

    fn depth_one(base: SiVit) -> SiVit {
        SiVit::new(ModelConfig { vit: ViTConfig { depth: 1, ..base.cfg.vit }, heads: base.cfg.heads }).unwrap()
    }

    fn cls_logit(m: &SiVit, tokens: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let bound = m.params.bind_frozen(&mut tape);
        let x = tape.constant(tokens.clone());
        let out = m.backbone.forward_from(&mut tape, &bound, x, 1, 0).unwrap();
        let l = m.heads.cls_head(&mut tape, &bound, out.cls).unwrap();
        tape.value(l).data()[1]
    }

    fn embedded(m: &SiVit, seed: usize) -> Tensor {
        let s = generate_sample(&GenConfig::default(), seed, true).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind_frozen(&mut tape);
        let v = m.backbone.embed(&mut tape, &bound, &[&s.image]).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn matches_finite_difference_token_scores() {
        let m = depth_one(model());
        let s = generate_sample(&GenConfig::default(), 5, true).unwrap();
        let tokens = embedded(&m, 5);
        let (seq, d) = (tokens.shape()[0], tokens.shape()[1]);
        let eps = 1e-3;
        // scaling token i by (1 + h) moves the logit by h · Σ_d grad · activation
        let scores: Vec<f64> = (1..seq)
            .map(|i| {
                let scaled = |h: f64| {
                    let mut t = tokens.clone();
                    t.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|x| *x *= 1.0 + h);
                    cls_logit(&m, &t)
                };
                ((scaled(eps) - scaled(-eps)) / (2.0 * eps)).max(0.0)
            })
            .collect();
        let want = AttributionMap::from_scores(&scores, m.cfg.vit.grid_side(), 64, 64, 1);
        let got = attribution(&m, &s.image, 1).unwrap();
        let err = got.grid.iter().zip(&want.grid).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "max grid difference {err}");
    }

    #[test]
    fn uniform_token_shift_leaves_logit_unchanged() {
        let m = depth_one(model());
        let tokens = embedded(&m, 6);
        let d = tokens.shape()[1];
        let before = cls_logit(&m, &tokens);
        let mut t = tokens.clone();
        t.data_mut()[3 * d..4 * d].iter_mut().for_each(|x| *x += 0.7);
        assert!((cls_logit(&m, &t) - before).abs() < 1e-9);
    }

    #[test]
    fn constant_scores_map_to_zero() {
        let map = AttributionMap::from_scores(&[0.3; 4], 2, 4, 4, 1);
        assert!(map.upsampled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pgm_bytes() {
        let zeros = AttributionMap::from_scores(&[1.0; 4], 2, 2, 2, 1);
        assert_eq!(encode_map(&zeros), b"P5\n2 2\n255\n\0\0\0\0");
        let mut ones = zeros.clone();
        ones.upsampled = vec![1.0; 4];
        assert_eq!(&encode_map(&ones)[11..], &[255; 4]);
        // ramp 0, 1/3, 2/3, 1 on a 2x2 grid shown at 4x4
        let ramp = AttributionMap::from_scores(&[0.0, 1.0, 2.0, 3.0], 2, 4, 4, 1);
        let bytes = encode_map(&ramp);
        assert_eq!(&bytes[..11], b"P5\n4 4\n255\n");
        assert_eq!(&bytes[11..], &[0, 0, 85, 85, 0, 0, 85, 85, 170, 170, 255, 255, 170, 170, 255, 255]);
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let map = AttributionMap::from_scores(&[0.1, 0.7, 0.25, 0.9, 0.0, 0.33, 0.5, 0.61, 1.0], 3, 6, 6, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_map(&map, &path).unwrap();
        let (w, h, maxval, px) = decode_pgm(&std::fs::read(&path).unwrap(), &path).unwrap();
        assert_eq!((w, h, maxval), (6, 6, 255));
        for (b, v) in px.iter().zip(&map.upsampled) {
            assert!((*b as f64 / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
