//! Color perturbations in RGB and hue-saturation-value space.

use rand::Rng as _;

use crate::image::RgbImage;
use crate::rng::Rng;

/// Jitter strengths. Each factor is drawn uniformly from `[1-s, 1+s]`
/// (clamped at zero); the hue offset from `[-hue, hue]` in turns.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter { brightness: 0.15, contrast: 0.3, saturation: 0.3, hue: 0.06 }
    }
}

/// One concrete draw of [`ColorJitter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue_shift: 0.0 };
}

fn factor(rng: &mut Rng, s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
    }
}

impl ColorJitter {
    pub fn none() -> Self {
        ColorJitter { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        [self.brightness, self.contrast, self.saturation, self.hue].iter().all(|v| *v >= 0.0 && v.is_finite())
            && self.hue <= 0.5
    }

    pub fn sample(&self, rng: &mut Rng) -> JitterFactors {
        JitterFactors {
            brightness: factor(rng, self.brightness),
            contrast: factor(rng, self.contrast),
            saturation: factor(rng, self.saturation),
            hue_shift: if self.hue > 0.0 { rng.random_range(-self.hue..=self.hue) } else { 0.0 },
        }
    }
}

fn gray(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Applies brightness, contrast, saturation, then hue, clamping to `[0, 1]`.
pub fn apply_jitter(img: &mut RgbImage, f: &JitterFactors) {
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    if f.brightness != 1.0 {
        img.data.iter_mut().for_each(|v| *v = clamp(*v * f.brightness));
    }
    if f.contrast != 1.0 {
        let n = (img.height * img.width).max(1) as f64;
        let mean = img.data.chunks(3).map(|p| gray([p[0], p[1], p[2]])).sum::<f64>() / n;
        img.data.iter_mut().for_each(|v| *v = clamp(mean + (*v - mean) * f.contrast));
    }
    if f.saturation != 1.0 {
        for p in img.data.chunks_mut(3) {
            let g = gray([p[0], p[1], p[2]]);
            p.iter_mut().for_each(|v| *v = clamp(g + (*v - g) * f.saturation));
        }
    }
    if f.hue_shift != 0.0 {
        for p in img.data.chunks_mut(3) {
            let [h, s, v] = rgb_to_hsv([p[0], p[1], p[2]]);
            let rgb = hsv_to_rgb([h + f.hue_shift, s, v]);
            p.copy_from_slice(&rgb.map(clamp));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for i in 0..200 {
            let c = [(i as f64 * 0.13).fract(), (i as f64 * 0.37).fract(), (i as f64 * 0.71).fract()];
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for (a, b) in c.iter().zip(back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_factors_leave_image_unchanged() {
        let mut img = RgbImage::filled(3, 3, [0.2, 0.5, 0.7]);
        let before = img.clone();
        apply_jitter(&mut img, &JitterFactors::IDENTITY);
        assert_eq!(img, before);
    }

    #[test]
    fn factors_stay_in_range() {
        let mut rng = crate::rng::seeded(1);
        let j = ColorJitter::default();
        for _ in 0..100 {
            let f = j.sample(&mut rng);
            assert!((0.85..=1.15).contains(&f.brightness));
            assert!((0.7..=1.3).contains(&f.contrast));
            assert!((0.7..=1.3).contains(&f.saturation));
            assert!((-0.06..=0.06).contains(&f.hue_shift));
        }
    }
}
