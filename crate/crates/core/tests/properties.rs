use proptest::prelude::*;
use rand::Rng as _;

use sivit::bagging::{
    aggregate_bag_label, compute_patch_label, mil_bag_label, patchify, shuffle_distribute, unpatchify,
    unshuffle_distribute, ShuffleScope,
};
use sivit::datasynth::ImageSample;
use sivit::evalviz::{metrics, ConfusionCounts};
use sivit::image::{Mask, RgbImage};
use sivit::rng::seeded;
use sivit::tensor::{Tape, Tensor};
use sivit::train::cosine_lr;

fn random_sample(side: usize, k: u8, seed: u64) -> ImageSample {
    let mut rng = seeded(seed);
    let mut image = RgbImage::new(side, side);
    image.data.iter_mut().for_each(|v| *v = rng.random());
    let mut mask = Mask::new(side, side);
    // blobs rather than salt noise so patches see mixed and pure regions
    for _ in 0..rng.random_range(0..6) {
        let (cy, cx, r) = (rng.random_range(0..side), rng.random_range(0..side), rng.random_range(1..side.max(2)));
        let cat = rng.random_range(1..=k);
        for y in cy.saturating_sub(r)..(cy + r).min(side) {
            for x in cx.saturating_sub(r)..(cx + r).min(side) {
                mask.set(y, x, cat);
            }
        }
    }
    let class_label = ImageSample::label_from_mask(&mask, k);
    ImageSample { image, mask, class_label, sample_id: format!("p{seed}"), seed, num_categories: k }
}

fn column_sums(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    rows.fold(Vec::new(), |mut acc, r| {
        acc.resize(r.len(), 0.0);
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, ..ProptestConfig::default() })]

    #[test]
    fn shuffling_conserves_batch_label_mass(
        b in 1usize..=8, grid_side in 1usize..=4, p in 2usize..=4, k in 1u8..=3, seed in any::<u64>(), normalize in any::<bool>()
    ) {
        let side = grid_side * p;
        let grids: Vec<_> = (0..b).map(|i| patchify(&random_sample(side, k, seed ^ i as u64), p).unwrap()).collect();
        let plain = unshuffle_distribute(&grids, normalize).unwrap();
        let (bags, record) = shuffle_distribute(&grids, &mut seeded(seed), ShuffleScope::Batch, normalize).unwrap();
        let before = column_sums(plain.iter().map(|x| x.soft_label.to_vec()));
        let after = column_sums(bags.iter().map(|x| x.soft_label.to_vec()));
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!(record.is_bijection());

        let flat: Vec<RgbImage> = grids.iter().flat_map(|g| g.patches.clone()).collect();
        let moved: Vec<RgbImage> = bags
            .iter()
            .flat_map(|bag| {
                let s = ImageSample { image: bag.image.clone(), mask: bag.mask.clone(), class_label: 0, sample_id: String::new(), seed: 0, num_categories: k };
                patchify(&s, p).unwrap().patches
            })
            .collect();
        prop_assert_eq!(record.invert(&moved), flat);
    }

    #[test]
    fn within_bag_scope_keeps_each_bag_label(b in 1usize..=4, seed in any::<u64>()) {
        let grids: Vec<_> = (0..b).map(|i| patchify(&random_sample(8, 2, seed ^ i as u64), 2).unwrap()).collect();
        let plain = unshuffle_distribute(&grids, false).unwrap();
        let (bags, _) = shuffle_distribute(&grids, &mut seeded(seed), ShuffleScope::WithinBag, false).unwrap();
        for (x, y) in plain.iter().zip(&bags) {
            for (u, v) in x.soft_label.to_vec().iter().zip(y.soft_label.to_vec()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn patchify_round_trips(grid_side in 1usize..=5, p in 1usize..=5, seed in any::<u64>()) {
        let s = random_sample(grid_side * p, 3, seed);
        let (image, mask) = unpatchify(&patchify(&s, p).unwrap());
        prop_assert_eq!(image, s.image);
        prop_assert_eq!(mask, s.mask);
    }

    #[test]
    fn patch_label_ratios_are_consistent(p in 1usize..=6, k in 1u8..=3, seed in any::<u64>()) {
        let s = random_sample(p, k, seed);
        let l = compute_patch_label(&s.mask, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&l.mr));
        prop_assert!((l.per_category.iter().sum::<f64>() - l.mr).abs() < 1e-12);
        prop_assert!(l.per_category.iter().filter(|&&v| v > 0.0).count() <= 1);
    }

    #[test]
    fn normalized_bag_label_is_the_mean(n in 1usize..=16, seed in any::<u64>()) {
        let labels: Vec<_> = (0..n).map(|i| compute_patch_label(&random_sample(3, 2, seed ^ i as u64).mask, 2).unwrap()).collect();
        let raw = aggregate_bag_label(&labels, false).unwrap();
        let norm = aggregate_bag_label(&labels, true).unwrap();
        for (r, m) in raw.to_vec().iter().zip(norm.to_vec()) {
            prop_assert!((r / n as f64 - m).abs() < 1e-12);
        }
    }

    #[test]
    fn mil_label_is_any(bits in prop::collection::vec(0u8..=1, 1..40)) {
        prop_assert_eq!(mil_bag_label(&bits).unwrap(), bits.contains(&1) as u8);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-30.0..30.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        for r in 0..rows {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..6, cols in 2usize..12, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-5.0..5.0));
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones(&[cols]));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let eps = 1e-5;
        let y = tape.layer_norm(v, g, b, eps).unwrap();
        for r in 0..rows {
            let xr = x.row(r);
            let mu = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / cols as f64;
            let yr = tape.value(y).row(r);
            let m = yr.iter().sum::<f64>() / cols as f64;
            let vy = yr.iter().map(|a| (a - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((vy - var / (var + eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_identities(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        let m = metrics(&c);
        let total = c.total() as f64;
        prop_assert!((m.accuracy - (tp + tn) as f64 / total).abs() < 1e-12);
        for v in [m.accuracy, m.precision, m.recall, m.specificity, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if m.precision > 0.0 && m.recall > 0.0 {
            let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - h).abs() < 1e-12);
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
        }
        prop_assert_eq!(m.degenerate.is_empty(), tp > 0 && tn + fp > 0);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_non_increasing(total in 1usize..500, lr0 in 1e-6f64..1e-1) {
        let mut prev = f64::INFINITY;
        for step in 0..=total + 3 {
            let lr = cosine_lr(step, total, lr0);
            prop_assert!(lr <= lr0 * (1.0 + 1e-12) && lr >= lr0 / 20.0 * (1.0 - 1e-12));
            prop_assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}
