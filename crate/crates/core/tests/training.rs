use sivit::backbone::ViTConfig;
use sivit::datasynth::{generate_dataset, GenConfig};
use sivit::heads::{HeadConfig, HeadWeights};
use sivit::model::ModelConfig;
use sivit::train::{AdamConfig, AugmentConfig, Strategy, TrainConfig, Trainer};

fn one_step(strategy: Strategy, weights: HeadWeights) -> Vec<(String, bool)> {
    let gen = GenConfig { image_size: 32, patch_size: 8, ..GenConfig::default() };
    let data = generate_dataset(&gen, 2, 2).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            vit: ViTConfig { image_size: 32, patch_size: 8, embed_dim: 8, depth: 2, heads: 2, mlp_ratio: 2, seed: 0 },
            heads: HeadConfig::default(),
        },
        strategy,
        head_weights: weights,
        epochs: 1,
        batch_size: 4,
        adam: AdamConfig { weight_decay: 0.0, ..AdamConfig::default() },
        augment: AugmentConfig::eval_only(1.0),
        seed: 11,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &data, &data).unwrap();
    let before = t.model.params.clone();
    t.run_epoch().unwrap();
    before
        .iter()
        .zip(t.model.params.tensors())
        .map(|((name, a), b)| (name.to_string(), a.max_abs_diff(b) > 0.0))
        .collect()
}

#[test]
fn every_parameter_moves_under_the_full_objective() {
    let dead: Vec<_> = one_step(Strategy::Si, HeadWeights::default())
        .into_iter()
        .filter(|(_, moved)| !moved)
        .map(|(n, _)| n)
        .collect();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn classification_only_training_leaves_the_regression_head_alone() {
    for (name, moved) in one_step(Strategy::Naive, HeadWeights::default()) {
        assert_eq!(moved, !name.starts_with("reg_head"), "{name}");
    }
}

#[test]
fn regression_only_training_leaves_the_classifier_alone() {
    let w = HeadWeights::new(0.0, 1.0, 1.0).unwrap();
    for (name, moved) in one_step(Strategy::Si, w) {
        assert_eq!(moved, !name.starts_with("cls_head"), "{name}");
    }
}
