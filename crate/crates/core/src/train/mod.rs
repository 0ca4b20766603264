//! Training loop: strategies, the two-pass SI step, schedules and logs.

pub mod augment;
pub mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::Params;
use crate::bagging::{patchify, shuffle_distribute, unshuffle_distribute, Bag, ShuffleScope};
use crate::datasynth::ImageSample;
use crate::error::{Error, Result};
use crate::evalviz::{evaluate, metrics};
use crate::heads::{composite_loss, one_hot, HeadWeights, LossBreakdown, LossTargets, Predictions};
use crate::image::RgbImage;
use crate::model::{ModelConfig, SiVit};
use crate::rng::{rng_for, Rng};
use crate::tensor::{Tape, Tensor};

pub use augment::AugmentConfig;
pub use optim::{adam_update, cosine_lr, AdamConfig, AdamState};

/// Loss above which a run is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Cutout,
    Mixup,
    Cutmix,
    Si,
    UsfOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::Naive, Strategy::Cutout, Strategy::Mixup, Strategy::Cutmix, Strategy::Si, Strategy::UsfOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Cutout => "cutout",
            Strategy::Mixup => "mixup",
            Strategy::Cutmix => "cutmix",
            Strategy::Si => "si",
            Strategy::UsfOnly => "usf_only",
        }
    }

    /// Loss weights actually used: baselines train the classification head only
    /// and `usf_only` drops the shuffled term.
    pub fn effective_weights(&self, w: &HeadWeights) -> Result<HeadWeights> {
        let eff = match self {
            Strategy::Si => *w,
            Strategy::UsfOnly => HeadWeights { w_reg_sf: 0.0, ..*w },
            _ => HeadWeights { w_cls: w.w_cls, w_reg_usf: 0.0, w_reg_sf: 0.0 },
        };
        if eff.w_cls + eff.w_reg_usf + eff.w_reg_sf <= 0.0 {
            return Err(Error::Config(format!(
                "strategy {} has no active loss term under head weights {}",
                self.name(),
                w.as_string()
            )));
        }
        Ok(eff)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (expected naive|cutout|mixup|cutmix|si|usf_only)")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One backward over the summed loss of both passes.
    #[default]
    Combined,
    /// Shuffled pass updates first, then the un-shuffled pass.
    TwoUpdates,
}

impl FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(UpdateMode::Combined),
            "two_updates" => Ok(UpdateMode::TwoUpdates),
            _ => Err(Error::Config(format!("unknown update mode {s:?} (expected combined|two_updates)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `model.vit.seed` is overwritten by `seed`.
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub head_weights: HeadWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub shuffle_scope: ShuffleScope,
    pub update_mode: UpdateMode,
    /// Cutout square side as a fraction of the image side.
    pub cutout_frac: f64,
    /// Beta(α, α) parameter for mixup and cutmix.
    pub mix_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig { vit: Default::default(), heads: Default::default() },
            strategy: Strategy::Si,
            head_weights: HeadWeights::default(),
            epochs: 50,
            batch_size: 16,
            lr: 3e-4,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            shuffle_scope: ShuffleScope::Batch,
            update_mode: UpdateMode::Combined,
            cutout_frac: 0.5,
            mix_alpha: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.vit.validate()?;
        self.head_weights.validate()?;
        self.strategy.effective_weights(&self.head_weights)?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cutout_frac) {
            return Err(Error::Config(format!("cutout fraction must be in [0, 1], got {}", self.cutout_frac)));
        }
        if self.mix_alpha.is_nan() || self.mix_alpha <= 0.0 {
            return Err(Error::Config(format!("mix alpha must be positive, got {}", self.mix_alpha)));
        }
        if self.model.heads.num_categories == 0 {
            return Err(Error::Config("need at least one foreground category".into()));
        }
        Ok(())
    }

    fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.vit.seed = self.seed;
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_cls: f64,
    pub l_reg_usf: f64,
    pub l_reg_sf: f64,
    pub val_acc: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
}

pub const EPOCH_HEADER: &str = "epoch,train_loss,l_cls,l_reg_usf,l_reg_sf,val_acc,lr";
pub const STEP_HEADER: &str = "step,epoch,total,l_cls,l_reg_usf,l_reg_sf,lr";

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{EPOCH_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.l_cls, r.l_reg_usf, r.l_reg_sf, r.val_acc, r.lr
        );
    }
    out
}

pub fn step_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{STEP_HEADER}\n");
    for r in records {
        let l = &r.loss;
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.step, r.epoch, l.total, l.l_cls, l.l_reg_usf, l.l_reg_sf, r.lr);
    }
    out
}

fn soft_label_tensor(bags: &[Bag], k: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = bags.iter().map(|b| b.soft_label.to_vec()).collect();
    let t = Tensor::from_rows(&rows)?;
    if t.shape()[1] != k + 1 {
        return Err(Error::Shape(format!(
            "soft labels have {} columns but the regression head predicts {}",
            t.shape()[1],
            k + 1
        )));
    }
    Ok(t)
}

/// One optimizer step's worth of inputs after augmentation and mixing.
struct PreparedBatch {
    samples: Vec<ImageSample>,
    images: Vec<RgbImage>,
    class_targets: Tensor,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: SiVit,
    weights: HeadWeights,
    adam: AdamState,
    train: &'a [ImageSample],
    val: &'a [ImageSample],
    order_rng: Rng,
    aug_rng: Rng,
    shuffle_rng: Rng,
    mix_rng: Rng,
    step: usize,
    total_steps: usize,
    epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    best: Option<(usize, f64, Params)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy.
    pub model: SiVit,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, train: &'a [ImageSample], val: &'a [ImageSample]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(format!("need training and validation data, got {} and {}", train.len(), val.len())));
        }
        let size = cfg.model.vit.image_size;
        for s in train.iter().chain(val) {
            if s.image.height != size || s.image.width != size {
                return Err(Error::Data(format!(
                    "sample {} is {}x{} but the model expects {size}x{size}",
                    s.sample_id, s.image.width, s.image.height
                )));
            }
            if s.num_categories as usize != cfg.model.heads.num_categories {
                return Err(Error::Data(format!(
                    "sample {} has K={} but the model was built for K={}",
                    s.sample_id, s.num_categories, cfg.model.heads.num_categories
                )));
            }
        }
        let model = SiVit::new(cfg.resolved_model())?;
        let weights = cfg.strategy.effective_weights(&cfg.head_weights)?;
        let adam = AdamState::new(model.params.tensors());
        let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
        Ok(Trainer {
            weights,
            adam,
            train,
            val,
            order_rng: rng_for(cfg.seed, 1),
            aug_rng: rng_for(cfg.seed, 2),
            shuffle_rng: rng_for(cfg.seed, 3),
            mix_rng: rng_for(cfg.seed, 4),
            step: 0,
            total_steps,
            epoch: 0,
            epochs: Vec::new(),
            steps: Vec::new(),
            best: None,
            model,
            cfg,
        })
    }

    pub fn weights(&self) -> &HeadWeights {
        &self.weights
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn prepare(&mut self, idx: &[usize]) -> Result<PreparedBatch> {
        let samples: Vec<ImageSample> =
            idx.iter().map(|&i| augment::train_view(&self.train[i], &self.cfg.augment, &mut self.aug_rng)).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.class_label).collect();
        let mut images: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
        let class_targets = match self.cfg.strategy {
            Strategy::Cutout => {
                images.iter_mut().for_each(|im| augment::cutout(im, self.cfg.cutout_frac, &mut self.mix_rng));
                one_hot(&labels)
            }
            Strategy::Mixup => {
                let (mixed, t) = augment::mixup_batch(&images, &labels, self.cfg.mix_alpha, &mut self.mix_rng)?;
                images = mixed;
                t
            }
            Strategy::Cutmix => {
                let (mixed, t) = augment::cutmix_batch(&images, &labels, self.cfg.mix_alpha, &mut self.mix_rng)?;
                images = mixed;
                t
            }
            _ => one_hot(&labels),
        };
        Ok(PreparedBatch { samples, images, class_targets })
    }

    /// Builds the loss of one or both passes on `tape` for the given weights.
    fn build_loss(
        &mut self,
        tape: &mut Tape,
        bound: &crate::backbone::Bound,
        batch: &PreparedBatch,
        w: &HeadWeights,
    ) -> Result<(crate::tensor::Var, LossBreakdown)> {
        let b = batch.images.len();
        let k = self.model.cfg.heads.num_categories;
        let normalize = self.model.cfg.heads.normalized_labels;
        let needs_grids = w.w_reg_sf > 0.0 || w.w_reg_usf > 0.0;
        let grids = if needs_grids {
            let p = self.model.cfg.vit.patch_size;
            batch.samples.iter().map(|s| patchify(s, p)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let mut pred_sf = Predictions::default();
        let mut sf_target = None;
        if w.w_reg_sf > 0.0 {
            let (bags, _) = shuffle_distribute(&grids, &mut self.shuffle_rng, self.cfg.shuffle_scope, normalize)?;
            sf_target = Some(soft_label_tensor(&bags, k)?);
            let refs: Vec<&RgbImage> = bags.iter().map(|bag| &bag.image).collect();
            let seq = self.model.run(tape, bound, &refs)?;
            pred_sf.soft_label_hat = Some(self.model.heads.reg_head(tape, bound, seq.patch_tokens, b)?);
        }

        let mut pred_usf = Predictions::default();
        let mut usf_target = None;
        if w.w_cls > 0.0 || w.w_reg_usf > 0.0 {
            let refs: Vec<&RgbImage> = batch.images.iter().collect();
            let seq = self.model.run(tape, bound, &refs)?;
            if w.w_cls > 0.0 {
                pred_usf.class_logits = Some(self.model.heads.cls_head(tape, bound, seq.cls)?);
            }
            if w.w_reg_usf > 0.0 {
                usf_target = Some(soft_label_tensor(&unshuffle_distribute(&grids, normalize)?, k)?);
                pred_usf.soft_label_hat = Some(self.model.heads.reg_head(tape, bound, seq.patch_tokens, b)?);
            }
        }

        let targets = LossTargets { sf: sf_target, usf: usf_target, class: batch.class_targets.clone() };
        composite_loss(tape, &pred_sf, &pred_usf, &targets, w)
    }

    fn update(&mut self, batch: &PreparedBatch, w: &HeadWeights, lr: f64) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let (loss, parts) = self.build_loss(&mut tape, &bound, batch, w)?;
        if parts.total > DIVERGENCE_LIMIT {
            return Err(Error::Numerical(format!("loss diverged to {:.3e}", parts.total)));
        }
        tape.backward(loss)?;
        let grads = self.model.params.grads(&tape, &bound);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        adam_update(self.model.params.tensors_mut(), &grads, &mut self.adam, lr, &self.cfg.adam);
        Ok(parts)
    }

    fn train_step(&mut self, idx: &[usize]) -> Result<LossBreakdown> {
        let lr = cosine_lr(self.step, self.total_steps, self.cfg.lr);
        let batch = self.prepare(idx)?;
        let w = self.weights;
        let parts = match self.cfg.update_mode {
            UpdateMode::TwoUpdates if w.w_reg_sf > 0.0 && (w.w_cls > 0.0 || w.w_reg_usf > 0.0) => {
                let sf = self.update(&batch, &HeadWeights { w_cls: 0.0, w_reg_usf: 0.0, ..w }, lr)?;
                let usf = self.update(&batch, &HeadWeights { w_reg_sf: 0.0, ..w }, lr)?;
                LossBreakdown {
                    l_reg_sf: sf.l_reg_sf,
                    l_reg_usf: usf.l_reg_usf,
                    l_cls: usf.l_cls,
                    total: sf.total + usf.total,
                }
            }
            _ => self.update(&batch, &w, lr)?,
        };
        self.steps.push(StepRecord { step: self.step, epoch: self.epoch, loss: parts, lr });
        Ok(parts)
    }

    /// Accuracy on the evaluation views of `samples`.
    pub fn accuracy_on(&self, samples: &[ImageSample]) -> Result<f64> {
        Ok(metrics(&evaluate(&self.model, samples, self.cfg.augment.crop_frac)?).accuracy)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.order_rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        let mut lr = self.cfg.lr;
        for idx in order.chunks(self.cfg.batch_size) {
            let step = self.step;
            let parts = self.train_step(idx).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
                other => other,
            })?;
            lr = self.steps.last().map_or(lr, |s| s.lr);
            sums.total += parts.total;
            sums.l_cls += parts.l_cls;
            sums.l_reg_usf += parts.l_reg_usf;
            sums.l_reg_sf += parts.l_reg_sf;
            batches += 1;
            self.step += 1;
        }
        let val_acc = self.accuracy_on(self.val)?;
        let nb = batches as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: sums.total / nb,
            l_cls: sums.l_cls / nb,
            l_reg_usf: sums.l_reg_usf / nb,
            l_reg_sf: sums.l_reg_sf / nb,
            val_acc,
            lr,
        };
        // ties go to the later, longer-trained epoch
        if self.best.as_ref().is_none_or(|(_, acc, _)| val_acc >= *acc) {
            self.best = Some((self.epoch, val_acc, self.model.params.clone()));
        }
        self.epochs.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs and returns the best-validation model.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let (best_epoch, best_val_acc, params) = match self.best {
            Some(b) => b,
            None => (0, f64::NAN, self.model.params.clone()),
        };
        let model = SiVit::from_params(self.model.cfg.clone(), params)?;
        Ok(TrainOutcome { model, best_epoch, best_val_acc, epochs: self.epochs, steps: self.steps })
    }
}

pub fn train(cfg: TrainConfig, train: &[ImageSample], val: &[ImageSample]) -> Result<TrainOutcome> {
    Trainer::new(cfg, train, val)?.run()
}

pub fn write_logs(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write("metrics.csv", epoch_csv(&outcome.epochs))?;
    write("steps.csv", step_csv(&outcome.steps))
}
