//! Regression head over patch tokens, classification head over the class token,
//! and the weighted three-term loss.

use serde::{Deserialize, Serialize};

use crate::backbone::{trunc_normal, Bound, ParamId, Params};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;

/// Loss weights in `CLS : REG_USF : REG_SF` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_cls: f64,
    pub w_reg_usf: f64,
    pub w_reg_sf: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        HeadWeights { w_cls: 1.0, w_reg_usf: 1.0, w_reg_sf: 1.0 }
    }
}

impl HeadWeights {
    pub fn new(w_cls: f64, w_reg_usf: f64, w_reg_sf: f64) -> Result<Self> {
        let w = HeadWeights { w_cls, w_reg_usf, w_reg_sf };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_reg_usf, self.w_reg_sf];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("head weights must be finite and non-negative, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one head weight must be positive".into()));
        }
        Ok(())
    }

    /// Parses `a:b:c`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Config(format!("head weights '{s}' are not numbers")))?;
        match nums.as_slice() {
            [a, b, c] => HeadWeights::new(*a, *b, *c),
            _ => Err(Error::Config(format!("head weights '{s}' must look like CLS:REG_USF:REG_SF"))),
        }
    }

    pub fn as_string(&self) -> String {
        format!("{}:{}:{}", self.w_cls, self.w_reg_usf, self.w_reg_sf)
    }
}

/// Per-term losses and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg_sf: f64,
    pub l_reg_usf: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, w: &HeadWeights) -> f64 {
        w.w_cls * self.l_cls + w.w_reg_usf * self.l_reg_usf + w.w_reg_sf * self.l_reg_sf
    }

    /// `|total - Σ w·component|`
    pub fn decomposition_error(&self, w: &HeadWeights) -> f64 {
        (self.total - self.weighted(w)).abs()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegHeadMode {
    /// Shared MLP per patch token, then aggregate over the bag.
    #[default]
    PerToken,
    /// Mean-pool tokens, then one MLP.
    PoolThenMlp,
}

impl std::str::FromStr for RegHeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_token" => Ok(RegHeadMode::PerToken),
            "pool_then_mlp" => Ok(RegHeadMode::PoolThenMlp),
            _ => Err(Error::Config(format!("unknown regression head mode {s:?} (expected per_token|pool_then_mlp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Mask categories `K`; the regression target has `K + 1` entries.
    pub num_categories: usize,
    pub reg_mode: RegHeadMode,
    /// Targets are bag means rather than sums.
    pub normalized_labels: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { num_categories: 2, reg_mode: RegHeadMode::PerToken, normalized_labels: true }
    }
}

/// Head outputs for one pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Predictions {
    /// `[B, K+1]`
    pub soft_label_hat: Option<Var>,
    /// `[B, 2]`
    pub class_logits: Option<Var>,
}

/// Targets of one training step.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// Soft labels of the shuffled bags, `[B, K+1]`.
    pub sf: Option<Tensor>,
    /// Soft labels of the original bags, `[B, K+1]`.
    pub usf: Option<Tensor>,
    /// Class distributions, `[B, 2]` (one-hot for hard labels).
    pub class: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub cfg: HeadConfig,
    pub reg_w1: ParamId,
    pub reg_b1: ParamId,
    pub reg_w2: ParamId,
    pub reg_b2: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

const INIT_STD: f64 = 0.02;

impl Heads {
    pub fn init(cfg: &HeadConfig, embed_dim: usize, params: &mut Params, rng: &mut Rng) -> Self {
        let d = embed_dim;
        let out = cfg.num_categories + 1;
        Heads {
            cfg: cfg.clone(),
            reg_w1: params.push("reg_head.fc1.weight", trunc_normal(&[d, d], INIT_STD, rng)),
            reg_b1: params.push("reg_head.fc1.bias", Tensor::zeros(&[d])),
            reg_w2: params.push("reg_head.fc2.weight", trunc_normal(&[d, out], INIT_STD, rng)),
            reg_b2: params.push("reg_head.fc2.bias", Tensor::zeros(&[out])),
            cls_w: params.push("cls_head.weight", trunc_normal(&[d, NUM_CLASSES], INIT_STD, rng)),
            cls_b: params.push("cls_head.bias", Tensor::zeros(&[NUM_CLASSES])),
        }
    }

    pub fn locate(cfg: &HeadConfig, params: &Params) -> Result<Self> {
        let id = |name: &str| params.find(name).ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")));
        Ok(Heads {
            cfg: cfg.clone(),
            reg_w1: id("reg_head.fc1.weight")?,
            reg_b1: id("reg_head.fc1.bias")?,
            reg_w2: id("reg_head.fc2.weight")?,
            reg_b2: id("reg_head.fc2.bias")?,
            cls_w: id("cls_head.weight")?,
            cls_b: id("cls_head.bias")?,
        })
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.reg_w1))?;
        let h = tape.add_bias(h, bound.var(self.reg_b1))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, bound.var(self.reg_w2))?;
        tape.add_bias(h, bound.var(self.reg_b2))
    }

    /// `[B, B·n]` pooling matrix with `weight` on each image's own rows.
    fn pooling(batch: usize, n: usize, weight: f64) -> Tensor {
        Tensor::from_fn(&[batch, batch * n], |i| {
            let (b, col) = (i / (batch * n), i % (batch * n));
            if col / n == b {
                weight
            } else {
                0.0
            }
        })
    }

    /// Bag soft-label prediction `[B, K+1]` from patch tokens `[B·n, D]`.
    pub fn reg_head(&self, tape: &mut Tape, bound: &Bound, patch_tokens: Var, batch: usize) -> Result<Var> {
        let rows = tape.shape(patch_tokens)[0];
        if batch == 0 || rows == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::Shape(format!("{rows} patch tokens cannot form {batch} bags")));
        }
        let n = rows / batch;
        let agg = if self.cfg.normalized_labels { 1.0 / n as f64 } else { 1.0 };
        match self.cfg.reg_mode {
            RegHeadMode::PerToken => {
                let per_patch = self.mlp(tape, bound, patch_tokens)?;
                let pool = tape.constant(Self::pooling(batch, n, agg));
                tape.matmul(pool, per_patch)
            }
            RegHeadMode::PoolThenMlp => {
                let pool = tape.constant(Self::pooling(batch, n, 1.0 / n as f64));
                let pooled = tape.matmul(pool, patch_tokens)?;
                let out = self.mlp(tape, bound, pooled)?;
                Ok(if self.cfg.normalized_labels { out } else { tape.scale(out, n as f64) })
            }
        }
    }

    /// Class logits `[B, 2]` from class tokens `[B, D]`.
    pub fn cls_head(&self, tape: &mut Tape, bound: &Bound, cls: Var) -> Result<Var> {
        let z = tape.matmul(cls, bound.var(self.cls_w))?;
        tape.add_bias(z, bound.var(self.cls_b))
    }
}

fn term(tape: &mut Tape, pred: Option<Var>, target: Option<&Tensor>, name: &str) -> Result<Var> {
    let pred = pred.ok_or_else(|| Error::Contract(format!("{name} has weight but no prediction")))?;
    let target = target.ok_or_else(|| Error::Contract(format!("{name} has weight but no target")))?;
    let t = tape.constant(target.clone());
    tape.mse(pred, t)
}

/// Weighted loss `w_cls·l_cls + w_usf·l_reg_usf + w_sf·l_reg_sf`.
///
/// Terms with zero weight are not evaluated and report 0. The classification
/// term only uses the un-shuffled pass.
pub fn composite_loss(
    tape: &mut Tape,
    pred_sf: &Predictions,
    pred_usf: &Predictions,
    targets: &LossTargets,
    weights: &HeadWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let mut parts: Vec<Var> = Vec::with_capacity(3);
    let mut out = LossBreakdown::default();
    if weights.w_cls > 0.0 {
        let logits =
            pred_usf.class_logits.ok_or_else(|| Error::Contract("classification weight without logits".into()))?;
        let l = tape.cross_entropy(logits, &targets.class)?;
        out.l_cls = tape.value(l).item()?;
        parts.push(tape.scale(l, weights.w_cls));
    }
    if weights.w_reg_usf > 0.0 {
        let l = term(tape, pred_usf.soft_label_hat, targets.usf.as_ref(), "REG_USF")?;
        out.l_reg_usf = tape.value(l).item()?;
        parts.push(tape.scale(l, weights.w_reg_usf));
    }
    if weights.w_reg_sf > 0.0 {
        let l = term(tape, pred_sf.soft_label_hat, targets.sf.as_ref(), "REG_SF")?;
        out.l_reg_sf = tape.value(l).item()?;
        parts.push(tape.scale(l, weights.w_reg_sf));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    out.total = tape.value(total).item()?;
    if !out.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {:?}", out)));
    }
    Ok((total, out))
}

/// One-hot `[B, 2]` targets.
pub fn one_hot(labels: &[u8]) -> Tensor {
    Tensor::from_fn(&[labels.len(), NUM_CLASSES], |i| (labels[i / NUM_CLASSES] as usize == i % NUM_CLASSES) as u8 as f64)
}
