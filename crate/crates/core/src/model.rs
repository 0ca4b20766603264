//! Backbone plus heads with their shared parameter store.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Bound, Params, TokenSequence, ViTConfig};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, Heads};
use crate::image::RgbImage;
use crate::rng::rng_for;
use crate::tensor::{Tape, Tensor};

/// Inference chunk size; bounds tape memory during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub heads: HeadConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiVit {
    pub cfg: ModelConfig,
    pub params: Params,
    pub backbone: Backbone,
    pub heads: Heads,
}

impl SiVit {
    /// Fresh model initialized from `cfg.vit.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut rng = rng_for(cfg.vit.seed, 0x1417);
        let mut params = Params::default();
        let backbone = Backbone::init(&cfg.vit, &mut params, &mut rng)?;
        let heads = Heads::init(&cfg.heads, cfg.vit.embed_dim, &mut params, &mut rng);
        Ok(SiVit { cfg, params, backbone, heads })
    }

    pub fn from_params(cfg: ModelConfig, params: Params) -> Result<Self> {
        let backbone = Backbone::locate(&cfg.vit, &params)?;
        let heads = Heads::locate(&cfg.heads, &params)?;
        Ok(SiVit { cfg, params, backbone, heads })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &serde_json::to_value(&self.cfg).expect("serializable config"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, cfg) = Params::load(path)?;
        let cfg: ModelConfig =
            serde_json::from_value(cfg).map_err(|e| Error::format(path, format!("bad model config: {e}")))?;
        Self::from_params(cfg, params)
    }

    pub fn run(&self, tape: &mut Tape, bound: &Bound, images: &[&RgbImage]) -> Result<TokenSequence> {
        self.backbone.run(tape, bound, images)
    }

    /// Class logits `[B, 2]` without recording gradients.
    pub fn logits(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * 2);
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind_frozen(&mut tape);
            let seq = self.run(&mut tape, &bound, chunk)?;
            let z = self.heads.cls_head(&mut tape, &bound, seq.cls)?;
            if !tape.value(z).all_finite() {
                return Err(Error::Numerical("non-finite logits".into()));
            }
            data.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(vec![images.len(), 2], data)
    }

    /// Predicted class per image; ties go to class 0.
    pub fn classify(&self, images: &[&RgbImage]) -> Result<Vec<u8>> {
        let z = self.logits(images)?;
        Ok((0..images.len()).map(|i| (z.at2(i, 1) > z.at2(i, 0)) as u8).collect())
    }

    /// Soft-label regression output `[B, K+1]` without recording gradients.
    pub fn soft_labels(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let seq = self.run(&mut tape, &bound, images)?;
        let r = self.heads.reg_head(&mut tape, &bound, seq.patch_tokens, images.len())?;
        Ok(tape.value(r).clone())
    }
}
