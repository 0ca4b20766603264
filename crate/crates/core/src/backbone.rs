//! Vision transformer backbone: patch embedding, learned positions, a prepended
//! class token and pre-norm transformer blocks.
//!
//! All images of a batch travel together as one `[B·(n+1), D]` token matrix so
//! the linear layers run as single large products; attention is evaluated per
//! image and per head.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Fixed input standardization applied when patches are flattened.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig { image_size: 64, patch_size: 8, embed_dim: 64, depth: 2, heads: 4, mlp_ratio: 4, seed: 0 }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dimension {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Tokens per image including the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Index of a tensor inside [`Params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves created elsewhere, in [`Params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Params {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Gradients of all parameters after `tape.backward`.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().zip(&self.tensors).map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()
    }

    /// Writes a one-line JSON header `{"config":…,"params":[{name,shape,offset}…]}`
    /// followed by every tensor as little-endian `f64`. Offsets are in bytes from
    /// the start of the data section.
    pub fn save(&self, path: &Path, config: &serde_json::Value) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            shape: &'a [usize],
            offset: usize,
        }
        let mut offset = 0;
        let entries: Vec<Entry> = self
            .iter()
            .map(|(name, t)| {
                let e = Entry { name, shape: t.shape(), offset };
                offset += t.numel() * 8;
                e
            })
            .collect();
        let header = serde_json::json!({ "format": "sivit-params-v1", "config": config, "params": entries });
        let mut out = serde_json::to_vec(&header).expect("serializable header");
        out.push(b'\n');
        for t in &self.tensors {
            for v in t.data() {
                out.write_all(&v.to_le_bytes()).expect("in-memory write");
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`Params::save`], returning its config value.
    pub fn load(path: &Path) -> Result<(Params, serde_json::Value)> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
        }
        #[derive(Deserialize)]
        struct Header {
            config: serde_json::Value,
            params: Vec<Entry>,
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(path, "missing header line"))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let body = &bytes[nl + 1..];
        let mut params = Params::default();
        let mut expected_len = 0;
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            let raw = body
                .get(e.offset..end)
                .ok_or_else(|| Error::format(path, format!("tensor {} extends past end of file", e.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push(e.name, Tensor::new(e.shape, data)?);
            expected_len = expected_len.max(end);
        }
        if expected_len != body.len() {
            return Err(Error::format(path, format!("{} trailing bytes", body.len() - expected_len)));
        }
        Ok((params, header.config))
    }
}

/// Normal(0, σ) truncated to ±2σ.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Output of the backbone for a batch of `B` images.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// Class tokens, `[B, D]`.
    pub cls: Var,
    /// Patch tokens, `[B·n, D]`, image-major.
    pub patch_tokens: Var,
    /// Full token matrix entering the last block (the embedding when depth is 0).
    pub last_block_input: Var,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub cfg: ViTConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl Backbone {
    /// Registers freshly initialized parameters.
    pub fn init(cfg: &ViTConfig, params: &mut Params, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let patch_w = params.push("patch_embed.weight", trunc_normal(&[cfg.patch_dim(), d], INIT_STD, rng));
        let patch_b = params.push("patch_embed.bias", Tensor::zeros(&[d]));
        let cls = params.push("cls_token", Tensor::zeros(&[1, d]));
        let pos = params.push("pos_embed", trunc_normal(&[cfg.seq_len(), d], INIT_STD, rng));
        let blocks = (0..cfg.depth)
            .map(|t| {
                let name = |s: &str| format!("blocks.{t}.{s}");
                BlockParams {
                    ln1_g: params.push(name("norm1.weight"), Tensor::ones(&[d])),
                    ln1_b: params.push(name("norm1.bias"), Tensor::zeros(&[d])),
                    qkv_w: params.push(name("attn.qkv.weight"), trunc_normal(&[d, 3 * d], INIT_STD, rng)),
                    qkv_b: params.push(name("attn.qkv.bias"), Tensor::zeros(&[3 * d])),
                    proj_w: params.push(name("attn.proj.weight"), trunc_normal(&[d, d], INIT_STD, rng)),
                    proj_b: params.push(name("attn.proj.bias"), Tensor::zeros(&[d])),
                    ln2_g: params.push(name("norm2.weight"), Tensor::ones(&[d])),
                    ln2_b: params.push(name("norm2.bias"), Tensor::zeros(&[d])),
                    fc1_w: params.push(name("mlp.fc1.weight"), trunc_normal(&[d, hidden], INIT_STD, rng)),
                    fc1_b: params.push(name("mlp.fc1.bias"), Tensor::zeros(&[hidden])),
                    fc2_w: params.push(name("mlp.fc2.weight"), trunc_normal(&[hidden, d], INIT_STD, rng)),
                    fc2_b: params.push(name("mlp.fc2.bias"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        Ok(Backbone { cfg: cfg.clone(), patch_w, patch_b, cls, pos, blocks })
    }

    /// Re-derives parameter ids from names in a loaded [`Params`].
    pub fn locate(cfg: &ViTConfig, params: &Params) -> Result<Self> {
        cfg.validate()?;
        let id = |name: String| params.find(&name).ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")));
        let blocks = (0..cfg.depth)
            .map(|t| {
                let name = |s: &str| format!("blocks.{t}.{s}");
                Ok(BlockParams {
                    ln1_g: id(name("norm1.weight"))?,
                    ln1_b: id(name("norm1.bias"))?,
                    qkv_w: id(name("attn.qkv.weight"))?,
                    qkv_b: id(name("attn.qkv.bias"))?,
                    proj_w: id(name("attn.proj.weight"))?,
                    proj_b: id(name("attn.proj.bias"))?,
                    ln2_g: id(name("norm2.weight"))?,
                    ln2_b: id(name("norm2.bias"))?,
                    fc1_w: id(name("mlp.fc1.weight"))?,
                    fc1_b: id(name("mlp.fc1.bias"))?,
                    fc2_w: id(name("mlp.fc2.weight"))?,
                    fc2_b: id(name("mlp.fc2.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Backbone {
            cfg: cfg.clone(),
            patch_w: id("patch_embed.weight".into())?,
            patch_b: id("patch_embed.bias".into())?,
            cls: id("cls_token".into())?,
            pos: id("pos_embed".into())?,
            blocks,
        })
    }

    /// Flattens every patch of every image into rows of `p·p·3` values
    /// (row-major within the patch, channels innermost).
    pub fn patch_matrix(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let (s, p) = (self.cfg.image_size, self.cfg.patch_size);
        let side = self.cfg.grid_side();
        let mut data = Vec::with_capacity(images.len() * self.cfg.n_patches() * self.cfg.patch_dim());
        for img in images {
            if img.height != s || img.width != s {
                return Err(Error::Shape(format!(
                    "image is {}x{} but the model expects {s}x{s}",
                    img.width, img.height
                )));
            }
            for gy in 0..side {
                for gx in 0..side {
                    for y in 0..p {
                        let start = ((gy * p + y) * s + gx * p) * 3;
                        data.extend(img.data[start..start + p * 3].iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
                    }
                }
            }
        }
        Tensor::new(vec![images.len() * self.cfg.n_patches(), self.cfg.patch_dim()], data)
    }

    /// Token matrix `[B·(n+1), D]`: class token then projected patches, each
    /// image's rows offset by the positional embedding.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, images: &[&RgbImage]) -> Result<Var> {
        let x = tape.constant(self.patch_matrix(images)?);
        self.embed_patches(tape, bound, x, images.len())
    }

    /// As [`Backbone::embed`], from a prepared `[B·n, p·p·3]` patch matrix.
    pub fn embed_patches(&self, tape: &mut Tape, bound: &Bound, patches: Var, batch: usize) -> Result<Var> {
        let n = self.cfg.n_patches();
        let seq = n + 1;
        if tape.shape(patches) != [batch * n, self.cfg.patch_dim()] {
            return Err(Error::Shape(format!(
                "patch matrix {:?} does not match {batch} images of {n} patches x {}",
                tape.shape(patches),
                self.cfg.patch_dim()
            )));
        }
        let proj = tape.matmul(patches, bound.var(self.patch_w))?;
        let proj = tape.add_bias(proj, bound.var(self.patch_b))?;
        let with_cls = tape.concat_rows(&[bound.var(self.cls), proj])?;
        let order: Vec<usize> =
            (0..batch).flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i))).collect();
        let tokens = tape.gather_rows(with_cls, &order)?;
        let pos_order: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.gather_rows(bound.var(self.pos), &pos_order)?;
        tape.add(tokens, pos)
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, blk: &BlockParams, x: Var, batch: usize) -> Result<Var> {
        let qkv = tape.matmul(x, bound.var(blk.qkv_w))?;
        let qkv = tape.add_bias(qkv, bound.var(blk.qkv_b))?;
        let merged = tape.attention(qkv, batch, self.cfg.heads)?;
        let out = tape.matmul(merged, bound.var(blk.proj_w))?;
        tape.add_bias(out, bound.var(blk.proj_b))
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, blk: &BlockParams, x: Var, batch: usize) -> Result<Var> {
        let a = tape.layer_norm(x, bound.var(blk.ln1_g), bound.var(blk.ln1_b), LN_EPS)?;
        let a = self.attention(tape, bound, blk, a, batch)?;
        let x = tape.add(x, a)?;
        let m = tape.layer_norm(x, bound.var(blk.ln2_g), bound.var(blk.ln2_b), LN_EPS)?;
        let m = tape.matmul(m, bound.var(blk.fc1_w))?;
        let m = tape.add_bias(m, bound.var(blk.fc1_b))?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, bound.var(blk.fc2_w))?;
        let m = tape.add_bias(m, bound.var(blk.fc2_b))?;
        tape.add(x, m)
    }

    /// Runs the transformer blocks over an embedded `[B·(n+1), D]` token matrix.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: Var, batch: usize) -> Result<TokenSequence> {
        self.forward_from(tape, bound, tokens, batch, 0)
    }

    /// Like [`Backbone::forward`] but skips the blocks before `first_block`.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: Var,
        batch: usize,
        first_block: usize,
    ) -> Result<TokenSequence> {
        let seq = self.cfg.seq_len();
        let d = self.cfg.embed_dim;
        if tape.shape(tokens) != [batch * seq, d] {
            return Err(Error::Shape(format!(
                "token matrix {:?} does not match {batch} x ({seq} tokens, {d} dims)",
                tape.shape(tokens)
            )));
        }
        let mut x = tokens;
        let mut last_block_input = tokens;
        for (t, blk) in self.blocks.iter().enumerate().skip(first_block) {
            last_block_input = x;
            x = self.block(tape, bound, blk, x, batch)?;
            if !tape.value(x).all_finite() {
                return Err(Error::Numerical(format!("non-finite activations after block {t}")));
            }
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let patch_rows: Vec<usize> = (0..batch).flat_map(|b| (1..seq).map(move |i| b * seq + i)).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let patch_tokens = tape.gather_rows(x, &patch_rows)?;
        Ok(TokenSequence { cls, patch_tokens, last_block_input, batch })
    }

    /// Embedding followed by [`Backbone::forward`].
    pub fn run(&self, tape: &mut Tape, bound: &Bound, images: &[&RgbImage]) -> Result<TokenSequence> {
        let tokens = self.embed(tape, bound, images)?;
        self.forward(tape, bound, tokens, images.len())
    }
}
