//! Finite-difference checks for every differentiable op and the full model loss.

use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::backbone::{trunc_normal, Bound, ViTConfig};
use crate::bagging::{patchify, shuffle_distribute, unshuffle_distribute, ShuffleScope};
use crate::datasynth::ImageSample;
use crate::error::Result;
use crate::heads::{composite_loss, one_hot, HeadConfig, HeadWeights, LossTargets, Predictions, RegHeadMode};
use crate::image::{Mask, RgbImage};
use crate::model::{ModelConfig, SiVit};
use crate::rng::{rng_for, Rng};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type CaseFn = fn(u64) -> Result<f64>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub run: CaseFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
    pub error: Option<String>,
    pub elapsed: Duration,
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks `op` by reducing its output with a fixed random weighting.
fn check_op(seed: u64, shapes: &[&[usize]], op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut rng = rng_for(seed, 0x6c);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let probe = op(&mut tape, &vars)?;
    let out_shape = tape.value(probe).shape().to_vec();
    let weight = rand_tensor(&out_shape, &mut rng);
    let report = grad_check_many(
        |tape, vars| {
            let y = op(tape, vars)?;
            let w = tape.constant(weight.clone());
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        },
        &inputs,
        STEP,
    )?;
    Ok(report.max_rel_err)
}

fn soft_targets(rows: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::from_fn(&[rows, 2], |_| rng.random_range(0.05..1.0));
    for r in t.data_mut().chunks_mut(2) {
        let s = r[0] + r[1];
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn tiny_model_config(mode: RegHeadMode) -> ModelConfig {
    ModelConfig {
        vit: ViTConfig { image_size: 16, patch_size: 4, embed_dim: 8, depth: 2, heads: 2, mlp_ratio: 2, seed: 0 },
        heads: HeadConfig { num_categories: 2, reg_mode: mode, normalized_labels: true },
    }
}

fn tiny_samples(n: usize, rng: &mut Rng) -> Vec<ImageSample> {
    (0..n)
        .map(|i| {
            let mut image = RgbImage::new(16, 16);
            image.data.iter_mut().for_each(|v| *v = rng.random());
            let mut mask = Mask::new(16, 16);
            // blocky masks so patches carry a mix of categories
            for y in 0..16 {
                for x in 0..16 {
                    if (x / 3 + y / 5 + i) % 3 != 0 {
                        mask.set(y, x, ((x + y + i) % 2 + 1) as u8);
                    }
                }
            }
            ImageSample {
                class_label: ImageSample::label_from_mask(&mask, 2),
                image,
                mask,
                sample_id: format!("g{i}"),
                seed: 0,
                num_categories: 2,
            }
        })
        .collect()
}

/// Full two-pass loss of a tiny model, checked against every parameter.
pub fn check_full_model(seed: u64, mode: RegHeadMode) -> Result<f64> {
    let mut rng = rng_for(seed, 0x5f);
    let mut model = SiVit::new(tiny_model_config(mode))?;
    // larger weights than the training init so every path carries signal
    for t in model.params.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = trunc_normal(&shape, 0.3, &mut rng);
    }
    let samples = tiny_samples(3, &mut rng);
    let grids: Vec<_> = samples.iter().map(|s| patchify(s, 4)).collect::<Result<_>>()?;
    let (sf_bags, _) = shuffle_distribute(&grids, &mut rng, ShuffleScope::Batch, true)?;
    let usf_bags = unshuffle_distribute(&grids, true)?;
    let label_rows = |bags: &[crate::bagging::Bag]| {
        Tensor::from_rows(&bags.iter().map(|b| b.soft_label.to_vec()).collect::<Vec<_>>())
    };
    let targets = LossTargets {
        sf: Some(label_rows(&sf_bags)?),
        usf: Some(label_rows(&usf_bags)?),
        class: one_hot(&samples.iter().map(|s| s.class_label).collect::<Vec<_>>()),
    };
    let weights = HeadWeights::new(1.0, 0.7, 1.3)?;
    let sf_images: Vec<&RgbImage> = sf_bags.iter().map(|b| &b.image).collect();
    let usf_images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let bound = Bound::from_vars(vars.to_vec());
        let sf = model.run(tape, &bound, &sf_images)?;
        let usf = model.run(tape, &bound, &usf_images)?;
        let pred_sf = Predictions {
            soft_label_hat: Some(model.heads.reg_head(tape, &bound, sf.patch_tokens, sf_images.len())?),
            class_logits: None,
        };
        let pred_usf = Predictions {
            soft_label_hat: Some(model.heads.reg_head(tape, &bound, usf.patch_tokens, usf_images.len())?),
            class_logits: Some(model.heads.cls_head(tape, &bound, usf.cls)?),
        };
        Ok(composite_loss(tape, &pred_sf, &pred_usf, &targets, &weights)?.0)
    };
    Ok(grad_check_many(f, model.params.tensors(), STEP)?.max_rel_err)
}

fn case_matmul(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]))
}
fn case_add(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]))
}
fn case_sub(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1]))
}
fn case_mul(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]))
}
fn case_scale(s: u64) -> Result<f64> {
    check_op(s, &[&[2, 5]], |t, v| Ok(t.scale(v[0], -1.7)))
}
fn case_add_bias(s: u64) -> Result<f64> {
    check_op(s, &[&[4, 3], &[3]], |t, v| t.add_bias(v[0], v[1]))
}
fn case_gelu(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 6]], |t, v| {
        let x = t.scale(v[0], 3.0);
        Ok(t.gelu(x))
    })
}
fn case_map(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 3]], |t, v| Ok(t.map(v[0], f64::exp, f64::exp)))
}
fn case_softmax_rows(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 5]], |t, v| {
        let x = t.scale(v[0], 2.0);
        t.softmax(x, 1)
    })
}
fn case_softmax_middle(s: u64) -> Result<f64> {
    check_op(s, &[&[2, 3, 4]], |t, v| t.softmax(v[0], 1))
}
fn case_layer_norm(s: u64) -> Result<f64> {
    check_op(s, &[&[4, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
}
fn case_sum(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4]], |t, v| Ok(t.sum(v[0])))
}
fn case_mean(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4]], |t, v| Ok(t.mean(v[0])))
}
fn case_reshape(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6]))
}
fn case_transpose(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 4]], |t, v| t.transpose(v[0]))
}
fn case_gather_rows(s: u64) -> Result<f64> {
    check_op(s, &[&[4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))
}
fn case_scatter_rows(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 2]], |t, v| t.scatter_rows(v[0], &[4, 0, 2], 5))
}
fn case_slice_rows(s: u64) -> Result<f64> {
    check_op(s, &[&[5, 3]], |t, v| t.slice_rows(v[0], 1, 3))
}
fn case_slice_cols(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 6]], |t, v| t.slice_cols(v[0], 2, 3))
}
fn case_concat_cols(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]]))
}
fn case_concat_rows(s: u64) -> Result<f64> {
    check_op(s, &[&[2, 3], &[1, 3]], |t, v| t.concat_rows(&[v[0], v[1]]))
}
fn case_attention(s: u64) -> Result<f64> {
    check_op(s, &[&[2 * 5, 3 * 6]], |t, v| {
        let x = t.scale(v[0], 2.0);
        t.attention(x, 2, 2)
    })
}
fn case_cross_entropy(s: u64) -> Result<f64> {
    let targets = soft_targets(4, &mut rng_for(s, 0xce));
    check_op(s, &[&[4, 2]], move |t, v| {
        let x = t.scale(v[0], 3.0);
        t.cross_entropy(x, &targets)
    })
}
fn case_mse(s: u64) -> Result<f64> {
    check_op(s, &[&[3, 3], &[3, 3]], |t, v| t.mse(v[0], v[1]))
}
fn case_model_per_token(s: u64) -> Result<f64> {
    check_full_model(s, RegHeadMode::PerToken)
}
fn case_model_pool_then_mlp(s: u64) -> Result<f64> {
    check_full_model(s, RegHeadMode::PoolThenMlp)
}

/// Every checked op plus the full model; never empty.
pub fn registry() -> Vec<GradCase> {
    let c = |name, run| GradCase { name, run };
    vec![
        c("matmul", case_matmul as CaseFn),
        c("add", case_add),
        c("sub", case_sub),
        c("mul", case_mul),
        c("scale", case_scale),
        c("add_bias", case_add_bias),
        c("gelu", case_gelu),
        c("map", case_map),
        c("softmax_rows", case_softmax_rows),
        c("softmax_middle_axis", case_softmax_middle),
        c("layer_norm", case_layer_norm),
        c("sum", case_sum),
        c("mean", case_mean),
        c("reshape", case_reshape),
        c("transpose", case_transpose),
        c("gather_rows", case_gather_rows),
        c("scatter_rows", case_scatter_rows),
        c("slice_rows", case_slice_rows),
        c("slice_cols", case_slice_cols),
        c("concat_cols", case_concat_cols),
        c("concat_rows", case_concat_rows),
        c("attention", case_attention),
        c("cross_entropy", case_cross_entropy),
        c("mse", case_mse),
        c("model_per_token", case_model_per_token),
        c("model_pool_then_mlp", case_model_pool_then_mlp),
    ]
}

fn broken_square(s: u64) -> Result<f64> {
    // derivative of x² given as x
    check_op(s, &[&[2, 3]], |t, v| Ok(t.map(v[0], |x| x * x, |x| x)))
}

/// A case with a deliberately wrong backward, for testing the harness.
pub fn sabotaged_case() -> GradCase {
    GradCase { name: "sabotaged_square", run: broken_square }
}

/// Runs every case over every seed; a case's error is its worst over seeds.
pub fn run_suite(cases: &[GradCase], seeds: &[u64], tol: f64) -> Vec<CaseResult> {
    cases
        .iter()
        .map(|case| {
            let start = Instant::now();
            let mut worst = 0.0f64;
            let mut error = None;
            for &seed in seeds {
                match (case.run)(seed) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        error = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            CaseResult {
                name: case.name,
                max_rel_err: worst,
                passed: error.is_none() && worst < tol,
                error,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}
