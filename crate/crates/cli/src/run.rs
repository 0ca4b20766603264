//! One training run: resolve the config, write the manifest, train, save.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sivit::evalviz::{evaluate, metrics, metrics_csv, Metrics};
use sivit::train::{write_logs, AugmentConfig, TrainConfig, TrainOutcome, Trainer};

use crate::args::TrainOpts;
use crate::data::Splits;
use crate::error::{io_error, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub data: PathBuf,
    pub split_sizes: BTreeMap<String, usize>,
    pub config: TrainConfig,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: bad manifest: {e}", path.display())))
    }
}

/// Materializes every default, with image size and `K` taken from the data.
pub fn resolve(opts: &TrainOpts, seed: u64, splits: &Splits) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    let vit = &mut cfg.model.vit;
    vit.image_size = splits.image_size()?;
    vit.seed = seed;
    if let Some(v) = opts.patch_size {
        vit.patch_size = v;
    }
    if let Some(v) = opts.embed_dim {
        vit.embed_dim = v;
    }
    if let Some(v) = opts.depth {
        vit.depth = v;
    }
    if let Some(v) = opts.num_heads {
        vit.heads = v;
    }
    if let Some(v) = opts.mlp_ratio {
        vit.mlp_ratio = v;
    }
    let heads = &mut cfg.model.heads;
    heads.num_categories = splits.num_categories()? as usize;
    if let Some(v) = opts.reg_mode {
        heads.reg_mode = v;
    }
    heads.normalized_labels = !opts.raw_labels;

    if let Some(v) = opts.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = opts.head_weights {
        cfg.head_weights = v;
    }
    if let Some(v) = opts.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = opts.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = opts.lr {
        cfg.lr = v;
    }
    if let Some(v) = opts.weight_decay {
        cfg.adam.weight_decay = v;
    }
    let crop = opts.crop_frac.unwrap_or(cfg.augment.crop_frac);
    cfg.augment = if opts.no_augment { AugmentConfig::eval_only(crop) } else { AugmentConfig { crop_frac: crop, ..cfg.augment } };
    if let Some(v) = opts.update_mode {
        cfg.update_mode = v;
    }
    if let Some(v) = opts.shuffle_scope {
        cfg.shuffle_scope = v;
    }
    if let Some(v) = opts.cutout_frac {
        cfg.cutout_frac = v;
    }
    if let Some(v) = opts.mix_alpha {
        cfg.mix_alpha = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct RunResult {
    pub outcome: TrainOutcome,
    /// `(split, metrics)` for validation and, when present, test.
    pub eval: Vec<(String, Metrics)>,
    pub manifest: RunManifest,
}

impl RunResult {
    /// Test metrics when a test split exists, otherwise validation.
    pub fn held_out(&self) -> &Metrics {
        let row = self.eval.iter().find(|(s, _)| s == "test").unwrap_or(&self.eval[0]);
        &row.1
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, body).map_err(|e| io_error(path, e))
}

pub fn train_run(cfg: TrainConfig, data: &Path, splits: &Splits, out: &Path) -> CliResult<RunResult> {
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let artifacts: BTreeMap<String, PathBuf> = [
        ("checkpoint", CHECKPOINT_FILE),
        ("metrics", METRICS_FILE),
        ("steps", STEPS_FILE),
        ("eval", EVAL_FILE),
        ("manifest", MANIFEST_FILE),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), out.join(f)))
    .collect();
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        data: data.to_path_buf(),
        split_sizes: [("train", splits.train.len()), ("val", splits.val.len()), ("test", splits.test.len())]
            .into_iter()
            .map(|(k, n)| (k.to_string(), n))
            .collect(),
        config: cfg.clone(),
        artifacts,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    write_file(&out.join(MANIFEST_FILE), manifest_json + "\n")?;

    let crop = cfg.augment.crop_frac;
    let total = cfg.epochs;
    let label = format!("{} seed {}", cfg.strategy, cfg.seed);
    let mut trainer = Trainer::new(cfg, &splits.train, &splits.val)?;
    while trainer.epochs_done() < total {
        let r = trainer.run_epoch()?;
        log::info!(
            "[{label}] epoch {}/{total} loss {:.4} (cls {:.4} usf {:.4} sf {:.4}) val_acc {:.4}",
            r.epoch + 1,
            r.train_loss,
            r.l_cls,
            r.l_reg_usf,
            r.l_reg_sf,
            r.val_acc
        );
    }
    let outcome = trainer.finish()?;
    outcome.model.save(&out.join(CHECKPOINT_FILE))?;
    write_logs(&outcome, out)?;

    let mut eval = vec![("val".to_string(), metrics(&evaluate(&outcome.model, &splits.val, crop)?))];
    if !splits.test.is_empty() {
        eval.push(("test".to_string(), metrics(&evaluate(&outcome.model, &splits.test, crop)?)));
    }
    write_file(&out.join(EVAL_FILE), metrics_csv(&eval))?;
    log::info!("[{label}] best epoch {} val_acc {:.4}", outcome.best_epoch + 1, outcome.best_val_acc);
    Ok(RunResult { outcome, eval, manifest })
}
