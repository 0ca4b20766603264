use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sivit::bagging::{patch_size_warning, patchify, shuffle_distribute};
use sivit::datasynth::{generate_dataset, write_dataset, GenConfig, ImageSample};
use sivit::evalviz::{attribution, evaluate, metrics, metrics_csv, write_map, Metrics};
use sivit::gradsuite::{registry, run_suite};
use sivit::image::write_ppm;
use sivit::model::SiVit;
use sivit::rng::rng_for;
use sivit::train::augment::{eval_view, DEFAULT_CROP_FRAC};

use crate::args::*;
use crate::data::{carve_splits, load_splits, write_splits, Splits};
use crate::error::{io_error, CliError, CliResult};
use crate::run::{resolve, train_run, RunManifest, RunResult};

/// RNG stream for the shuffled attribution batches.
const VISUALIZE_STREAM: u64 = 5;

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, body).map_err(|e| io_error(path, e))
}

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let cfg = GenConfig {
        image_size: a.image_size,
        k: a.k,
        patch_size: a.patch_size,
        perturb: !a.clean,
        seed: a.seed,
        ..GenConfig::default()
    };
    let samples = generate_dataset(&cfg, a.pos, a.neg)?;
    if a.val == 0 && a.test == 0 {
        write_dataset(&samples, &a.out)?;
    } else {
        let splits = carve_splits(samples, a.val, a.test)?;
        if splits.val.is_empty() {
            return Err(CliError::Usage("--test without --val: training needs a validation split".into()));
        }
        write_splits(&splits, &a.out)?;
    }
    let meta = serde_json::json!({ "generator": cfg, "pos": a.pos, "neg": a.neg, "val": a.val, "test": a.test });
    write_file(&a.out.join("dataset.json"), serde_json::to_string_pretty(&meta).expect("serializable") + "\n")?;
    println!("wrote {} positive and {} negative samples to {}", a.pos, a.neg, a.out.display());
    Ok(())
}

fn report(run: &RunResult) {
    for (split, m) in &run.eval {
        println!(
            "{split}: accuracy {:.4} precision {:.4} recall {:.4} specificity {:.4} f1 {:.4}",
            m.accuracy, m.precision, m.recall, m.specificity, m.f1
        );
    }
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let splits = load_splits(&a.train.data)?;
    let cfg = resolve(&a.train, a.seed, &splits)?;
    if let Some(w) = patch_size_warning(cfg.model.vit.patch_size) {
        log::warn!("{w}");
    }
    let run = train_run(cfg, &a.train.data, &splits, &a.out)?;
    report(&run);
    Ok(())
}

pub fn replay(a: &ReplayArgs) -> CliResult<()> {
    let m = RunManifest::load(&a.manifest)?;
    let splits = load_splits(&m.data)?;
    let run = train_run(m.config, &m.data, &splits, &a.out)?;
    report(&run);
    Ok(())
}

fn pick_split<'a>(splits: &'a Splits, name: Option<&str>) -> CliResult<(String, &'a [ImageSample])> {
    match name {
        Some(n) => Ok((n.to_string(), splits.get(n)?)),
        None => {
            let (n, s) = splits.held_out();
            Ok((n.to_string(), s))
        }
    }
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<()> {
    let model = SiVit::load(&a.checkpoint)?;
    let splits = load_splits(&a.data)?;
    let (name, samples) = pick_split(&splits, a.split.as_deref())?;
    let counts = evaluate(&model, samples, a.crop_frac.unwrap_or(DEFAULT_CROP_FRAC))?;
    let m = metrics(&counts);
    println!(
        "{name}: n {} tp {} fp {} tn {} fn {} accuracy {:.4} precision {:.4} recall {:.4} specificity {:.4} f1 {:.4}",
        counts.total(),
        counts.tp,
        counts.fp,
        counts.tn,
        counts.fn_,
        m.accuracy,
        m.precision,
        m.recall,
        m.specificity,
        m.f1
    );
    for d in &m.degenerate {
        log::warn!("{d} is undefined on this split and reported as 0");
    }
    if let Some(out) = &a.out {
        write_file(out, metrics_csv(&[(name, m)]))?;
    }
    Ok(())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Metric-wise median over runs.
pub fn median_metrics(runs: &[Metrics]) -> Metrics {
    let m = |f: fn(&Metrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Metrics {
        accuracy: m(|x| x.accuracy),
        precision: m(|x| x.precision),
        recall: m(|x| x.recall),
        specificity: m(|x| x.specificity),
        f1: m(|x| x.f1),
        degenerate: Vec::new(),
    }
}

const METRIC_COLUMNS: [&str; 5] = ["accuracy", "precision", "recall", "specificity", "f1"];

fn metric_values(m: &Metrics) -> [f64; 5] {
    [m.accuracy, m.precision, m.recall, m.specificity, m.f1]
}

/// Rows of `(label, runs, Ok(median) | Err(message))`.
type TableRow = (String, usize, Result<Metrics, String>);

fn table_csv(key: &str, rows: &[TableRow]) -> String {
    let mut out = format!("{key},runs,status,{}\n", METRIC_COLUMNS.join(","));
    for (label, runs, res) in rows {
        match res {
            Ok(m) => {
                let vals: Vec<String> = metric_values(m).iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{label},{runs},ok,{}", vals.join(","));
            }
            Err(e) => {
                let _ = writeln!(out, "{label},{runs},\"error: {}\",,,,,", e.replace('"', "'"));
            }
        }
    }
    out
}

fn table_text(key: &str, rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.0.len()).chain([key.len()]).max().unwrap_or(0);
    let mut out = format!("{key:<width$}  runs");
    for c in METRIC_COLUMNS {
        let _ = write!(out, "  {c:>11}");
    }
    out.push('\n');
    for (label, runs, res) in rows {
        let _ = write!(out, "{label:<width$}  {runs:>4}");
        match res {
            Ok(m) => {
                for v in metric_values(m) {
                    let _ = write!(out, "  {:>11.4}", v);
                }
            }
            Err(e) => {
                let _ = write!(out, "  error: {e}");
            }
        }
        out.push('\n');
    }
    out
}

fn write_tables(dir: &Path, stem: &str, key: &str, rows: &[TableRow]) -> CliResult<()> {
    let text = table_text(key, rows);
    write_file(&dir.join(format!("{stem}.csv")), table_csv(key, rows))?;
    write_file(&dir.join(format!("{stem}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

const RUNS_HEADER: &str = "label,seed,split,accuracy,precision,recall,specificity,f1";

fn runs_row(out: &mut String, label: &str, seed: u64, run: &RunResult) {
    let (split, m) = run.eval.iter().find(|(s, _)| s == "test").unwrap_or(&run.eval[0]);
    let vals: Vec<String> = metric_values(m).iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "{label},{seed},{split},{}", vals.join(","));
}

pub fn compare(a: &CompareArgs) -> CliResult<()> {
    let splits = load_splits(&a.train.data)?;
    let mut rows = Vec::new();
    let mut runs_csv = format!("{RUNS_HEADER}\n");
    for &strategy in &a.strategies.0 {
        let opts = TrainOpts { strategy: Some(strategy), ..a.train.clone() };
        let mut held = Vec::new();
        for &seed in &a.seeds.0 {
            let cfg = resolve(&opts, seed, &splits)?;
            let run = train_run(cfg, &a.train.data, &splits, &a.out.join(strategy.name()).join(format!("seed-{seed}")))?;
            runs_row(&mut runs_csv, strategy.name(), seed, &run);
            held.push(run.held_out().clone());
        }
        rows.push((strategy.name().to_string(), held.len(), Ok(median_metrics(&held))));
    }
    write_file(&a.out.join("runs.csv"), runs_csv)?;
    write_tables(&a.out, "comparison", "strategy", &rows)
}

pub fn sweep_patch(a: &SweepArgs) -> CliResult<()> {
    let splits = load_splits(&a.train.data)?;
    let mut rows = Vec::new();
    let mut runs_csv = format!("{RUNS_HEADER}\n");
    for &p in &a.sizes.0 {
        let opts = TrainOpts { patch_size: Some(p), ..a.train.clone() };
        let mut held = Vec::new();
        let mut failure = None;
        for &seed in &a.seeds.0 {
            let result = resolve(&opts, seed, &splits).and_then(|cfg| {
                if let Some(w) = patch_size_warning(p) {
                    log::warn!("{w}");
                }
                train_run(cfg, &a.train.data, &splits, &a.out.join(format!("patch-{p}")).join(format!("seed-{seed}")))
            });
            match result {
                Ok(run) => {
                    runs_row(&mut runs_csv, &p.to_string(), seed, &run);
                    held.push(run.held_out().clone());
                }
                // I/O errors abort; anything else becomes an error row
                Err(e @ CliError::Io(_)) => return Err(e),
                Err(e) => {
                    log::error!("patch size {p}: {e}");
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let res = match failure {
            Some(e) => Err(e),
            None => Ok(median_metrics(&held)),
        };
        rows.push((p.to_string(), held.len(), res));
    }
    write_file(&a.out.join("runs.csv"), runs_csv)?;
    write_tables(&a.out, "sweep", "patch_size", &rows)
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cases: Vec<_> = registry()
        .into_iter()
        .filter(|c| a.filter.as_deref().is_none_or(|f| c.name.contains(f)))
        .collect();
    if cases.is_empty() {
        return Err(CliError::Usage(format!("no gradient case matches {:?}", a.filter.as_deref().unwrap_or(""))));
    }
    let results = run_suite(&cases, &a.seeds.0, a.tol);
    let mut csv = String::from("case,max_rel_err,status\n");
    let mut worst: f64 = 0.0;
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        let secs = r.elapsed.as_secs_f64();
        match &r.error {
            Some(e) => println!("{:<24} {status}  error: {e}", r.name),
            None => println!("{:<24} {status}  max_rel_err {:.3e}  ({secs:.2}s)", r.name, r.max_rel_err),
        }
        let _ = writeln!(csv, "{},{},{status}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} cases, {failed} failed, max relative error {worst:.3e} (tolerance {:e})", results.len(), a.tol);
    if let Some(out) = &a.out {
        write_file(out, csv)?;
    }
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient case(s) exceeded tolerance {:e}", a.tol)));
    }
    Ok(())
}

fn parse_target(s: &str) -> CliResult<Option<usize>> {
    match s {
        "predicted" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        _ => Err(CliError::Usage(format!("--target must be 0, 1 or predicted, got '{s}'"))),
    }
}

pub fn visualize(a: &VisualizeArgs) -> CliResult<()> {
    let target = parse_target(&a.target)?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let model = SiVit::load(&a.checkpoint)?;
    let splits = load_splits(&a.data)?;
    let (_, samples) = pick_split(&splits, a.split.as_deref())?;
    let crop = a.crop_frac.unwrap_or(DEFAULT_CROP_FRAC);
    let limit = a.limit.unwrap_or(samples.len()).min(samples.len());
    let views: Vec<ImageSample> = samples[..limit].iter().map(|s| eval_view(s, crop)).collect();
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;

    let mut csv = String::from("id,label,predicted,target,mean_cancer,mean_other\n");
    if a.shuffled {
        let p = model.cfg.vit.patch_size;
        let scope = sivit::bagging::ShuffleScope::Batch;
        let mut rng = rng_for(a.seed, VISUALIZE_STREAM);
        let mut index = 0;
        for chunk in views.chunks(a.batch_size) {
            let grids = chunk.iter().map(|s| patchify(s, p)).collect::<Result<Vec<_>, _>>()?;
            let (bags, _) = shuffle_distribute(&grids, &mut rng, scope, model.cfg.heads.normalized_labels)?;
            for bag in bags {
                let id = format!("bag-{index:04}");
                index += 1;
                let cancer = chunk[0].cancer_category();
                let label = bag.mask.data.contains(&cancer) as u8;
                row(&model, &a.out, &mut csv, &id, &bag.image, &bag.mask, cancer, label, target)?;
                write_ppm(&bag.image, &a.out.join(format!("{id}.ppm")))?;
            }
        }
    } else {
        for s in &views {
            row(&model, &a.out, &mut csv, &s.sample_id, &s.image, &s.mask, s.cancer_category(), s.class_label, target)?;
        }
    }
    write_file(&a.out.join("attribution.csv"), csv)?;
    println!("wrote {} attribution maps to {}", views.len(), a.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn row(
    model: &SiVit,
    dir: &Path,
    csv: &mut String,
    id: &str,
    image: &sivit::image::RgbImage,
    mask: &sivit::image::Mask,
    cancer: u8,
    label: u8,
    target: Option<usize>,
) -> CliResult<()> {
    let predicted = model.classify(&[image])?[0];
    let class = target.unwrap_or(predicted as usize);
    let map = attribution(model, image, class)?;
    write_map(&map, &dir.join(format!("{id}.cam.pgm")))?;
    let (inside, outside) = map.inside_outside(mask, cancer);
    let _ = writeln!(csv, "{id},{label},{predicted},{class},{inside},{outside}");
    Ok(())
}
