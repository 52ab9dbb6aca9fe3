use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lesion_core::data::{
    self, class_distribution, distribution_table, read_manifest, stratified_split, stratified_subsample, DirSource,
    Manifest, SplitAssignment,
};
use lesion_core::ensemble::{self, read_predictions, write_predictions, PredictionSet};
use lesion_core::imaging::{augment_eval, load_image, save_png};
use lesion_core::metrics::{self, ConfusionMatrix};
use lesion_core::nn::{self, evaluate, fit, write_log_csv, ModelSpec, Network, Params};
use lesion_core::{ClassLabel, Exec};
use log::{info, warn};

use crate::config::RunConfig;

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    /// Some items were skipped; the rest was written.
    Partial,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.lfck";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.manifest()?;
    read_manifest(path, cfg.image_dir()?).with_context(|| format!("manifest {}", path.display()))
}

fn limited(m: Manifest, cfg: &RunConfig) -> Manifest {
    match cfg.limit {
        Some(n) if n < m.len() => {
            let out = stratified_subsample(&m, n, cfg.seed);
            info!("--limit {n}: using {} of {} rows", out.len(), m.len());
            out
        }
        _ => m,
    }
}

fn load_split(manifest: &Manifest, path: &Path) -> Result<SplitAssignment> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SplitAssignment::read_csv(manifest, f).with_context(|| format!("split file {}", path.display()))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Runs the deterministic evaluation preprocessing over every PNG/JPEG in
/// `input` and writes `<stem>.png` files plus `preprocessed.csv`.
pub fn cmd_preprocess(cfg: &RunConfig, input: &Path) -> Result<Status> {
    let aug = cfg.augment();
    aug.validate()?;
    let entries = std::fs::read_dir(input).with_context(|| format!("reading input directory {}", input.display()))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.with_context(|| format!("listing {}", input.display()))?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort();

    // Two inputs with the same stem would overwrite each other; the later
    // one (in sorted order) is skipped.
    let mut claimed: HashMap<String, &Path> = HashMap::new();
    let mut jobs = Vec::new();
    let mut failed = 0usize;
    for f in &files {
        let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if let Some(first) = claimed.get(&stem) {
            warn!(
                "{}: output name collides with {}; skipped",
                f.display(),
                first.display()
            );
            failed += 1;
        } else {
            claimed.insert(stem.clone(), f);
            jobs.push((f.as_path(), stem));
        }
    }

    let results = Exec::Parallel.map_slice(&jobs, |(path, stem)| -> Result<(String, usize, usize)> {
        let img = load_image(path)?;
        let out = augment_eval(&img, &aug)?.to_u8();
        let name = format!("{stem}.png");
        save_png(&out, &cfg.out_dir.join(&name))?;
        Ok((name, out.width(), out.height()))
    });

    let mut w = csv_writer(create(&cfg.out_dir.join("preprocessed.csv"))?);
    w.write_record(["source", "output", "width", "height"])?;
    for ((path, _), res) in jobs.iter().zip(results) {
        match res {
            Ok((name, width, height)) => {
                let src = path.file_name().unwrap_or_default().to_string_lossy();
                w.write_record([src.as_ref(), name.as_str(), &width.to_string(), &height.to_string()])?;
            }
            Err(e) => {
                warn!("{}: {e:#}", path.display());
                failed += 1;
            }
        }
    }
    w.flush()?;
    info!("preprocessed {} of {} images", files.len() - failed, files.len());
    Ok(if failed > 0 { Status::Partial } else { Status::Done })
}

fn csv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Stratified split of the manifest into `splits.csv` plus a per-class
/// summary table in `split_summary.txt`.
pub fn cmd_split(cfg: &RunConfig) -> Result<Status> {
    let manifest = limited(load_manifest(cfg)?, cfg);
    ensure!(!manifest.is_empty(), "manifest has no rows");
    let split = stratified_split(&manifest, cfg.val_frac, cfg.seed)?;
    for c in split.starved_classes() {
        warn!("class {c} has no training samples at val_frac {}", cfg.val_frac);
    }
    split.write_csv(&manifest, create(&cfg.out_dir.join("splits.csv"))?)?;
    let table = distribution_table(&[
        ("Training", class_distribution(&split.train)),
        ("Validation", class_distribution(&split.val)),
        ("TOTAL", class_distribution(&manifest)),
    ]);
    write_text(&cfg.out_dir.join("split_summary.txt"), &table)?;
    eprint!("{table}");
    Ok(Status::Done)
}

/// Trains the small CNN on the split's training rows and keeps the best
/// validation checkpoint.
pub fn cmd_train(cfg: &RunConfig, splits: &Path) -> Result<Status> {
    let train_cfg = cfg.train();
    let aug = cfg.augment();
    train_cfg.validate()?;
    aug.validate()?;
    let manifest = load_manifest(cfg)?;
    let split = load_split(&manifest, splits)?;
    let train = limited(split.train, cfg);
    let val = limited(split.val, cfg);
    ensure!(!train.is_empty(), "split has no training rows");
    ensure!(!val.is_empty(), "split has no validation rows");

    let side = aug.output_size();
    let spec = ModelSpec::small_cnn(side, side);
    let source = DirSource::new(cfg.image_dir()?);
    info!("training on {} rows, validating on {}", train.len(), val.len());
    let outcome = fit(&spec, &train, &val, &train_cfg, &aug, &source, Exec::Parallel)?;

    write_log_csv(&outcome.log, create(&cfg.out_dir.join("train_log.csv"))?)?;
    nn::save_checkpoint(&outcome.checkpoint, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    info!(
        "best epoch {} with {:?} {:.4}",
        outcome.checkpoint.epoch, outcome.checkpoint.monitor, outcome.checkpoint.metric
    );
    Ok(Status::Done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Val,
    All,
}

fn write_report(out: &Path, truth: &Manifest, preds: &PredictionSet) -> Result<ConfusionMatrix> {
    let y_true = truth.labels();
    let y_pred: Vec<ClassLabel> = truth
        .rows
        .iter()
        .map(|r| ensemble::argmax(&preds.rows[&r.image_id]))
        .collect();
    let cm = metrics::confusion(&y_true, &y_pred)?;
    let names = ClassLabel::names();
    let report = metrics::report_with_names(&cm, &names);
    write_text(&out.join("confusion.csv"), &cm.to_csv(&names))?;
    write_text(&out.join("report.json"), &(report.to_json() + "\n"))?;
    let text = report.to_text();
    write_text(&out.join("report.txt"), &text)?;
    eprint!("{text}");
    Ok(cm)
}

/// Scores a checkpoint on one subset of the manifest.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, splits: Option<&Path>, subset: Subset) -> Result<Status> {
    let ckpt = nn::load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    ensure!(
        ckpt.class_order == ClassLabel::names(),
        "checkpoint class order {:?} differs from this build",
        ckpt.class_order
    );
    let manifest = load_manifest(cfg)?;
    let rows = match (subset, splits) {
        (Subset::All, _) => manifest,
        (_, None) => bail!("--splits is required unless --subset all"),
        (Subset::Train, Some(p)) => load_split(&manifest, p)?.train,
        (Subset::Val, Some(p)) => load_split(&manifest, p)?.val,
    };
    let rows = limited(rows, cfg);
    ensure!(!rows.is_empty(), "nothing to evaluate");

    let net = Network::new(ckpt.spec.clone())?;
    let params = Params { values: ckpt.params };
    let source = DirSource::new(cfg.image_dir()?);
    let preds = evaluate(&net, &params, &rows, &ckpt.augment, &source, Exec::Parallel)?;
    write_predictions(&preds, create(&cfg.out_dir.join("predictions.csv"))?)?;
    let cm = write_report(&cfg.out_dir, &rows, &preds)?;
    info!("accuracy {:.4} on {} images", metrics::accuracy(&cm), cm.total());
    Ok(Status::Done)
}

/// Averages two or more prediction files and scores the result against the
/// ground-truth manifest.
pub fn cmd_ensemble(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Status> {
    ensure!(inputs.len() >= 2, "ensembling needs at least two prediction files");
    let mut sets = Vec::with_capacity(inputs.len());
    for p in inputs {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let outcome = read_predictions(f).with_context(|| format!("predictions {}", p.display()))?;
        if !outcome.renormalized.is_empty() {
            warn!("{}: renormalized {} rows", p.display(), outcome.renormalized.len());
        }
        sets.push(outcome.set);
    }
    let avg = ensemble::average(&sets)?;
    write_predictions(&avg, create(&cfg.out_dir.join("ensemble.csv"))?)?;

    let manifest = load_manifest(cfg)?;
    let labels: HashMap<&str, &data::Sample> = manifest.rows.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut truth = Vec::with_capacity(avg.len());
    for id in avg.rows.keys() {
        match labels.get(id.as_str()) {
            Some(s) => truth.push((*s).clone()),
            None => bail!("image `{id}` has no ground-truth label"),
        }
    }
    let truth = Manifest::new(truth, manifest.source_dir.clone())?;
    let cm = write_report(&cfg.out_dir, &truth, &avg)?;
    info!(
        "ensemble of {} models: accuracy {:.4}",
        sets.len(),
        metrics::accuracy(&cm)
    );
    Ok(Status::Done)
}
