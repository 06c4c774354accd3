//! `eval`: per-class AUC of a saved checkpoint on a manifest split.

use std::path::PathBuf;

use clap::Args;
use relconv_core::dataio::manifest::DatasetManifest;
use relconv_core::error::{Error, Result};
use relconv_core::model::{checkpoint, Model, SharingMode};
use relconv_core::relgraph::RelationGraph;
use relconv_core::scalar::Real;
use relconv_core::trainer::{evaluate_classification, EvalReport};
use serde::Serialize;

use crate::commands::{graph_for_split, specs_from_names};
use crate::config::{
    parse_split, pick, pick_required, pick_switch, write_run_config, ConfigFile, Precision,
};

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint stem (the path without .json/.bin).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for auc.json and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split to score (train, val, test).
    #[arg(long)]
    split: Option<String>,
    /// Assert the checkpoint's sharing mode before evaluating.
    #[arg(long)]
    mode: Option<String>,
    /// Neighbors sampled per image and relation.
    #[arg(long)]
    neighbors: Option<usize>,
    /// Include whole clusters instead of sampling neighbors.
    #[arg(long)]
    exhaustive: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision: f64 (default) or f32; must match the checkpoint.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Serialize)]
struct Resolved {
    manifest: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    split: String,
    mode: Option<String>,
    neighbors: usize,
    exhaustive: bool,
    batch_size: usize,
    seed: u64,
    precision: Precision,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let precision_name = pick(args.precision, file.precision, "f64".to_string());
    let r = Resolved {
        manifest: pick_required(args.manifest, file.manifest, "manifest")?,
        checkpoint: pick_required(args.checkpoint, file.checkpoint, "checkpoint")?,
        out: args.out.clone(),
        split: pick(args.split, file.split, "test".to_string()),
        mode: args.mode.or(file.mode),
        neighbors: pick(args.neighbors, file.neighbors, 1),
        exhaustive: pick_switch(args.exhaustive, file.exhaustive),
        batch_size: pick(args.batch_size, file.batch_size, 16),
        seed: pick(args.seed, file.seed, 0),
        precision: Precision::parse(&precision_name)?,
    };
    match r.precision {
        Precision::F64 => exec::<f64>(&r),
        Precision::F32 => exec::<f32>(&r),
    }
}

fn exec<T: Real>(r: &Resolved) -> Result<()> {
    let manifest = DatasetManifest::load(&r.manifest)?;
    let mut model: Model<T> = checkpoint::load(&r.checkpoint)?;
    if let Some(mode) = &r.mode {
        let wanted = SharingMode::parse(mode)?;
        if model.config.sharing != wanted {
            return Err(Error::Config(format!(
                "checkpoint was trained with mode {}, not {}",
                model.config.sharing, wanted
            )));
        }
    }
    if model.config.classes != manifest.class_names.len() {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes, manifest has {}",
            model.config.classes,
            manifest.class_names.len()
        )));
    }
    let split = parse_split(&r.split)?;
    let specs = specs_from_names(&model.config.relations)?;
    let graph: RelationGraph<T> = graph_for_split(&manifest, &specs, split)?;
    let report = evaluate_classification(
        &mut model,
        &manifest,
        &graph,
        split,
        r.neighbors,
        r.exhaustive,
        r.batch_size,
        r.seed,
    )?;
    write_report(&r.out, &manifest.class_names, &r.split, &report)?;
    write_run_config(&r.out, "eval", r)?;
    print_table(&manifest.class_names, &report);
    Ok(())
}

fn write_report(
    out: &std::path::Path,
    class_names: &[String],
    split: &str,
    report: &EvalReport,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let per_class: Vec<serde_json::Value> = class_names
        .iter()
        .zip(&report.per_class)
        .map(|(name, auc)| serde_json::json!({ "class": name, "auc": auc }))
        .collect();
    let doc = serde_json::json!({
        "split": split,
        "images": report.images,
        "per_class": per_class,
        "mean_auc": report.mean,
        "undefined": report.undefined,
    });
    let path = out.join("auc.json");
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn print_table(class_names: &[String], report: &EvalReport) {
    println!("{:<24} {:>8}", "class", "AUC");
    for (name, auc) in class_names.iter().zip(&report.per_class) {
        match auc {
            Some(v) => println!("{:<24} {:>8.4}", name, v),
            None => println!("{:<24} {:>8}", name, "n/a"),
        }
    }
    println!("{:<24} {:>8.4}", "mean", report.mean);
    if !report.undefined.is_empty() {
        println!(
            "undefined (single-sign labels, excluded from mean): {}",
            report.undefined.join(", ")
        );
    }
}
