//! `gen-synthetic`: write a synthetic dataset (images, manifest, ground
//! truth boxes) under one output directory.

use std::path::PathBuf;

use clap::Args;
use relconv_core::dataio::manifest::write_gt_boxes;
use relconv_core::dataio::synthetic::{generate_synthetic, SyntheticConfig};
use relconv_core::error::Result;
use serde::Serialize;

use crate::config::{
    parse_f64_triple, parse_usize_pair, pick, write_run_config, ConfigFile,
};

#[derive(Args)]
pub struct GenArgs {
    /// Output directory for images/, manifest.json, and gt_boxes.csv.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of synthetic patients.
    #[arg(long)]
    patients: Option<usize>,
    /// Images per patient as MIN,MAX (inclusive).
    #[arg(long, value_parser = parse_usize_pair)]
    images_per_patient: Option<(usize, usize)>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Number of label classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Probability a patient persistently carries a finding.
    #[arg(long)]
    persistence: Option<f64>,
    /// Probability a carried finding is expressed in an image.
    #[arg(long)]
    expression: Option<f64>,
    /// Blob brightness added over the base gray.
    #[arg(long)]
    blob_intensity: Option<f64>,
    /// Peak-to-peak pixel noise amplitude.
    #[arg(long)]
    noise: Option<f64>,
    /// Brightness gap between AP and PA view positions.
    #[arg(long)]
    view_shift: Option<f64>,
    /// Train,val,test fractions, e.g. 0.7,0.2,0.1.
    #[arg(long, value_parser = parse_f64_triple)]
    split_ratio: Option<(f64, f64, f64)>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Resolved {
    out: PathBuf,
    patients: usize,
    images_per_patient: (usize, usize),
    size: usize,
    classes: usize,
    persistence: f64,
    expression: f64,
    blob_intensity: f64,
    noise: f64,
    view_shift: f64,
    split_ratio: (f64, f64, f64),
    seed: u64,
}

pub fn run(args: GenArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let d = SyntheticConfig::default();
    let r = Resolved {
        out: args.out.clone(),
        patients: pick(args.patients, file.patients, d.patients),
        images_per_patient: pick(
            args.images_per_patient,
            file.images_per_patient,
            d.images_per_patient,
        ),
        size: pick(args.size, file.size, d.image_size),
        classes: pick(args.classes, file.classes, d.classes),
        persistence: pick(args.persistence, file.persistence, d.persistence),
        expression: pick(args.expression, file.expression, d.expression),
        blob_intensity: pick(args.blob_intensity, file.blob_intensity, d.blob_intensity),
        noise: pick(args.noise, file.noise, d.noise),
        view_shift: pick(args.view_shift, file.view_shift, d.view_shift),
        split_ratio: pick(args.split_ratio, file.split_ratio, d.split),
        seed: pick(args.seed, file.seed, 0),
    };
    let cfg = SyntheticConfig {
        patients: r.patients,
        images_per_patient: r.images_per_patient,
        image_size: r.size,
        classes: r.classes,
        persistence: r.persistence,
        expression: r.expression,
        blob_intensity: r.blob_intensity,
        noise: r.noise,
        view_shift: r.view_shift,
        split: r.split_ratio,
    };
    let (mut manifest, boxes) = generate_synthetic(&cfg, r.seed, &args.out.join("images"))?;
    // Stored relative so the dataset directory stays relocatable.
    manifest.image_dir = PathBuf::from("images");
    manifest.save(&args.out.join("manifest.json"))?;
    write_gt_boxes(&args.out.join("gt_boxes.csv"), &boxes, &manifest.class_names)?;
    write_run_config(&args.out, "gen-synthetic", &r)?;
    println!(
        "wrote {} images, {} ground-truth boxes, {} classes under {}",
        manifest.records.len(),
        boxes.len(),
        manifest.class_names.len(),
        args.out.display()
    );
    Ok(())
}
