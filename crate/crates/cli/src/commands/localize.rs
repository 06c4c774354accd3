//! `localize`: class-activation heatmaps for every (image, class) pair with
//! ground truth, thresholded into boxes and scored as Acc/AFP per IoU
//! threshold.
//!
//! Annotations are read in original image pixel coordinates and mapped
//! through the same resize+crop transform as the pixels before scoring;
//! `pred_boxes.csv` is written back in original coordinates.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use clap::Args;
use relconv_core::compute::Phase;
use relconv_core::dataio::manifest::{read_gt_boxes, DatasetManifest};
use relconv_core::dataio::pnm::read_pnm;
use relconv_core::dataio::preprocess::{coordinate_map, CoordinateMap};
use relconv_core::error::{Error, Result};
use relconv_core::localize::{cam_heatmap, threshold_and_boxes, BoxOptions, PredictedBox};
use relconv_core::localize::write_pred_boxes;
use relconv_core::metrics::{localization_metrics, Bbox, ClassLocalization, LocalizationCase};
use relconv_core::model::{checkpoint, Model};
use relconv_core::relgraph::RelationGraph;
use relconv_core::sampler::{expand_batch, fnv1a64};
use relconv_core::scalar::Real;
use relconv_core::tensor::Tensor;
use relconv_core::trainer::load_images;
use serde::Serialize;

use crate::commands::{effective_neighbors, graph_for_split, specs_from_names};
use crate::config::{
    parse_split, pick, pick_required, pick_switch, write_run_config, ConfigFile, Precision,
};

#[derive(Args)]
pub struct LocalizeArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint stem (the path without .json/.bin).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for heatmaps, boxes, and metrics.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth box CSV; defaults to gt_boxes.csv next to the manifest.
    #[arg(long)]
    gt_boxes: Option<PathBuf>,
    /// Split to localize on (train, val, test).
    #[arg(long)]
    split: Option<String>,
    /// Heatmap segmentation threshold (strictly greater-than).
    #[arg(long)]
    threshold: Option<u8>,
    /// Drop components smaller than this many pixels.
    #[arg(long)]
    min_area: Option<usize>,
    /// Merge all activated components into one box per heatmap.
    #[arg(long)]
    single_box: bool,
    /// IoU threshold for a correct localization; repeatable.
    #[arg(long = "iou-threshold", action = clap::ArgAction::Append)]
    iou_threshold: Vec<f64>,
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
    gt_boxes: PathBuf,
    split: String,
    threshold: u8,
    min_area: usize,
    single_box: bool,
    iou_thresholds: Vec<f64>,
    neighbors: usize,
    exhaustive: bool,
    batch_size: usize,
    seed: u64,
    precision: Precision,
}

pub fn run(args: LocalizeArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let manifest = pick_required(args.manifest, file.manifest, "manifest")?;
    let gt_default = manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("gt_boxes.csv");
    let iou_thresholds = if !args.iou_threshold.is_empty() {
        args.iou_threshold.clone()
    } else {
        file.iou_thresholds.unwrap_or_else(|| vec![0.1, 0.5])
    };
    for t in &iou_thresholds {
        if !(0.0..1.0).contains(t) {
            return Err(Error::Config(format!("IoU threshold {} outside [0, 1)", t)));
        }
    }
    let precision_name = pick(args.precision, file.precision, "f64".to_string());
    let r = Resolved {
        manifest,
        checkpoint: pick_required(args.checkpoint, file.checkpoint, "checkpoint")?,
        out: args.out.clone(),
        gt_boxes: pick(args.gt_boxes, file.gt_boxes, gt_default),
        split: pick(args.split, file.split, "test".to_string()),
        threshold: pick(args.threshold, file.threshold, 180),
        min_area: pick(args.min_area, file.min_area, 1),
        single_box: pick_switch(args.single_box, file.single_box),
        iou_thresholds,
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
    if model.config.layers != 1 {
        return Err(Error::Config(
            "localization needs a checkpoint trained with --layers 1 \
             (the activation maps feed the final head directly)"
                .into(),
        ));
    }
    let split = parse_split(&r.split)?;
    let gt = read_gt_boxes(&r.gt_boxes, &manifest.class_names)?;
    let ids = manifest.split_ids(split);
    let id_set: HashSet<&str> = ids.iter().map(String::as_str).collect();

    // Evaluation is restricted to (image, class) pairs possessing ground
    // truth; images without any annotated box are skipped entirely. The
    // heatmap lives in preprocessed coordinates, so annotations ride the
    // resize+crop map first; boxes cropped away entirely are dropped.
    let mut gt_map: HashMap<(String, usize), Vec<Bbox>> = HashMap::new();
    let mut image_classes: HashMap<String, BTreeSet<usize>> = HashMap::new();
    let mut coord_maps: HashMap<String, CoordinateMap> = HashMap::new();
    for b in &gt {
        if !id_set.contains(b.image_id.as_str()) {
            continue;
        }
        if !coord_maps.contains_key(&b.image_id) {
            let raw = read_pnm(&manifest.image_path(&b.image_id))?;
            coord_maps.insert(
                b.image_id.clone(),
                coordinate_map(raw.width, raw.height, manifest.image_size),
            );
        }
        let Some(mapped) = coord_maps[&b.image_id].map_box(&b.bbox) else {
            continue;
        };
        gt_map
            .entry((b.image_id.clone(), b.class_index))
            .or_default()
            .push(mapped);
        image_classes
            .entry(b.image_id.clone())
            .or_default()
            .insert(b.class_index);
    }
    let eval_ids: Vec<String> = ids
        .iter()
        .filter(|id| image_classes.contains_key(*id))
        .cloned()
        .collect();
    if eval_ids.is_empty() {
        return Err(Error::Validation(format!(
            "no ground-truth boxes for split {:?} in {}",
            split,
            r.gt_boxes.display()
        )));
    }

    let specs = specs_from_names(&model.config.relations)?;
    let graph: RelationGraph<T> = graph_for_split(&manifest, &specs, split)?;
    let n = if r.exhaustive {
        graph.max_cluster_size()
    } else {
        r.neighbors
    };
    let n = effective_neighbors(model.config.sharing, n);
    let weight = model.cam_head_weight().clone();
    let opts = BoxOptions {
        threshold: r.threshold,
        min_area: r.min_area,
        single_box: r.single_box,
    };
    let heat_dir = r.out.join("heatmaps");
    std::fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;

    let mut preds: Vec<PredictedBox> = Vec::new();
    let mut pred_map: HashMap<(String, usize), Vec<Bbox>> = HashMap::new();
    for (batch_idx, chunk) in eval_ids.chunks(r.batch_size).enumerate() {
        let sub_seed = fnv1a64(&[r.seed, batch_idx as u64]);
        let sub = expand_batch(&graph, chunk, model.config.layers, n, sub_seed)?;
        let images = load_images::<T>(&manifest, &sub.node_ids)?;
        let fwd = model.forward_subgraph(&images, &sub, Phase::Eval)?;
        let maps = fwd.tape.value(fwd.maps);
        let (d, s) = (maps.shape()[1], maps.shape()[2]);
        let per_row = d * s * s;
        for (row, id) in chunk.iter().enumerate() {
            let row_maps = Tensor::new(
                vec![d, s, s],
                maps.data()[row * per_row..(row + 1) * per_row].to_vec(),
            )?;
            for &class in &image_classes[id] {
                let heat = cam_heatmap(id, &row_maps, &weight, class, manifest.image_size)?;
                let name = format!("{}_{}.pgm", id, manifest.class_names[class]);
                heat.write_pgm(&heat_dir.join(name))?;
                for sb in threshold_and_boxes(&heat, &opts) {
                    pred_map
                        .entry((id.clone(), class))
                        .or_default()
                        .push(sb.bbox);
                    preds.push(PredictedBox {
                        image_id: id.clone(),
                        class_index: class,
                        bbox: sb.bbox,
                        score: sb.score,
                    });
                }
            }
        }
    }
    let csv_boxes: Vec<PredictedBox> = preds
        .iter()
        .map(|p| {
            Ok(PredictedBox {
                bbox: coord_maps[&p.image_id].unmap_box(&p.bbox)?,
                ..p.clone()
            })
        })
        .collect::<Result<_>>()?;
    write_pred_boxes(&r.out.join("pred_boxes.csv"), &csv_boxes, &manifest.class_names)?;

    let mut cases: Vec<LocalizationCase> = Vec::new();
    for id in &eval_ids {
        for &class in &image_classes[id] {
            let key = (id.clone(), class);
            cases.push(LocalizationCase {
                class_index: class,
                gt_boxes: gt_map[&key].clone(),
                pred_boxes: pred_map.get(&key).cloned().unwrap_or_default(),
            });
        }
    }
    let classes = manifest.class_names.len();
    let sweeps: Vec<(f64, Vec<ClassLocalization>)> = r
        .iou_thresholds
        .iter()
        .map(|&t| (t, localization_metrics(&cases, classes, t)))
        .collect();
    write_report(&r.out, &manifest.class_names, r, eval_ids.len(), preds.len(), &sweeps)?;
    write_run_config(&r.out, "localize", r)?;
    println!(
        "{} images, {} heatmaps, {} predicted boxes",
        eval_ids.len(),
        cases.len(),
        preds.len()
    );
    print_table(&manifest.class_names, &sweeps);
    Ok(())
}

fn write_report(
    out: &Path,
    class_names: &[String],
    r: &Resolved,
    images: usize,
    boxes: usize,
    sweeps: &[(f64, Vec<ClassLocalization>)],
) -> Result<()> {
    let thresholds: Vec<serde_json::Value> = sweeps
        .iter()
        .map(|(t, rows)| {
            let per_class: Vec<serde_json::Value> = rows
                .iter()
                .map(|row| {
                    serde_json::json!({
                        "class": class_names[row.class_index],
                        "acc": row.acc,
                        "afp": row.afp,
                        "gt_boxes": row.gt_boxes,
                        "matched": row.matched,
                        "false_positives": row.false_positives,
                        "images": row.images,
                    })
                })
                .collect();
            serde_json::json!({ "iou": t, "per_class": per_class })
        })
        .collect();
    let doc = serde_json::json!({
        "split": r.split,
        "images_evaluated": images,
        "predicted_boxes": boxes,
        "thresholds": thresholds,
    });
    let path = out.join("localization.json");
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn print_table(class_names: &[String], sweeps: &[(f64, Vec<ClassLocalization>)]) {
    println!("{:<8} {:<24} {:>8} {:>8}", "T(IoU)", "class", "Acc", "AFP");
    for (t, rows) in sweeps {
        let mut defined = Vec::new();
        for row in rows {
            if row.images == 0 {
                continue;
            }
            match row.acc {
                Some(acc) => {
                    defined.push(acc);
                    println!(
                        "{:<8.2} {:<24} {:>8.4} {:>8.4}",
                        t, class_names[row.class_index], acc, row.afp
                    );
                }
                None => println!(
                    "{:<8.2} {:<24} {:>8} {:>8.4}",
                    t, class_names[row.class_index], "n/a", row.afp
                ),
            }
        }
        if !defined.is_empty() {
            let mean = defined.iter().sum::<f64>() / defined.len() as f64;
            println!("{:<8.2} {:<24} {:>8.4}", t, "mean", mean);
        }
    }
}
