//! Deterministic synthetic dataset generator: patients with persistent
//! findings, per-image blob expression, and relation-friendly metadata.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{DatasetManifest, GroundTruthBox};
use crate::dataio::pnm::{write_pnm, RawImage};
use crate::dataio::records::{assign_splits, Gender, ImageRecord, Split, ViewPosition};
use crate::error::{Error, Result};
use crate::metrics::Bbox;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub patients: usize,
    pub images_per_patient: (usize, usize),
    /// Square image side in pixels.
    pub image_size: usize,
    pub classes: usize,
    /// Probability a patient carries a given finding persistently.
    pub persistence: f64,
    /// Probability a carried finding is expressed in a given image.
    pub expression: f64,
    /// Brightness added over the base gray inside a blob.
    pub blob_intensity: f64,
    /// Peak-to-peak amplitude of the uniform pixel noise.
    pub noise: f64,
    /// Brightness gap between the two view positions: AP images sit half of
    /// this above the base gray, PA images half below.
    pub view_shift: f64,
    pub split: (f64, f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            patients: 200,
            images_per_patient: (3, 6),
            image_size: 64,
            classes: 4,
            persistence: 0.35,
            expression: 0.75,
            blob_intensity: 0.04,
            noise: 0.40,
            view_shift: 0.0,
            split: (0.7, 0.2, 0.1),
        }
    }
}

const BASE_GRAY: f64 = 0.30;

/// Width/height of a class's blob as fractions of the quadrant side.
const BLOB_SHAPES: [(f64, f64); 4] = [(0.42, 0.42), (0.55, 0.30), (0.30, 0.55), (0.46, 0.38)];

struct BlobPlan {
    /// Quadrant origin.
    qx: usize,
    qy: usize,
    w: usize,
    h: usize,
    /// Free room for jitter inside the quadrant.
    free_x: usize,
    free_y: usize,
    margin: usize,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::Config("patient count must be positive".into()));
        }
        let (lo, hi) = self.images_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "images-per-patient range ({}, {}) is invalid",
                lo, hi
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        for (name, p) in [("persistence", self.persistence), ("expression", self.expression)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{} probability {} outside [0, 1]", name, p)));
            }
        }
        if !(self.blob_intensity >= 0.0 && self.noise >= 0.0 && self.view_shift >= 0.0) {
            return Err(Error::Config(
                "intensity, noise, and view shift must be non-negative".into(),
            ));
        }
        for c in 0..self.classes {
            self.blob_plan(c)?;
        }
        Ok(())
    }

    fn blob_plan(&self, class: usize) -> Result<BlobPlan> {
        let s = self.image_size;
        let half = s / 2;
        let margin = (s as f64 * 0.08).ceil() as usize;
        let q = class % 4;
        let shape = BLOB_SHAPES[(q + class / 4) % 4];
        let w = (half as f64 * shape.0).round() as usize;
        let h = (half as f64 * shape.1).round() as usize;
        let usable = half.saturating_sub(2 * margin);
        if s < 16 || w < 2 || h < 2 || w > usable || h > usable {
            return Err(Error::Config(format!(
                "image size {} too small to place class-{} blobs",
                s, class
            )));
        }
        Ok(BlobPlan {
            qx: (q % 2) * half,
            qy: (q / 2) * half,
            w,
            h,
            free_x: usable - w,
            free_y: usable - h,
            margin,
        })
    }
}

/// Generate images, records, and ground-truth boxes under `image_dir`.
/// Identical (config, seed) inputs produce byte-identical outputs.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
    image_dir: &Path,
) -> Result<(DatasetManifest, Vec<GroundTruthBox>)> {
    cfg.validate()?;
    std::fs::create_dir_all(image_dir).map_err(|e| Error::io(image_dir, e))?;
    let plans: Vec<BlobPlan> = (0..cfg.classes)
        .map(|c| cfg.blob_plan(c))
        .collect::<Result<_>>()?;
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut gt_boxes = Vec::new();
    for p in 0..cfg.patients {
        let patient_id = format!("p{:04}", p);
        let gender = if rng.gen_bool(0.5) { Gender::M } else { Gender::F };
        let age = 25 + 5 * rng.gen_range(0..8u32);
        let persistent: Vec<bool> = (0..cfg.classes).map(|_| rng.gen_bool(cfg.persistence)).collect();
        let n_images = rng.gen_range(cfg.images_per_patient.0..=cfg.images_per_patient.1);
        for i in 0..n_images {
            let image_id = format!("{}_{:02}.pgm", patient_id, i);
            let view = if rng.gen_bool(0.5) { ViewPosition::PA } else { ViewPosition::AP };
            let base = match view {
                ViewPosition::AP => BASE_GRAY + cfg.view_shift / 2.0,
                ViewPosition::PA => BASE_GRAY - cfg.view_shift / 2.0,
            };
            let labels: Vec<bool> = persistent
                .iter()
                .map(|&carried| carried && rng.gen_bool(cfg.expression))
                .collect();
            let mut pixels: Vec<f64> = (0..s * s)
                .map(|_| base + cfg.noise * (rng.gen::<f64>() - 0.5))
                .collect();
            for (c, &expressed) in labels.iter().enumerate() {
                if !expressed {
                    continue;
                }
                let plan = &plans[c];
                let x0 = plan.qx + plan.margin + rng.gen_range(0..=plan.free_x);
                let y0 = plan.qy + plan.margin + rng.gen_range(0..=plan.free_y);
                for y in y0..y0 + plan.h {
                    for x in x0..x0 + plan.w {
                        pixels[y * s + x] += cfg.blob_intensity;
                    }
                }
                gt_boxes.push(GroundTruthBox {
                    image_id: image_id.clone(),
                    class_index: c,
                    bbox: Bbox::from_xywh(x0 as f64, y0 as f64, plan.w as f64, plan.h as f64)?,
                });
            }
            let bytes: Vec<u8> = pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            write_pnm(&image_dir.join(&image_id), &RawImage::new(s, s, 1, bytes)?)?;
            records.push(ImageRecord {
                image_id,
                patient_id: patient_id.clone(),
                age,
                gender,
                view,
                labels,
                split: Split::Train,
            });
        }
    }
    assign_splits(&mut records, cfg.split.0, cfg.split.1, cfg.split.2, seed)?;
    let manifest = DatasetManifest {
        image_dir: image_dir.to_path_buf(),
        image_size: s,
        channels: 1,
        class_names: (0..cfg.classes).map(|c| format!("finding_{:02}", c)).collect(),
        records,
    };
    Ok((manifest, gt_boxes))
}
