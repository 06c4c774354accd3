//! Dataset manifest: the JSON index tying records, class names, and image
//! files together, plus ground-truth box CSV I/O.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::pnm::read_pnm;
use crate::dataio::preprocess::preprocess_image;
use crate::dataio::records::{ImageRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::Bbox;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_dir: PathBuf,
    /// Side length images are preprocessed to.
    pub image_size: usize,
    /// Channel count of the files on disk (1 or 3).
    pub channels: usize,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Load a manifest; a relative `image_dir` is resolved against the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        if manifest.image_dir.is_relative() {
            if let Some(parent) = path.parent() {
                manifest.image_dir = parent.join(&manifest.image_dir);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Validation("manifest declares no classes".into()));
        }
        for r in &self.records {
            if r.labels.len() != self.class_names.len() {
                return Err(Error::Validation(format!(
                    "record {} has {} label bits, expected {}",
                    r.image_id,
                    r.labels.len(),
                    self.class_names.len()
                )));
            }
        }
        crate::dataio::records::validate_records(&self.records)
    }

    /// Decode every image file and check its channel count.
    pub fn validate_images(&self) -> Result<()> {
        for r in &self.records {
            let path = self.image_path(&r.image_id);
            let img = read_pnm(&path)?;
            if img.channels != self.channels {
                return Err(Error::Validation(format!(
                    "{}: {} channels, manifest declares {}",
                    path.display(),
                    img.channels,
                    self.channels
                )));
            }
        }
        Ok(())
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        self.image_dir.join(image_id)
    }

    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn split_records(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.image_id.clone())
            .collect()
    }

    /// Decode and preprocess one image to `(3, image_size, image_size)`.
    pub fn load_image<T: Real>(&self, image_id: &str) -> Result<Tensor<T>> {
        let img = read_pnm(&self.image_path(image_id))?;
        preprocess_image(&img, self.image_size)
    }

    /// Label matrix for the given ids, one row per id.
    pub fn labels_for<T: Real>(&self, ids: &[String]) -> Result<Tensor<T>> {
        let by_id: HashMap<&str, &ImageRecord> =
            self.records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        let c = self.class_names.len();
        let mut data = Vec::with_capacity(ids.len() * c);
        for id in ids {
            let r = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::UnknownNode(id.clone()))?;
            data.extend(r.labels.iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        Tensor::new(vec![ids.len(), c], data)
    }
}

/// One annotated box, in original image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class_index: usize,
    pub bbox: Bbox,
}

/// Write boxes as CSV: `image_id,class_name,x,y,w,h`.
pub fn write_gt_boxes(path: &Path, boxes: &[GroundTruthBox], class_names: &[String]) -> Result<()> {
    let mut out = String::from("image_id,class_name,x,y,w,h\n");
    for b in boxes {
        let name = class_names
            .get(b.class_index)
            .ok_or_else(|| Error::Validation(format!("class index {} out of range", b.class_index)))?;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.image_id,
            name,
            b.bbox.x_min,
            b.bbox.y_min,
            b.bbox.width(),
            b.bbox.height()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_gt_boxes(path: &Path, class_names: &[String]) -> Result<Vec<GroundTruthBox>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
    let mut boxes = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        if row.len() < 6 {
            return Err(Error::Ingestion { row: row_no, msg: "expected 6 columns".into() });
        }
        let class_name = row[1].trim();
        let class_index = class_names
            .iter()
            .position(|n| n == class_name)
            .ok_or_else(|| Error::Ingestion {
                row: row_no,
                msg: format!("unknown class name '{}'", class_name),
            })?;
        let num = |j: usize| -> Result<f64> {
            row[j].trim().parse().map_err(|_| Error::Ingestion {
                row: row_no,
                msg: format!("malformed number '{}'", &row[j]),
            })
        };
        boxes.push(GroundTruthBox {
            image_id: row[0].trim().to_string(),
            class_index,
            bbox: Bbox::from_xywh(num(2)?, num(3)?, num(4)?, num(5)?)?,
        });
    }
    Ok(boxes)
}
