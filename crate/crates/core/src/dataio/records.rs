//! Image metadata records, CSV ingestion, and split assignment.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewPosition {
    PA,
    AP,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split '{}'", other))),
        }
    }
}

/// One image's metadata: identity, patient attributes, label bits, split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub age: u32,
    pub gender: Gender,
    pub view: ViewPosition,
    /// One bit per class; all-zero means no findings.
    pub labels: Vec<bool>,
    pub split: Split,
}

/// How records are assigned to train/val/test.
#[derive(Clone, Debug)]
pub enum SplitSpec {
    /// CSV with columns `image_id,split` covering every record.
    File(std::path::PathBuf),
    /// Deterministic ratio split over image ids sorted lexicographically,
    /// shuffled by the seed. Counts are rounded per the train and val
    /// ratios; the remainder is test.
    Ratio {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
}

/// Load metadata rows in ChestX-ray14 `Data_Entry_2017.csv` layout and
/// validate them.
///
/// Required columns: `Image Index`, `Finding Labels` (pipe-separated names,
/// `No Finding` meaning none), `Patient ID`, `Patient Age`, `Patient Gender`
/// (M/F), `View Position` (PA/AP). Extra columns are ignored.
pub fn load_metadata(
    csv_path: &Path,
    class_names: &[String],
    split_spec: &SplitSpec,
) -> Result<Vec<ImageRecord>> {
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| Error::Csv { path: csv_path.to_path_buf(), source: e })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { path: csv_path.to_path_buf(), source: e })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Validation(format!("{}: missing column '{}'", csv_path.display(), name)))
    };
    let c_image = col("Image Index")?;
    let c_labels = col("Finding Labels")?;
    let c_patient = col("Patient ID")?;
    let c_age = col("Patient Age")?;
    let c_gender = col("Patient Gender")?;
    let c_view = col("View Position")?;
    let class_index: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut records = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row_no = row_idx + 2;
        let row = row.map_err(|e| Error::Csv { path: csv_path.to_path_buf(), source: e })?;
        let field = |i: usize| -> Result<&str> {
            row.get(i).map(str::trim).ok_or_else(|| Error::Ingestion {
                row: row_no,
                msg: "row has too few fields".into(),
            })
        };
        let image_id = field(c_image)?.to_string();
        let patient_id = field(c_patient)?.to_string();
        let age: u32 = field(c_age)?.parse().map_err(|_| Error::Ingestion {
            row: row_no,
            msg: format!("malformed age '{}'", field(c_age).unwrap_or_default()),
        })?;
        let gender = match field(c_gender)? {
            "M" => Gender::M,
            "F" => Gender::F,
            other => {
                return Err(Error::Ingestion {
                    row: row_no,
                    msg: format!("unknown gender '{}'", other),
                })
            }
        };
        let view = match field(c_view)? {
            "PA" => ViewPosition::PA,
            "AP" => ViewPosition::AP,
            other => {
                return Err(Error::Ingestion {
                    row: row_no,
                    msg: format!("unknown view position '{}'", other),
                })
            }
        };
        let mut labels = vec![false; class_names.len()];
        for name in field(c_labels)?.split('|') {
            let name = name.trim();
            if name.is_empty() || name == "No Finding" {
                continue;
            }
            match class_index.get(name) {
                Some(&i) => labels[i] = true,
                None => {
                    return Err(Error::Ingestion {
                        row: row_no,
                        msg: format!("unknown label name '{}'", name),
                    })
                }
            }
        }
        records.push(ImageRecord {
            image_id,
            patient_id,
            age,
            gender,
            view,
            labels,
            // Placeholder until split assignment below.
            split: Split::Train,
        });
    }
    validate_records(&records)?;
    match split_spec {
        SplitSpec::File(path) => apply_split_file(&mut records, path)?,
        SplitSpec::Ratio { train, val, test, seed } => {
            assign_splits(&mut records, *train, *val, *test, *seed)?
        }
    }
    Ok(records)
}

/// Uniqueness of image ids and per-patient gender consistency.
pub fn validate_records(records: &[ImageRecord]) -> Result<()> {
    let mut seen: HashMap<&str, ()> = HashMap::with_capacity(records.len());
    let mut patient_gender: HashMap<&str, Gender> = HashMap::new();
    for r in records {
        if seen.insert(&r.image_id, ()).is_some() {
            return Err(Error::DuplicateId(r.image_id.clone()));
        }
        match patient_gender.insert(&r.patient_id, r.gender) {
            Some(g) if g != r.gender => {
                return Err(Error::Validation(format!(
                    "patient {} appears with both genders",
                    r.patient_id
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Deterministic ratio split: sort ids, shuffle with the seed, then cut at
/// `round(n * train)` and `round(n * val)`.
pub fn assign_splits(
    records: &mut [ImageRecord],
    train: f64,
    val: f64,
    test: f64,
    seed: u64,
) -> Result<()> {
    for (name, r) in [("train", train), ("val", val), ("test", test)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("{} ratio {} outside [0, 1]", name, r)));
        }
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios sum to {}, expected 1",
            train + val + test
        )));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * val).round() as usize).min(n.saturating_sub(n_train));
    for (pos, &idx) in order.iter().enumerate() {
        records[idx].split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

fn apply_split_file(records: &mut [ImageRecord], path: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
    let mut assignment: HashMap<String, Split> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        let id = row.get(0).unwrap_or("").trim().to_string();
        let split = Split::parse(row.get(1).unwrap_or(""))?;
        assignment.insert(id, split);
    }
    for r in records.iter_mut() {
        match assignment.get(&r.image_id) {
            Some(&s) => r.split = s,
            None => {
                return Err(Error::Validation(format!(
                    "{}: no split assignment for image {}",
                    path.display(),
                    r.image_id
                )))
            }
        }
    }
    Ok(())
}
