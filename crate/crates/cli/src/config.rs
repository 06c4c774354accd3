//! Run-configuration plumbing: an optional JSON config file merged under
//! explicit flags, small value parsers, and the fully resolved config
//! artifact written next to every run's outputs.

use std::path::{Path, PathBuf};

use relconv_core::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Union of the options every subcommand may read from `--config`. One file
/// can drive a whole pipeline; each command picks the fields it understands,
/// and explicit flags always win over file values.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub patients: Option<usize>,
    pub images_per_patient: Option<(usize, usize)>,
    pub size: Option<usize>,
    pub classes: Option<usize>,
    pub persistence: Option<f64>,
    pub expression: Option<f64>,
    pub blob_intensity: Option<f64>,
    pub noise: Option<f64>,
    pub view_shift: Option<f64>,
    pub split_ratio: Option<(f64, f64, f64)>,
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub relations: Option<Vec<String>>,
    pub split: Option<String>,
    pub precision: Option<String>,
    pub mode: Option<String>,
    pub batch_size: Option<usize>,
    pub neighbors: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub layers: Option<usize>,
    pub trunk_channels: Option<Vec<usize>>,
    pub transition_channels: Option<usize>,
    pub eval_every: Option<usize>,
    pub exhaustive_eval: Option<bool>,
    pub checkpoint: Option<PathBuf>,
    pub exhaustive: Option<bool>,
    pub gt_boxes: Option<PathBuf>,
    pub threshold: Option<u8>,
    pub min_area: Option<usize>,
    pub single_box: Option<bool>,
    pub iou_thresholds: Option<Vec<f64>>,
    pub batch: Option<Vec<String>>,
}

impl ConfigFile {
    /// Empty defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("config file {}: {}", p.display(), e)))
            }
        }
    }
}

pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn pick_required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| Error::Config(format!("--{} is required (flag or config file)", name)))
}

/// Switch flags can only turn a file value on, never off.
pub fn pick_switch(flag: bool, file: Option<bool>) -> bool {
    flag || file.unwrap_or(false)
}

/// Numeric precision of a run; checkpoints are tagged and reloads must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f64" | "64" => Ok(Precision::F64),
            "f32" | "32" => Ok(Precision::F32),
            other => Err(Error::Config(format!(
                "unknown precision '{}', expected f64 or f32",
                other
            ))),
        }
    }
}

pub fn parse_split(name: &str) -> Result<relconv_core::dataio::records::Split> {
    relconv_core::dataio::records::Split::parse(name)
        .map_err(|_| Error::Config(format!("unknown split '{}', expected train, val, or test", name)))
}

/// Clap value parser for `MIN,MAX` pairs.
pub fn parse_usize_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected MIN,MAX, got '{}'", s));
    }
    let a = parts[0].trim().parse().map_err(|e| format!("{}", e))?;
    let b = parts[1].trim().parse().map_err(|e| format!("{}", e))?;
    Ok((a, b))
}

/// Clap value parser for `TRAIN,VAL,TEST` fraction triples.
pub fn parse_f64_triple(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated fractions, got '{}'", s));
    }
    let a = parts[0].trim().parse().map_err(|e| format!("{}", e))?;
    let b = parts[1].trim().parse().map_err(|e| format!("{}", e))?;
    let c = parts[2].trim().parse().map_err(|e| format!("{}", e))?;
    Ok((a, b, c))
}

/// Comma-separated identifier list, lowercased.
pub fn parse_name_list(s: &str) -> Result<Vec<String>> {
    let names: Vec<String> = s
        .split(',')
        .map(|t| t.trim().to_ascii_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::Config(format!("expected a comma-separated list, got '{}'", s)));
    }
    Ok(names)
}

/// Comma-separated channel counts, e.g. `4,8,16`.
pub fn parse_channel_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad channel count '{}' in '{}'", t, s)))
        })
        .collect()
}

/// Write the fully resolved options of a run to `<out>/run_config.json`.
pub fn write_run_config<T: Serialize>(out: &Path, command: &str, options: &T) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("run_config.json");
    let doc = serde_json::json!({ "command": command, "options": options });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
