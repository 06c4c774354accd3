//! `sample-debug`: expand one batch through the layered neighbor sampler
//! and print the resulting subgraph as JSON.

use std::path::PathBuf;

use clap::Args;
use relconv_core::dataio::manifest::DatasetManifest;
use relconv_core::dataio::records::ImageRecord;
use relconv_core::error::{Error, Result};
use relconv_core::relgraph::RelationGraph;
use relconv_core::sampler::expand_batch;
use serde::Serialize;

use crate::commands::specs_from_names;
use crate::config::{
    parse_name_list, parse_split, pick, pick_required, write_run_config, ConfigFile,
};

#[derive(Args)]
pub struct SampleArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated image ids forming the batch.
    #[arg(long)]
    batch: Option<String>,
    /// Sampling depth (graph layers).
    #[arg(long)]
    layers: Option<usize>,
    /// Neighbors sampled per image and relation at every layer.
    #[arg(long)]
    neighbors: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated relation keys (person, age, gender, view).
    #[arg(long)]
    relations: Option<String>,
    /// Split whose records form the graph (train, val, test).
    #[arg(long)]
    split: Option<String>,
    /// Optional directory; also writes subgraph.json and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Resolved {
    manifest: PathBuf,
    batch: Vec<String>,
    layers: usize,
    neighbors: usize,
    seed: u64,
    relations: Vec<String>,
    split: String,
}

pub fn run(args: SampleArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let batch = match args.batch {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect(),
        None => file.batch.unwrap_or_default(),
    };
    if batch.is_empty() {
        return Err(Error::Config("--batch needs at least one image id".into()));
    }
    let relations = match args.relations {
        Some(s) => parse_name_list(&s)?,
        None => file.relations.unwrap_or_else(|| {
            ["person", "age", "gender", "view"].iter().map(|s| s.to_string()).collect()
        }),
    };
    let r = Resolved {
        manifest: pick_required(args.manifest, file.manifest, "manifest")?,
        batch,
        layers: pick(args.layers, file.layers, 1),
        neighbors: pick(args.neighbors, file.neighbors, 1),
        seed: pick(args.seed, file.seed, 0),
        relations,
        split: pick(args.split, file.split, "train".to_string()),
    };
    let split = parse_split(&r.split)?;
    let manifest = DatasetManifest::load(&r.manifest)?;
    let records: Vec<ImageRecord> = manifest.split_records(split).into_iter().cloned().collect();
    if records.is_empty() {
        return Err(Error::Validation(format!("split {:?} is empty", split)));
    }
    let specs = specs_from_names(&r.relations)?;
    let graph: RelationGraph<f64> = RelationGraph::build(&records, &specs)?;
    let sub = expand_batch(&graph, &r.batch, r.layers, r.neighbors, r.seed)?;
    let dump = sub.debug_dump();
    let text = serde_json::to_string_pretty(&dump)
        .map_err(|e| Error::Json { path: PathBuf::from("subgraph.json"), source: e })?;
    println!("{}", text);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("subgraph.json");
        std::fs::write(&path, format!("{}\n", text)).map_err(|e| Error::io(&path, e))?;
        write_run_config(out, "sample-debug", &r)?;
    }
    Ok(())
}
