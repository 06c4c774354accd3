//! `build-graph`: construct per-relation normalized adjacency over one
//! manifest split and dump it for inspection.

use std::path::PathBuf;

use clap::Args;
use relconv_core::dataio::manifest::DatasetManifest;
use relconv_core::dataio::records::ImageRecord;
use relconv_core::error::{Error, Result};
use relconv_core::relgraph::RelationGraph;
use serde::Serialize;

use crate::commands::specs_from_names;
use crate::config::{parse_name_list, parse_split, pick, pick_required, write_run_config, ConfigFile};

#[derive(Args)]
pub struct GraphArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for graph.json and adjacency blobs.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated relation keys (person, age, gender, view).
    #[arg(long)]
    relations: Option<String>,
    /// Split to build over (train, val, test).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Serialize)]
struct Resolved {
    manifest: PathBuf,
    out: PathBuf,
    relations: Vec<String>,
    split: String,
}

fn default_relation_names() -> Vec<String> {
    ["person", "age", "gender", "view"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn run(args: GraphArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let relations = match args.relations {
        Some(s) => parse_name_list(&s)?,
        None => file.relations.unwrap_or_else(default_relation_names),
    };
    let r = Resolved {
        manifest: pick_required(args.manifest, file.manifest, "manifest")?,
        out: args.out.clone(),
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
    graph.dump(&args.out)?;
    write_run_config(&args.out, "build-graph", &r)?;
    println!("built {} relations over {} nodes:", graph.relations().len(), graph.len());
    for rel in graph.relations() {
        println!(
            "  {:<10} {} clusters, {} nonzeros",
            rel.spec.name,
            rel.cluster_keys.len(),
            rel.adjacency.nnz()
        );
    }
    Ok(())
}
