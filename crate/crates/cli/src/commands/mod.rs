//! One module per subcommand plus shared plumbing.

pub mod eval;
pub mod gen;
pub mod graph;
pub mod localize;
pub mod sample;
pub mod train;

use relconv_core::dataio::manifest::DatasetManifest;
use relconv_core::dataio::records::{ImageRecord, Split};
use relconv_core::error::{Error, Result};
use relconv_core::model::SharingMode;
use relconv_core::relgraph::{AttributeKey, RelationGraph, RelationSpec};
use relconv_core::scalar::Real;

/// Relation specs from user-facing names (person, age, gender, view, with
/// patient/patient_id accepted as aliases of person).
pub fn specs_from_names(names: &[String]) -> Result<Vec<RelationSpec>> {
    names
        .iter()
        .map(|n| {
            let name = n.trim().to_ascii_lowercase();
            let key = AttributeKey::parse(&name)?;
            Ok(RelationSpec { name, key })
        })
        .collect()
}

/// Training-split graph, extended with the requested split's nodes when it
/// differs (new nodes connect to training nodes only, the inductive setting).
pub fn graph_for_split<T: Real>(
    manifest: &DatasetManifest,
    specs: &[RelationSpec],
    split: Split,
) -> Result<RelationGraph<T>> {
    let train: Vec<ImageRecord> = manifest
        .split_records(Split::Train)
        .into_iter()
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let graph = RelationGraph::build(&train, specs)?;
    if split == Split::Train {
        return Ok(graph);
    }
    let extra: Vec<ImageRecord> = manifest.split_records(split).into_iter().cloned().collect();
    if extra.is_empty() {
        return Err(Error::Validation(format!("split {:?} is empty", split)));
    }
    graph.extend(&extra, false)
}

/// The relation-free baseline never consults adjacency, so sampling
/// neighbors for it would only waste image loads.
pub fn effective_neighbors(sharing: SharingMode, neighbors: usize) -> usize {
    if sharing == SharingMode::Baseline {
        0
    } else {
        neighbors
    }
}
