//! Relation graphs over image records: every metadata attribute induces an
//! equivalence partition whose clusters form disjoint complete subgraphs,
//! stored as symmetric-normalized sparse adjacency.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::records::ImageRecord;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sparse::SparseMatrix;

/// Which record attribute two images must share to be related.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKey {
    PatientId,
    Age,
    Gender,
    View,
}

impl AttributeKey {
    pub fn value(&self, r: &ImageRecord) -> String {
        match self {
            AttributeKey::PatientId => r.patient_id.clone(),
            AttributeKey::Age => r.age.to_string(),
            AttributeKey::Gender => format!("{:?}", r.gender),
            AttributeKey::View => format!("{:?}", r.view),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "person" | "patient" | "patient_id" => Ok(AttributeKey::PatientId),
            "age" => Ok(AttributeKey::Age),
            "gender" => Ok(AttributeKey::Gender),
            "view" => Ok(AttributeKey::View),
            other => Err(Error::Config(format!("unknown relation attribute '{}'", other))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub key: AttributeKey,
}

/// The person/age/gender/view quartet.
pub fn default_relation_specs() -> Vec<RelationSpec> {
    [
        ("person", AttributeKey::PatientId),
        ("age", AttributeKey::Age),
        ("gender", AttributeKey::Gender),
        ("view", AttributeKey::View),
    ]
    .into_iter()
    .map(|(name, key)| RelationSpec { name: name.into(), key })
    .collect()
}

#[derive(Clone, Debug)]
pub struct Relation<T: Real> {
    pub spec: RelationSpec,
    /// Node index -> cluster id.
    pub partition: Vec<usize>,
    /// Cluster id -> attribute value that formed it.
    pub cluster_keys: Vec<String>,
    pub adjacency: SparseMatrix<T>,
}

/// Immutable multigraph: one normalized adjacency per relation over a fixed
/// node order. The self-connection is implicit and never materialized.
#[derive(Clone, Debug)]
pub struct RelationGraph<T: Real> {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    relations: Vec<Relation<T>>,
}

impl<T: Real> RelationGraph<T> {
    /// Partition `records` by each spec's attribute and normalize the
    /// resulting cluster graphs. Node order follows input order.
    pub fn build(records: &[ImageRecord], specs: &[RelationSpec]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("cannot build a graph over zero records".into()));
        }
        if specs.is_empty() {
            return Err(Error::Validation("at least one relation is required".into()));
        }
        let mut node_ids = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        for r in records {
            if index.insert(r.image_id.clone(), node_ids.len()).is_some() {
                return Err(Error::DuplicateId(r.image_id.clone()));
            }
            node_ids.push(r.image_id.clone());
        }
        let mut relations = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut cluster_of: HashMap<String, usize> = HashMap::new();
            let mut cluster_keys = Vec::new();
            let mut partition = Vec::with_capacity(records.len());
            for r in records {
                let key = spec.key.value(r);
                let id = *cluster_of.entry(key.clone()).or_insert_with(|| {
                    cluster_keys.push(key);
                    cluster_keys.len() - 1
                });
                partition.push(id);
            }
            let adjacency = normalize_adjacency(&partition)?;
            relations.push(Relation {
                spec: spec.clone(),
                partition,
                cluster_keys,
                adjacency,
            });
        }
        Ok(RelationGraph { node_ids, index, relations })
    }

    /// Append new records, connect each to the existing members of its
    /// attribute cluster (and to other new members when `include_new_new`),
    /// and renormalize over the extended edge set.
    pub fn extend(&self, new_records: &[ImageRecord], include_new_new: bool) -> Result<Self> {
        let n_old = self.node_ids.len();
        let n_total = n_old + new_records.len();
        let mut node_ids = self.node_ids.clone();
        let mut index = self.index.clone();
        for r in new_records {
            if index.insert(r.image_id.clone(), node_ids.len()).is_some() {
                return Err(Error::DuplicateId(r.image_id.clone()));
            }
            node_ids.push(r.image_id.clone());
        }
        let mut relations = Vec::with_capacity(self.relations.len());
        for rel in &self.relations {
            let mut cluster_of: HashMap<String, usize> = rel
                .cluster_keys
                .iter()
                .enumerate()
                .map(|(i, k)| (k.clone(), i))
                .collect();
            let mut cluster_keys = rel.cluster_keys.clone();
            let mut partition = rel.partition.clone();

            // Existing edge structure, as neighbor lists.
            let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n_total];
            for &(i, j, _) in rel.adjacency.triplets() {
                if i < j {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
            // Old members per cluster, in node order.
            let mut old_members: Vec<Vec<usize>> = vec![Vec::new(); cluster_keys.len()];
            for (node, &cl) in rel.partition.iter().enumerate() {
                old_members[cl].push(node);
            }
            let mut new_members: Vec<Vec<usize>> = vec![Vec::new(); cluster_keys.len()];
            for (offset, r) in new_records.iter().enumerate() {
                let node = n_old + offset;
                let key = rel.spec.key.value(r);
                let cl = *cluster_of.entry(key.clone()).or_insert_with(|| {
                    cluster_keys.push(key);
                    old_members.push(Vec::new());
                    new_members.push(Vec::new());
                    cluster_keys.len() - 1
                });
                partition.push(cl);
                for &other in &old_members[cl] {
                    neighbors[node].push(other);
                    neighbors[other].push(node);
                }
                if include_new_new {
                    for &other in &new_members[cl] {
                        neighbors[node].push(other);
                        neighbors[other].push(node);
                    }
                }
                new_members[cl].push(node);
            }
            let adjacency = normalize_from_neighbors(&neighbors)?;
            relations.push(Relation {
                spec: rel.spec.clone(),
                partition,
                cluster_keys,
                adjacency,
            });
        }
        Ok(RelationGraph { node_ids, index, relations })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn relations(&self) -> &[Relation<T>] {
        &self.relations
    }

    pub fn relation_names(&self) -> Vec<String> {
        self.relations.iter().map(|r| r.spec.name.clone()).collect()
    }

    /// Largest cluster size over all relations; an exhaustive-sampling bound.
    pub fn max_cluster_size(&self) -> usize {
        let mut best = 1;
        for rel in &self.relations {
            let mut counts = vec![0usize; rel.cluster_keys.len()];
            for &cl in &rel.partition {
                counts[cl] += 1;
            }
            best = best.max(counts.iter().copied().max().unwrap_or(1));
        }
        best
    }

    /// JSON partitions plus one binary triplet file per relation.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        #[derive(Serialize)]
        struct RelationDump<'a> {
            name: &'a str,
            key: AttributeKey,
            cluster_keys: &'a [String],
            partition: &'a [usize],
            adjacency_file: String,
            nnz: usize,
        }
        #[derive(Serialize)]
        struct GraphDump<'a> {
            node_ids: &'a [String],
            relations: Vec<RelationDump<'a>>,
        }
        let mut dump = GraphDump { node_ids: &self.node_ids, relations: Vec::new() };
        for rel in &self.relations {
            let file = format!("adjacency_{}.bin", rel.spec.name);
            rel.adjacency.write_binary(&dir.join(&file))?;
            dump.relations.push(RelationDump {
                name: &rel.spec.name,
                key: rel.spec.key,
                cluster_keys: &rel.cluster_keys,
                partition: &rel.partition,
                adjacency_file: file,
                nnz: rel.adjacency.nnz(),
            });
        }
        let path = dir.join("graph.json");
        let json = serde_json::to_string_pretty(&dump)
            .map_err(|e| Error::Json { path: path.clone(), source: e })?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Symmetric normalization of a cluster graph given only its partition:
/// within a cluster of size m every off-diagonal entry is `1/(m-1)`
/// (each node's degree is m-1); singletons contribute nothing.
pub fn normalize_adjacency<T: Real>(partition: &[usize]) -> Result<SparseMatrix<T>> {
    let n = partition.len();
    let n_clusters = partition.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (node, &cl) in partition.iter().enumerate() {
        members[cl].push(node);
    }
    let mut triplets = Vec::new();
    for i in 0..n {
        let mates = &members[partition[i]];
        if mates.len() < 2 {
            continue;
        }
        let v = T::of(1.0 / (mates.len() as f64 - 1.0));
        for &j in mates {
            if j != i {
                triplets.push((i, j, v));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

/// `D^(-1/2) A D^(-1/2)` for an arbitrary undirected edge structure given as
/// neighbor lists; zero-degree rows stay zero.
fn normalize_from_neighbors<T: Real>(neighbors: &[Vec<usize>]) -> Result<SparseMatrix<T>> {
    let n = neighbors.len();
    let inv_sqrt: Vec<f64> = neighbors
        .iter()
        .map(|list| {
            if list.is_empty() {
                0.0
            } else {
                1.0 / (list.len() as f64).sqrt()
            }
        })
        .collect();
    let mut triplets = Vec::new();
    for (i, list) in neighbors.iter().enumerate() {
        let mut sorted = list.clone();
        sorted.sort_unstable();
        for &j in &sorted {
            triplets.push((i, j, T::of(inv_sqrt[i] * inv_sqrt[j])));
        }
    }
    SparseMatrix::from_triplets(n, n, triplets)
}
