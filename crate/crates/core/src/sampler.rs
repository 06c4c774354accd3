//! Layered neighbor sampling: grow a batch into nested node sets
//! B^(K) ⊆ … ⊆ B^(0) and cut the matching blocks out of each relation's
//! globally normalized adjacency, without renormalizing.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::relgraph::RelationGraph;
use crate::scalar::Real;
use crate::sparse::SparseMatrix;

/// Nested node sets plus per-relation adjacency submatrices over B^(0).
///
/// Nodes are stored in insertion order, so every level set B^(k) is a prefix
/// of `nodes`: the batch occupies the first `level_lens[levels]` slots and
/// each sampling step only appends. Layer blocks are therefore plain prefix
/// cuts of the B^(0) submatrices.
#[derive(Clone, Debug)]
pub struct Subgraph<T: Real> {
    /// Global node indices in insertion order (= B^(0) ordering).
    pub nodes: Vec<usize>,
    /// Node ids aligned with `nodes`.
    pub node_ids: Vec<String>,
    /// `level_lens[k]` = |B^(k)| for k = 0..=levels; nonincreasing in k.
    pub level_lens: Vec<usize>,
    /// Relation names in graph declaration order.
    pub relation_names: Vec<String>,
    /// Per relation: the B^(0) x B^(0) block of the normalized adjacency.
    pub sub_adjacency: Vec<SparseMatrix<T>>,
}

impl<T: Real> Subgraph<T> {
    /// Number of propagation layers K.
    pub fn levels(&self) -> usize {
        self.level_lens.len() - 1
    }

    /// |B^(K)|, the original batch size.
    pub fn batch_len(&self) -> usize {
        self.level_lens[self.levels()]
    }

    /// |B^(k)|.
    pub fn level_len(&self, k: usize) -> usize {
        self.level_lens[k]
    }

    /// The block of relation `r` with rows over B^(k) and columns over
    /// B^(k-1), i.e. the adjacency slice consumed by propagation layer k.
    pub fn layer_block(&self, relation: usize, k: usize) -> Result<SparseMatrix<T>> {
        if k == 0 || k > self.levels() {
            return Err(Error::Validation(format!(
                "layer index {} out of range 1..={}",
                k,
                self.levels()
            )));
        }
        let rows = self.level_lens[k];
        let cols = self.level_lens[k - 1];
        let triplets = self.sub_adjacency[relation]
            .triplets()
            .iter()
            .copied()
            .filter(|&(i, j, _)| i < rows && j < cols)
            .collect();
        SparseMatrix::from_triplets(rows, cols, triplets)
    }

    /// JSON-friendly view for the `sample-debug` subcommand.
    pub fn debug_dump(&self) -> SubgraphDump {
        let levels = (0..self.level_lens.len())
            .rev()
            .map(|k| LevelDump {
                level: k,
                len: self.level_lens[k],
                node_ids: self.node_ids[..self.level_lens[k]].to_vec(),
            })
            .collect();
        let relations = self
            .relation_names
            .iter()
            .zip(&self.sub_adjacency)
            .map(|(name, adj)| RelationBlockDump {
                name: name.clone(),
                nnz: adj.nnz(),
                triplets: adj
                    .triplets()
                    .iter()
                    .map(|&(i, j, v)| (i, j, v.as_f64()))
                    .collect(),
            })
            .collect();
        SubgraphDump {
            batch: self.node_ids[..self.batch_len()].to_vec(),
            levels,
            relations,
        }
    }
}

#[derive(Serialize)]
pub struct SubgraphDump {
    pub batch: Vec<String>,
    /// Level sets ordered B^(K) first, B^(0) last.
    pub levels: Vec<LevelDump>,
    pub relations: Vec<RelationBlockDump>,
}

#[derive(Serialize)]
pub struct LevelDump {
    pub level: usize,
    pub len: usize,
    pub node_ids: Vec<String>,
}

#[derive(Serialize)]
pub struct RelationBlockDump {
    pub name: String,
    pub nnz: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

/// FNV-1a over little-endian words; keys the counter-based sampling RNG so
/// draws depend only on (seed, level, relation, node), not iteration order.
pub fn fnv1a64(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Uniform sample of min(n, d) distinct indices from 0..d by partial
/// Fisher-Yates under a fresh keyed RNG.
fn sample_indices(d: usize, n: usize, key: u64) -> Vec<usize> {
    let m = n.min(d);
    if m == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    for i in 0..m {
        let j = rng.gen_range(i..d);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

/// Grow `batch_ids` outward for `layers` sampling steps, drawing up to
/// `samples` neighbors per (node, relation) without replacement, then
/// extract the per-relation adjacency blocks over the final node set.
pub fn expand_batch<T: Real>(
    graph: &RelationGraph<T>,
    batch_ids: &[String],
    layers: usize,
    samples: usize,
    seed: u64,
) -> Result<Subgraph<T>> {
    if batch_ids.is_empty() {
        return Err(Error::Validation("batch must be nonempty".into()));
    }
    if layers == 0 {
        return Err(Error::Validation("at least one propagation layer is required".into()));
    }
    let mut nodes = Vec::with_capacity(batch_ids.len());
    let mut local: HashMap<usize, usize> = HashMap::with_capacity(batch_ids.len());
    for id in batch_ids {
        let g = graph.node_index(id)?;
        if local.insert(g, nodes.len()).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
        nodes.push(g);
    }
    let mut level_lens = vec![0usize; layers + 1];
    level_lens[layers] = nodes.len();
    for k in (1..=layers).rev() {
        let frontier = level_lens[k];
        if samples > 0 {
            for (r_idx, rel) in graph.relations().iter().enumerate() {
                for local_v in 0..frontier {
                    let v = nodes[local_v];
                    let row = rel.adjacency.row(v);
                    if row.is_empty() {
                        continue;
                    }
                    let key = fnv1a64(&[seed, k as u64, r_idx as u64, v as u64]);
                    for p in sample_indices(row.len(), samples, key) {
                        let j = row[p].1;
                        if let std::collections::hash_map::Entry::Vacant(e) = local.entry(j) {
                            e.insert(nodes.len());
                            nodes.push(j);
                        }
                    }
                }
            }
        }
        level_lens[k - 1] = nodes.len();
    }
    let node_ids = nodes
        .iter()
        .map(|&g| graph.node_ids()[g].clone())
        .collect();
    let sub_adjacency = extract_with_map(graph, &nodes, &local);
    Ok(Subgraph {
        nodes,
        node_ids,
        level_lens,
        relation_names: graph.relation_names(),
        sub_adjacency,
    })
}

/// Per-relation submatrices of the normalized adjacency restricted to
/// `nodes` (in the given order); entries are copied, never renormalized.
pub fn extract_subgraph<T: Real>(
    graph: &RelationGraph<T>,
    nodes: &[usize],
) -> Result<Vec<SparseMatrix<T>>> {
    let mut local: HashMap<usize, usize> = HashMap::with_capacity(nodes.len());
    for (i, &g) in nodes.iter().enumerate() {
        if g >= graph.len() {
            return Err(Error::UnknownNode(format!("index {}", g)));
        }
        if local.insert(g, i).is_some() {
            return Err(Error::DuplicateId(graph.node_ids()[g].clone()));
        }
    }
    Ok(extract_with_map(graph, nodes, &local))
}

fn extract_with_map<T: Real>(
    graph: &RelationGraph<T>,
    nodes: &[usize],
    local: &HashMap<usize, usize>,
) -> Vec<SparseMatrix<T>> {
    graph
        .relations()
        .iter()
        .map(|rel| {
            let mut triplets = Vec::new();
            for (i, &g) in nodes.iter().enumerate() {
                for &(_, j, v) in rel.adjacency.row(g) {
                    if let Some(&lj) = local.get(&j) {
                        triplets.push((i, lj, v));
                    }
                }
            }
            SparseMatrix::from_triplets(nodes.len(), nodes.len(), triplets)
                .expect("submatrix triplets are in bounds and unique by construction")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::records::{Gender, ImageRecord, Split, ViewPosition};
    use crate::relgraph::{default_relation_specs, AttributeKey, RelationSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, patient: &str, age: u32, gender: Gender, view: ViewPosition) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            patient_id: patient.into(),
            age,
            gender,
            view,
            labels: vec![false],
            split: Split::Train,
        }
    }

    fn person_only() -> Vec<RelationSpec> {
        vec![RelationSpec { name: "person".into(), key: AttributeKey::PatientId }]
    }

    /// One patient with four images, one with a single image.
    fn cluster_records() -> Vec<ImageRecord> {
        vec![
            record("v", "a", 30, Gender::M, ViewPosition::PA),
            record("w1", "a", 30, Gender::M, ViewPosition::PA),
            record("w2", "a", 30, Gender::M, ViewPosition::PA),
            record("w3", "a", 30, Gender::M, ViewPosition::PA),
            record("solo", "b", 40, Gender::F, ViewPosition::AP),
        ]
    }

    fn random_graph(rng: &mut ChaCha8Rng) -> (Vec<ImageRecord>, RelationGraph<f64>) {
        let n = rng.gen_range(2..=20);
        let records: Vec<ImageRecord> = (0..n)
            .map(|i| {
                record(
                    &format!("i{}", i),
                    &format!("p{}", rng.gen_range(0..6)),
                    20 + 10 * rng.gen_range(0..3_u32),
                    if rng.gen_bool(0.5) { Gender::M } else { Gender::F },
                    if rng.gen_bool(0.5) { ViewPosition::PA } else { ViewPosition::AP },
                )
            })
            .collect();
        let graph = RelationGraph::build(&records, &default_relation_specs()).unwrap();
        (records, graph)
    }

    #[test]
    fn zero_samples_keeps_batch_only() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &person_only()).unwrap();
        let sub = expand_batch(&graph, &["v".to_string(), "solo".to_string()], 2, 0, 7).unwrap();
        assert_eq!(sub.nodes, vec![0, 4]);
        assert_eq!(sub.level_lens, vec![2, 2, 2]);
        // v and solo are unrelated, so every block is empty.
        for r in 0..sub.sub_adjacency.len() {
            assert_eq!(sub.layer_block(r, 1).unwrap().nnz(), 0);
        }
    }

    #[test]
    fn zero_samples_keeps_intra_batch_edges() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &person_only()).unwrap();
        let sub = expand_batch(&graph, &["v".to_string(), "w1".to_string()], 1, 0, 7).unwrap();
        let block = sub.layer_block(0, 1).unwrap();
        // The submatrix is a restriction, so the v-w1 edge survives.
        assert_eq!(block.get(0, 1), graph.relations()[0].adjacency.get(0, 1));
        assert_eq!(block.get(1, 0), graph.relations()[0].adjacency.get(1, 0));
    }

    #[test]
    fn single_sample_adds_exactly_one_neighbor() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &person_only()).unwrap();
        let sub = expand_batch(&graph, &["v".to_string()], 1, 1, 3).unwrap();
        assert_eq!(sub.level_lens, vec![2, 1]);
        assert!(
            [1, 2, 3].contains(&sub.nodes[1]),
            "sampled node {} must be one of v's three neighbors",
            sub.nodes[1]
        );
    }

    #[test]
    fn seeds_vary_the_pick() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &person_only()).unwrap();
        let mut picked = std::collections::HashSet::new();
        for seed in 0..64 {
            let sub = expand_batch(&graph, &["v".to_string()], 1, 1, seed).unwrap();
            picked.insert(sub.nodes[1]);
        }
        assert!(picked.len() >= 2, "64 seeds picked only {:?}", picked);
    }

    #[test]
    fn exhaustive_sampling_collects_whole_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let (records, graph) = random_graph(&mut rng);
            let n_exhaustive = graph.max_cluster_size();
            let batch: Vec<String> = vec![records[0].image_id.clone()];
            let sub = expand_batch(&graph, &batch, 1, n_exhaustive, 5).unwrap();
            let mut expect: Vec<usize> = vec![0];
            for rel in graph.relations() {
                for &(_, j, _) in rel.adjacency.row(0) {
                    if !expect.contains(&j) {
                        expect.push(j);
                    }
                }
            }
            let mut got = sub.nodes.clone();
            got.sort_unstable();
            expect.sort_unstable();
            assert_eq!(got, expect);
            // Batch rows of the layer block equal the global rows exactly.
            let back: Vec<usize> = sub.nodes.clone();
            for (r, rel) in graph.relations().iter().enumerate() {
                let block = sub.layer_block(r, 1).unwrap();
                let mut global: Vec<(usize, f64)> =
                    rel.adjacency.row(0).iter().map(|&(_, j, v)| (j, v)).collect();
                let mut local: Vec<(usize, f64)> =
                    block.row(0).iter().map(|&(_, j, v)| (back[j], v)).collect();
                global.sort_by(|a, b| a.0.cmp(&b.0));
                local.sort_by(|a, b| a.0.cmp(&b.0));
                assert_eq!(global, local);
            }
        }
    }

    #[test]
    fn expansion_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let (records, graph) = random_graph(&mut rng);
            let batch: Vec<String> = records
                .iter()
                .take(3.min(records.len()))
                .map(|r| r.image_id.clone())
                .collect();
            let a = expand_batch(&graph, &batch, 2, 1, 99).unwrap();
            let b = expand_batch(&graph, &batch, 2, 1, 99).unwrap();
            assert_eq!(a.nodes, b.nodes);
            assert_eq!(a.level_lens, b.level_lens);
            for (ma, mb) in a.sub_adjacency.iter().zip(&b.sub_adjacency) {
                assert_eq!(ma.triplets().len(), mb.triplets().len());
                for (ta, tb) in ma.triplets().iter().zip(mb.triplets()) {
                    assert_eq!((ta.0, ta.1), (tb.0, tb.1));
                    assert_eq!(ta.2.to_bits(), tb.2.to_bits());
                }
            }
        }
    }

    #[test]
    fn expansion_respects_size_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let (records, graph) = random_graph(&mut rng);
            let batch: Vec<String> = records
                .iter()
                .take(rng.gen_range(1..=records.len().min(4)))
                .map(|r| r.image_id.clone())
                .collect();
            let layers = rng.gen_range(1..=3);
            let samples = rng.gen_range(0..=2);
            let sub = expand_batch(&graph, &batch, layers, samples, rng.gen()).unwrap();
            let r = graph.relations().len();
            let bound = batch.len() * (1 + r * samples).pow(layers as u32) + batch.len();
            assert!(sub.nodes.len() <= bound);
            // Level sets are nested prefixes with distinct nodes.
            for k in 1..sub.level_lens.len() {
                assert!(sub.level_lens[k] <= sub.level_lens[k - 1]);
            }
            let mut dedup = sub.nodes.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), sub.nodes.len());
        }
    }

    #[test]
    fn extract_identity_returns_global_matrices() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &default_relation_specs()).unwrap();
        let all: Vec<usize> = (0..graph.len()).collect();
        let subs = extract_subgraph(&graph, &all).unwrap();
        for (sub, rel) in subs.iter().zip(graph.relations()) {
            assert_eq!(sub, &rel.adjacency);
        }
    }

    #[test]
    fn extract_singleton_is_zero() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &default_relation_specs()).unwrap();
        let subs = extract_subgraph(&graph, &[2]).unwrap();
        for sub in &subs {
            assert_eq!(sub.nrows(), 1);
            assert_eq!(sub.nnz(), 0);
        }
    }

    #[test]
    fn extract_cluster_matches_construction_entries() {
        let records = vec![
            record("x", "c", 30, Gender::M, ViewPosition::PA),
            record("i0", "a", 30, Gender::M, ViewPosition::PA),
            record("i1", "a", 31, Gender::F, ViewPosition::AP),
            record("i2", "a", 32, Gender::M, ViewPosition::PA),
        ];
        let graph: RelationGraph<f64> = RelationGraph::build(&records, &person_only()).unwrap();
        let subs = extract_subgraph(&graph, &[1, 2, 3]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert_eq!(subs[0].get(i, j), expect);
            }
        }
    }

    #[test]
    fn extract_rejects_duplicates_and_unknown() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &person_only()).unwrap();
        assert!(matches!(
            extract_subgraph(&graph, &[0, 0]),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            extract_subgraph(&graph, &[99]),
            Err(Error::UnknownNode(_))
        ));
        assert!(matches!(
            expand_batch(&graph, &["nope".to_string()], 1, 1, 0),
            Err(Error::UnknownNode(_))
        ));
    }

    #[test]
    fn debug_dump_orders_levels_from_batch_outward() {
        let graph: RelationGraph<f64> =
            RelationGraph::build(&cluster_records(), &person_only()).unwrap();
        let sub = expand_batch(&graph, &["v".to_string()], 2, 1, 1).unwrap();
        let dump = sub.debug_dump();
        assert_eq!(dump.batch, vec!["v".to_string()]);
        assert_eq!(dump.levels.first().unwrap().level, 2);
        assert_eq!(dump.levels.last().unwrap().level, 0);
        assert_eq!(dump.levels.last().unwrap().len, sub.nodes.len());
        let json = serde_json::to_string(&dump).unwrap();
        assert!(json.contains("\"person\""));
    }
}
