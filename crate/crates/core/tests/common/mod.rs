//! Generators and equivalence experiments shared by the integration suites:
//! random subgraphs with valid level ladders, random metadata records, and
//! the single-case experiment bodies whose worst-case errors the propagation
//! and acceptance suites bound.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relconv_core::dataio::records::{Gender, ImageRecord, Split, ViewPosition};
use relconv_core::model::{original_gcn_layer, Model, ModelConfig, SharingMode};
use relconv_core::relgraph::{default_relation_specs, RelationGraph};
use relconv_core::sampler::{expand_batch, Subgraph};
use relconv_core::sparse::SparseMatrix;
use relconv_core::tensor::Tensor;

pub fn model_config(
    sharing: SharingMode,
    relations: &[&str],
    classes: usize,
    d: usize,
    layers: usize,
    seed: u64,
) -> ModelConfig {
    ModelConfig {
        sharing,
        relations: relations.iter().map(|s| s.to_string()).collect(),
        classes,
        image_size: 8,
        input_channels: 3,
        trunk_channels: vec![2],
        transition_channels: d,
        layers,
        seed,
    }
}

/// Random subgraph with arbitrary nonnegative relation blocks and a valid
/// nonincreasing level ladder.
pub fn random_subgraph(rng: &mut ChaCha8Rng, relations: &[&str], layers: usize) -> Subgraph<f64> {
    let n = rng.gen_range(2..=20);
    let mut level_lens = vec![n];
    for _ in 1..=layers {
        let prev = *level_lens.last().unwrap();
        level_lens.push(rng.gen_range(1..=prev));
    }
    let sub_adjacency = relations
        .iter()
        .map(|_| random_block(rng, n))
        .collect();
    Subgraph {
        nodes: (0..n).collect(),
        node_ids: (0..n).map(|i| format!("n{}", i)).collect(),
        level_lens,
        relation_names: relations.iter().map(|s| s.to_string()).collect(),
        sub_adjacency,
    }
}

/// Random sparse block of nonnegative weights, density 1/4.
pub fn random_block(rng: &mut ChaCha8Rng, n: usize) -> SparseMatrix<f64> {
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if rng.gen_bool(0.25) {
                triplets.push((i, j, rng.gen_range(0.05..1.0)));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, triplets).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Random metadata records; gender and age are drawn per patient so that the
/// person partition always refines the gender partition, as in real data.
pub fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImageRecord> {
    let patients = (n / 2).max(1);
    let genders: Vec<Gender> = (0..patients)
        .map(|_| if rng.gen_bool(0.5) { Gender::M } else { Gender::F })
        .collect();
    let ages: Vec<u32> = (0..patients).map(|_| rng.gen_range(20..80)).collect();
    (0..n)
        .map(|i| {
            let p = rng.gen_range(0..patients);
            ImageRecord {
                image_id: format!("img{:03}", i),
                patient_id: format!("p{}", p),
                age: ages[p],
                gender: genders[p],
                view: if rng.gen_bool(0.5) { ViewPosition::PA } else { ViewPosition::AP },
                labels: (0..2).map(|_| rng.gen_bool(0.3)).collect(),
                split: Split::Train,
            }
        })
        .collect()
}

/// The whole graph as a subgraph: batch rows first, every level covering all
/// nodes. Exhaustively sampled propagation must match this on batch rows.
pub fn full_graph_reference(
    graph: &RelationGraph<f64>,
    batch: &[String],
    layers: usize,
) -> (Subgraph<f64>, Vec<usize>) {
    let n = graph.len();
    let mut order: Vec<usize> = batch.iter().map(|id| graph.node_index(id).unwrap()).collect();
    for i in 0..n {
        if !order.contains(&i) {
            order.push(i);
        }
    }
    let mut inv = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        inv[old] = new;
    }
    let full_adjacency: Vec<SparseMatrix<f64>> = graph
        .relations()
        .iter()
        .map(|rel| {
            let triplets: Vec<(usize, usize, f64)> = rel
                .adjacency
                .triplets()
                .iter()
                .map(|&(r, c, v)| (inv[r], inv[c], v))
                .collect();
            SparseMatrix::from_triplets(n, n, triplets).unwrap()
        })
        .collect();
    let mut level_lens = vec![n; layers];
    level_lens.push(batch.len());
    let sub = Subgraph {
        nodes: order.clone(),
        node_ids: order.iter().map(|&i| graph.node_ids()[i].clone()).collect(),
        level_lens,
        relation_names: graph.relation_names(),
        sub_adjacency: full_adjacency,
    };
    (sub, order)
}

/// Deterministic feature vector keyed by global node index, so differently
/// ordered subgraphs can be fed consistent inputs.
pub fn indexed_feature(idx: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| ((idx * 31 + k * 7) % 13) as f64 / 13.0 - 0.4)
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overwrite every parameter with random values. Fresh models keep their
/// relation heads at zero, which would leave the relation pathways silent;
/// equivalence experiments randomize first so every term participates.
pub fn randomize_parameters(rng: &mut ChaCha8Rng, model: &mut Model<f64>) {
    for p in model.parameters_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-0.9..0.9);
        }
    }
}

/// One matrix-form vs nodewise-form comparison on a random subgraph and
/// model; returns the worst entrywise deviation between the two outputs.
pub fn matrix_vs_nodewise_case(rng: &mut ChaCha8Rng, case: usize) -> f64 {
    let all_relations = ["person", "age", "view"];
    let modes = [
        SharingMode::Independent,
        SharingMode::Pps,
        SharingMode::Aps,
        SharingMode::Baseline,
    ];
    let layers = 1 + case % 2;
    let rels = &all_relations[..1 + case % 3];
    let mode = modes[case % 4];
    let sub = random_subgraph(rng, rels, layers);
    let mut model: Model<f64> =
        Model::new(model_config(mode, rels, 3, 5, layers, case as u64)).unwrap();
    randomize_parameters(rng, &mut model);
    let features = random_features(rng, sub.nodes.len(), 5);
    let fwd = model.propagate(&features, &sub).unwrap();
    let matrix = fwd.tape.value(fwd.probabilities);
    let nodewise = model.propagate_nodewise(&features, &sub).unwrap();
    assert_eq!(matrix.shape(), nodewise.shape());
    matrix
        .data()
        .iter()
        .zip(nodewise.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// One single-relation emulation of the classic normalized graph
/// convolution: a symmetric 0/1 graph with self-loops, the self head
/// silenced, and the planted relation head must reproduce the dense
/// layer. Returns the worst deviation over nodes and classes.
pub fn gcn_emulation_case(rng: &mut ChaCha8Rng, case: u64) -> f64 {
    let (d, c) = (4usize, 3usize);
    let n = rng.gen_range(2..=15);
    // Symmetric 0/1 adjacency with self-loops.
    let mut a = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        a[i][i] = 1.0;
        for j in 0..i {
            if rng.gen_bool(0.4) {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
    }
    let deg: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if a[i][j] > 0.0 {
                triplets.push((i, j, a[i][j] / (deg[i] * deg[j]).sqrt()));
            }
        }
    }
    let sub = Subgraph {
        nodes: (0..n).collect(),
        node_ids: (0..n).map(|i| format!("n{}", i)).collect(),
        level_lens: vec![n, n],
        relation_names: vec!["person".into()],
        sub_adjacency: vec![SparseMatrix::from_triplets(n, n, triplets).unwrap()],
    };
    let mut model: Model<f64> =
        Model::new(model_config(SharingMode::Pps, &["person"], c, d, 1, case)).unwrap();
    let w: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    // Silence the self-connection and plant W on the relation head; the
    // remaining term is exactly one plain graph convolution layer.
    for p in model.parameters_mut() {
        match p.name.as_str() {
            "head1.self.weight" | "head1.self.bias" | "head1.person.bias" => {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
            "head1.person.weight" => {
                for o in 0..c {
                    for i in 0..d {
                        // The linear layer computes x @ w^T, so plant W^T.
                        p.value.data_mut()[o * d + i] = w[i][o];
                    }
                }
            }
            _ => {}
        }
    }
    let features = random_features(rng, n, d);
    let h: Vec<Vec<f64>> = features.data().chunks(d).map(|r| r.to_vec()).collect();
    let fwd = model.propagate(&features, &sub).unwrap();
    let logits = fwd.tape.value(fwd.logits);
    let oracle = original_gcn_layer(&a, &h, &w);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..c {
            let engine = logits.data()[i * c + j].max(0.0);
            worst = worst.max((engine - oracle[i][j]).abs());
        }
    }
    worst
}

/// One exhaustive-sampling vs whole-graph comparison on a random metadata
/// graph; returns the worst deviation over the batch-row outputs.
pub fn exhaustive_vs_full_case(rng: &mut ChaCha8Rng, case: u64) -> f64 {
    let n = rng.gen_range(5..=25);
    let records = random_records(rng, n);
    let graph: RelationGraph<f64> =
        RelationGraph::build(&records, &default_relation_specs()).unwrap();
    let layers = 1 + (case % 2) as usize;
    let b = rng.gen_range(1..=n.min(6));
    let mut ids: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
    for i in 0..b {
        let j = rng.gen_range(i..n);
        ids.swap(i, j);
    }
    let batch: Vec<String> = ids[..b].to_vec();
    let sub = expand_batch(&graph, &batch, layers, graph.max_cluster_size(), case).unwrap();
    let (full, order) = full_graph_reference(&graph, &batch, layers);

    let d = 4;
    let rels = ["person", "age", "gender", "view"];
    let mut model: Model<f64> =
        Model::new(model_config(SharingMode::Pps, &rels, 2, d, layers, case)).unwrap();
    randomize_parameters(rng, &mut model);
    // Features keyed by global node index so both orderings agree.
    let f_sub = Tensor::new(
        vec![sub.nodes.len(), d],
        sub.nodes.iter().flat_map(|&g| indexed_feature(g, d)).collect(),
    )
    .unwrap();
    let f_full = Tensor::new(
        vec![n, d],
        order.iter().flat_map(|&g| indexed_feature(g, d)).collect(),
    )
    .unwrap();
    let p_sub = model.propagate_nodewise(&f_sub, &sub).unwrap();
    let p_full = model.propagate_nodewise(&f_full, &full).unwrap();
    assert_eq!(p_sub.shape(), [b, 2]);
    assert_eq!(p_full.shape(), [b, 2]);
    p_sub
        .data()
        .iter()
        .zip(p_full.data())
        .map(|(a, r)| (a - r).abs())
        .fold(0.0, f64::max)
}
