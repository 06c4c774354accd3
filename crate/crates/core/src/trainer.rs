//! Training loop: seeded shuffling, neighbor-sampled batches, weighted
//! binary cross entropy on batch rows, Adam updates, per-epoch validation,
//! and best-checkpoint selection. Every random draw is derived from the run
//! seed, so identical configurations replay bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{adam_step, AdamConfig, Phase};
use crate::dataio::manifest::DatasetManifest;
use crate::dataio::records::Split;
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::model::checkpoint;
use crate::model::{Model, ModelConfig, SharingMode};
use crate::relgraph::RelationGraph;
use crate::sampler::{expand_batch, fnv1a64};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Seed-derivation tags, one per random stream.
const SEED_SHUFFLE: u64 = 1;
const SEED_STEP: u64 = 2;
const SEED_EVAL: u64 = 3;

fn default_batch_size() -> usize {
    16
}

fn default_neighbors() -> usize {
    1
}

fn default_epochs() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Neighbors sampled per image and relation at every layer.
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Extra validations every this many steps, on top of the per-epoch one.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Evaluate with exhaustive neighborhoods instead of sampled ones.
    #[serde(default)]
    pub exhaustive_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            neighbors: default_neighbors(),
            epochs: default_epochs(),
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: None,
            exhaustive_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be >= 1 when set".into()));
        }
        self.adam.validate()
    }
}

/// Per-class AUC on one split; classes that lack positives or negatives are
/// undefined and excluded from the mean.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// Class names with undefined AUC.
    pub undefined: Vec<String>,
    /// Number of images evaluated.
    pub images: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_step: usize,
    pub best_val_mean_auc: f64,
    pub checkpoint_stem: PathBuf,
    pub log_path: PathBuf,
    pub steps: usize,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord<'a> {
    Step {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    Val {
        epoch: usize,
        step: usize,
        auc: &'a [Option<f64>],
        mean_auc: f64,
        undefined: &'a [String],
    },
    Best {
        epoch: usize,
        step: usize,
        mean_auc: f64,
    },
}

/// Keeps the maximum validation score; strict improvement only, so the
/// earliest epoch wins ties.
struct BestTracker {
    best: f64,
    epoch: usize,
    step: usize,
}

impl BestTracker {
    fn new() -> Self {
        BestTracker {
            best: f64::NEG_INFINITY,
            epoch: 0,
            step: 0,
        }
    }

    fn update(&mut self, mean: f64, epoch: usize, step: usize) -> bool {
        if mean > self.best {
            self.best = mean;
            self.epoch = epoch;
            self.step = step;
            true
        } else {
            false
        }
    }
}

/// Stack preprocessed images for the given ids into one `N x 3 x S x S`
/// tensor, in id order. Preprocessing always emits three channels.
pub fn load_images<T: Real>(manifest: &DatasetManifest, ids: &[String]) -> Result<Tensor<T>> {
    let s = manifest.image_size;
    let mut data = Vec::with_capacity(ids.len() * 3 * s * s);
    for id in ids {
        let img = manifest.load_image::<T>(id)?;
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![ids.len(), 3, s, s], data)
}

fn effective_neighbors<T: Real>(model: &Model<T>, neighbors: usize) -> usize {
    // The relation-free baseline never consults adjacency, so sampling
    // neighbors would only waste image loads.
    if model.config.sharing == SharingMode::Baseline {
        0
    } else {
        neighbors
    }
}

/// Run the full training loop. `graph` must cover exactly the training
/// split; validation nodes are grafted on (train-to-val edges only) for the
/// per-epoch evaluation. Returns after writing `train_log.jsonl` and the
/// best checkpoint (`best.json` / `best.bin`) into `out_dir`.
pub fn train<T: Real>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    manifest: &DatasetManifest,
    graph: &RelationGraph<T>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model: Model<T> = Model::new(model_config.clone())?;
    let train_ids = manifest.split_ids(Split::Train);
    if train_ids.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    for id in &train_ids {
        graph.node_index(id)?;
    }
    let val_records: Vec<_> = manifest
        .split_records(Split::Val)
        .into_iter()
        .cloned()
        .collect();
    if val_records.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let val_graph = graph.extend(&val_records, false)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let mut write_record = |rec: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Json { path: log_path.clone(), source: e })?;
        writeln!(log, "{}", line).map_err(|e| Error::io(&log_path, e))
    };

    let checkpoint_stem = out_dir.join("best");
    let mut best = BestTracker::new();
    let mut step = 0usize;
    let mut eval_counter = 0u64;
    let n_train = effective_neighbors(&model, config.neighbors);

    for epoch in 1..=config.epochs {
        let mut order = train_ids.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(fnv1a64(&[config.seed, SEED_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(config.batch_size) {
            step += 1;
            let sub_seed = fnv1a64(&[config.seed, SEED_STEP, step as u64]);
            let sub = expand_batch(graph, batch_ids, model.config.layers, n_train, sub_seed)?;
            let images = load_images::<T>(manifest, &sub.node_ids)?;
            let labels = manifest.labels_for::<T>(batch_ids)?;
            let mut fwd = model.forward_subgraph(&images, &sub, Phase::Train)?;
            let loss = fwd
                .tape
                .weighted_bce(fwd.probabilities, &labels, T::of(1e-7))?;
            let loss_value = fwd.tape.value(loss).scalar_value().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: batch_ids.to_vec(),
                });
            }
            let grads = fwd.tape.backward(loss)?;
            model.apply_gradients(&fwd.binder, &grads)?;
            adam_step(model.parameters_mut(), &config.adam)?;
            write_record(&LogRecord::Step {
                epoch,
                step,
                loss: loss_value,
            })?;
            let mid_eval = config
                .eval_every
                .map(|k| step % k == 0)
                .unwrap_or(false);
            if mid_eval {
                run_validation(
                    config,
                    &mut model,
                    manifest,
                    &val_graph,
                    epoch,
                    step,
                    &mut eval_counter,
                    &mut best,
                    &checkpoint_stem,
                    &mut write_record,
                )?;
            }
        }
        run_validation(
            config,
            &mut model,
            manifest,
            &val_graph,
            epoch,
            step,
            &mut eval_counter,
            &mut best,
            &checkpoint_stem,
            &mut write_record,
        )?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        best_epoch: best.epoch,
        best_step: best.step,
        best_val_mean_auc: best.best,
        checkpoint_stem,
        log_path,
        steps: step,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_validation<T: Real>(
    config: &TrainConfig,
    model: &mut Model<T>,
    manifest: &DatasetManifest,
    val_graph: &RelationGraph<T>,
    epoch: usize,
    step: usize,
    eval_counter: &mut u64,
    best: &mut BestTracker,
    checkpoint_stem: &Path,
    write_record: &mut impl FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    *eval_counter += 1;
    let eval_seed = fnv1a64(&[config.seed, SEED_EVAL, *eval_counter]);
    let report = evaluate_classification(
        model,
        manifest,
        val_graph,
        Split::Val,
        config.neighbors,
        config.exhaustive_eval,
        config.batch_size,
        eval_seed,
    )?;
    write_record(&LogRecord::Val {
        epoch,
        step,
        auc: &report.per_class,
        mean_auc: report.mean,
        undefined: &report.undefined,
    })?;
    if best.update(report.mean, epoch, step) {
        checkpoint::save(model, checkpoint_stem)?;
        write_record(&LogRecord::Best {
            epoch,
            step,
            mean_auc: report.mean,
        })?;
    }
    Ok(())
}

/// Forward every image of `split` through the model in eval mode and score
/// per-class AUC. `graph` must already contain the split's nodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_classification<T: Real>(
    model: &mut Model<T>,
    manifest: &DatasetManifest,
    graph: &RelationGraph<T>,
    split: Split,
    neighbors: usize,
    exhaustive: bool,
    batch_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let ids = manifest.split_ids(split);
    if ids.is_empty() {
        return Err(Error::Validation(format!("split {:?} is empty", split)));
    }
    let n = if exhaustive {
        graph.max_cluster_size()
    } else {
        neighbors
    };
    let n = effective_neighbors(model, n);
    let classes = manifest.class_names.len();
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(ids.len()); classes];
    let mut labels: Vec<Vec<bool>> = vec![Vec::with_capacity(ids.len()); classes];
    for (batch_idx, batch_ids) in ids.chunks(batch_size).enumerate() {
        let sub_seed = fnv1a64(&[seed, batch_idx as u64]);
        let sub = expand_batch(graph, batch_ids, model.config.layers, n, sub_seed)?;
        let images = load_images::<T>(manifest, &sub.node_ids)?;
        let fwd = model.forward_subgraph(&images, &sub, Phase::Eval)?;
        let probs = fwd.tape.value(fwd.probabilities).data();
        for (row, id) in batch_ids.iter().enumerate() {
            let record = manifest
                .record(id)
                .ok_or_else(|| Error::UnknownNode(id.clone()))?;
            for c in 0..classes {
                scores[c].push(probs[row * classes + c].as_f64());
                labels[c].push(record.labels[c]);
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| auc(&scores[c], &labels[c]))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let undefined = per_class
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(c, _)| manifest.class_names[c].clone())
        .collect();
    Ok(EvalReport {
        per_class,
        mean,
        undefined,
        images: ids.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::relgraph::default_relation_specs;

    fn tiny_dataset(dir: &Path) -> (DatasetManifest, RelationGraph<f64>) {
        let cfg = SyntheticConfig {
            patients: 30,
            images_per_patient: (2, 4),
            image_size: 16,
            classes: 3,
            ..SyntheticConfig::default()
        };
        let (manifest, _) = generate_synthetic(&cfg, 7, dir).unwrap();
        let train: Vec<_> = manifest
            .split_records(Split::Train)
            .into_iter()
            .cloned()
            .collect();
        let graph = RelationGraph::build(&train, &default_relation_specs()).unwrap();
        (manifest, graph)
    }

    fn tiny_model_config(manifest: &DatasetManifest, graph: &RelationGraph<f64>) -> ModelConfig {
        ModelConfig {
            sharing: SharingMode::Pps,
            relations: graph.relation_names(),
            classes: manifest.class_names.len(),
            image_size: manifest.image_size,
            input_channels: 3,
            trunk_channels: vec![2, 3],
            transition_channels: 8,
            layers: 1,
            seed: 5,
        }
    }

    #[test]
    fn best_tracker_keeps_earliest_tie() {
        let mut t = BestTracker::new();
        assert!(t.update(0.5, 1, 10));
        assert!(t.update(0.7, 2, 20));
        assert!(!t.update(0.7, 3, 30));
        assert!(!t.update(0.6, 4, 40));
        assert_eq!((t.epoch, t.step), (2, 20));
    }

    #[test]
    fn training_reduces_loss_and_saves_checkpoint() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let (manifest, graph) = tiny_dataset(data_dir.path());
        let model_config = tiny_model_config(&manifest, &graph);
        let config = TrainConfig {
            batch_size: 8,
            neighbors: 1,
            epochs: 6,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            seed: 3,
            eval_every: None,
            exhaustive_eval: false,
        };
        let outcome = train(&config, &model_config, &manifest, &graph, out_dir.path()).unwrap();
        assert!(outcome.best_epoch >= 1);
        assert!(checkpoint::manifest_path(&outcome.checkpoint_stem).exists());
        assert!(checkpoint::blob_path(&outcome.checkpoint_stem).exists());
        // First vs last steps of the log: loss must drop.
        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let losses: Vec<f64> = log
            .lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .filter(|v| v["kind"] == "step")
            .map(|v| v["loss"].as_f64().unwrap())
            .collect();
        assert!(losses.len() >= 40, "expected at least 40 steps");
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "loss should fall: first-10 mean {} vs last-10 mean {}",
            head,
            tail
        );
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let data_dir = tempfile::tempdir().unwrap();
        let (manifest, graph) = tiny_dataset(data_dir.path());
        let model_config = tiny_model_config(&manifest, &graph);
        let config = TrainConfig {
            batch_size: 8,
            epochs: 2,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            seed: 11,
            ..TrainConfig::default()
        };
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let a = train(&config, &model_config, &manifest, &graph, out_a.path()).unwrap();
        let b = train(&config, &model_config, &manifest, &graph, out_b.path()).unwrap();
        let log_a = std::fs::read(&a.log_path).unwrap();
        let log_b = std::fs::read(&b.log_path).unwrap();
        assert_eq!(log_a, log_b);
        let ck_a = std::fs::read(checkpoint::blob_path(&a.checkpoint_stem)).unwrap();
        let ck_b = std::fs::read(checkpoint::blob_path(&b.checkpoint_stem)).unwrap();
        assert_eq!(ck_a, ck_b);
        let mj_a = std::fs::read(checkpoint::manifest_path(&a.checkpoint_stem)).unwrap();
        let mj_b = std::fs::read(checkpoint::manifest_path(&b.checkpoint_stem)).unwrap();
        assert_eq!(mj_a, mj_b);
    }

    #[test]
    fn evaluation_covers_every_image_once() {
        let data_dir = tempfile::tempdir().unwrap();
        let (manifest, graph) = tiny_dataset(data_dir.path());
        let model_config = tiny_model_config(&manifest, &graph);
        let mut model: Model<f64> = Model::new(model_config).unwrap();
        let val_records: Vec<_> = manifest
            .split_records(Split::Val)
            .into_iter()
            .cloned()
            .collect();
        let val_graph = graph.extend(&val_records, false).unwrap();
        let report = evaluate_classification(
            &mut model,
            &manifest,
            &val_graph,
            Split::Val,
            1,
            false,
            8,
            42,
        )
        .unwrap();
        assert_eq!(report.images, manifest.split_ids(Split::Val).len());
        assert_eq!(report.per_class.len(), manifest.class_names.len());
        for (c, v) in report.per_class.iter().enumerate() {
            if v.is_none() {
                assert!(report.undefined.contains(&manifest.class_names[c]));
            }
        }
    }

    #[test]
    fn empty_validation_split_is_rejected() {
        let data_dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            patients: 6,
            images_per_patient: (2, 3),
            image_size: 16,
            classes: 2,
            split: (1.0, 0.0, 0.0),
            ..SyntheticConfig::default()
        };
        let (manifest, _) = generate_synthetic(&cfg, 1, data_dir.path()).unwrap();
        let train_records: Vec<_> = manifest
            .split_records(Split::Train)
            .into_iter()
            .cloned()
            .collect();
        let graph: RelationGraph<f64> =
            RelationGraph::build(&train_records, &default_relation_specs()).unwrap();
        let model_config = tiny_model_config(&manifest, &graph);
        let config = TrainConfig::default();
        let err = train(&config, &model_config, &manifest, &graph, data_dir.path());
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
