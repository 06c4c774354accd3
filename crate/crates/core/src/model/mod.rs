//! Relation-aware image classifier: a convolutional feature trunk feeds
//! per-relation linear heads whose messages are aggregated over sampled
//! subgraphs, with selectable degrees of parameter sharing.

pub mod checkpoint;
pub mod layers;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{sigmoid_scalar, Gradients, Parameter, Phase, Tape, Val};
use crate::error::{Error, Result};
use crate::sampler::Subgraph;
use crate::scalar::Real;
use crate::tensor::Tensor;

use layers::{Binder, LinearLayer, Trunk};

/// How much of the network is shared across relations.
///
/// - `Independent`: one trunk and one head per relation (and for the
///   self-connection); nothing is shared.
/// - `Pps`: one shared trunk, one head per relation plus the
///   self-connection head.
/// - `Aps`: one shared trunk and a single head serving every relation and
///   the self-connection.
/// - `Baseline`: one trunk, only the self-connection head; adjacency is
///   never consulted, so images are classified in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingMode {
    Independent,
    Pps,
    Aps,
    Baseline,
}

impl SharingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independent" => Ok(SharingMode::Independent),
            "pps" => Ok(SharingMode::Pps),
            "aps" => Ok(SharingMode::Aps),
            "baseline" => Ok(SharingMode::Baseline),
            other => Err(Error::Config(format!("unknown sharing mode '{}'", other))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SharingMode::Independent => "independent",
            SharingMode::Pps => "pps",
            SharingMode::Aps => "aps",
            SharingMode::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for SharingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_input_channels() -> usize {
    3
}

fn default_trunk_channels() -> Vec<usize> {
    vec![4, 8, 16]
}

fn default_transition_channels() -> usize {
    64
}

fn default_layers() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sharing: SharingMode,
    /// Relation names in graph declaration order.
    pub relations: Vec<String>,
    pub classes: usize,
    pub image_size: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Output channels of each stride-2 trunk stage.
    #[serde(default = "default_trunk_channels")]
    pub trunk_channels: Vec<usize>,
    /// Feature dimension D produced by the transition block.
    #[serde(default = "default_transition_channels")]
    pub transition_channels: usize,
    /// Propagation depth K.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::Config("at least one relation is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.relations {
            if name == "self" || name == "shared" {
                return Err(Error::Config(format!(
                    "relation name '{}' is reserved",
                    name
                )));
            }
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate relation name '{}'", name)));
            }
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.trunk_channels.is_empty() {
            return Err(Error::Config("trunk_channels must be nonempty".into()));
        }
        if self.transition_channels == 0 {
            return Err(Error::Config("transition_channels must be >= 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        let min_side = 1usize << self.trunk_channels.len();
        if self.image_size < min_side {
            return Err(Error::Config(format!(
                "image_size {} too small for {} downsampling stages (need >= {})",
                self.image_size,
                self.trunk_channels.len(),
                min_side
            )));
        }
        Ok(())
    }
}

/// Output of a tape-building forward pass. The tape stays alive so callers
/// can attach a loss and backpropagate; `binder` routes gradients back to
/// named parameters.
pub struct Forward<T: Real> {
    pub tape: Tape<T>,
    pub binder: Binder,
    /// Pre-sigmoid outputs for the batch rows, `|B| x C`.
    pub logits: Val,
    /// Sigmoid probabilities for the batch rows, `|B| x C`.
    pub probabilities: Val,
    /// Transition maps of the self-connection trunk for every forwarded row
    /// (`N x D x s x s`, batch rows first); feeds class activation mapping.
    pub maps: Val,
}

/// Output of a trunk-only forward pass.
pub struct MpuForward<T: Real> {
    pub tape: Tape<T>,
    pub binder: Binder,
    /// Pooled feature vectors, `N x D`.
    pub features: Val,
    /// Pre-pooling transition maps, `N x D x s x s`.
    pub maps: Val,
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    trunks: Vec<Trunk<T>>,
    /// `heads[k][slot]`: message map of propagation layer k+1. Slot 0 is the
    /// self-connection; slots 1..=R are relations (absent under Aps and
    /// Baseline, which keep a single head at slot 0).
    heads: Vec<Vec<LinearLayer<T>>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let slots = config.relations.len() + 1;
        let trunk_names: Vec<String> = match config.sharing {
            SharingMode::Independent => std::iter::once("self".to_string())
                .chain(config.relations.iter().cloned())
                .map(|s| format!("trunk.{}", s))
                .collect(),
            _ => vec!["trunk.shared".to_string()],
        };
        let trunks = trunk_names
            .iter()
            .map(|name| {
                Trunk::new(
                    &mut rng,
                    name,
                    config.input_channels,
                    &config.trunk_channels,
                    config.transition_channels,
                )
            })
            .collect();
        let d = config.transition_channels;
        let mut heads = Vec::with_capacity(config.layers);
        for k in 1..=config.layers {
            let out = if k < config.layers { d } else { config.classes };
            let slot_names: Vec<String> = match config.sharing {
                SharingMode::Independent | SharingMode::Pps => std::iter::once("self".to_string())
                    .chain(config.relations.iter().cloned())
                    .collect(),
                SharingMode::Aps => vec!["shared".to_string()],
                SharingMode::Baseline => vec!["self".to_string()],
            };
            debug_assert!(slot_names.len() == slots || slot_names.len() == 1);
            heads.push(
                slot_names
                    .iter()
                    .map(|s| LinearLayer::new(&mut rng, &format!("head{}.{}", k, s), d, out))
                    .collect(),
            );
        }
        Ok(Model { config, trunks, heads })
    }

    fn trunk_index(&self, slot: usize) -> usize {
        match self.config.sharing {
            SharingMode::Independent => slot,
            _ => 0,
        }
    }

    fn head(&self, layer: usize, slot: usize) -> &LinearLayer<T> {
        match self.config.sharing {
            SharingMode::Independent | SharingMode::Pps => &self.heads[layer - 1][slot],
            SharingMode::Aps => &self.heads[layer - 1][0],
            SharingMode::Baseline => {
                debug_assert_eq!(slot, 0, "baseline consults only the self-connection head");
                &self.heads[layer - 1][0]
            }
        }
    }

    /// Weight of the last-layer self-connection head (`C x D`), the matrix
    /// that projects transition maps onto class activations.
    pub fn cam_head_weight(&self) -> &Tensor<T> {
        &self.heads[self.config.layers - 1][0].weight.value
    }

    /// Side length of the transition maps for configured inputs.
    pub fn map_side(&self) -> usize {
        self.trunks[0].map_side(self.config.image_size)
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        for t in &self.trunks {
            t.collect_params(&mut out);
        }
        for layer in &self.heads {
            for h in layer {
                out.push(&h.weight);
                out.push(&h.bias);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for t in &mut self.trunks {
            t.collect_params_mut(&mut out);
        }
        for layer in &mut self.heads {
            for h in layer {
                out.push(&mut h.weight);
                out.push(&mut h.bias);
            }
        }
        out
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for t in &self.trunks {
            t.collect_buffers(&mut out);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for t in &mut self.trunks {
            t.collect_buffers_mut(&mut out);
        }
        out
    }

    /// Route gradients from a backward pass into `Parameter::grad` slots.
    pub fn apply_gradients(&mut self, binder: &Binder, grads: &Gradients<T>) -> Result<()> {
        binder.route_gradients(grads, |f| {
            for p in self.parameters_mut() {
                f(p);
            }
        })
    }

    fn check_subgraph(&self, subgraph: &Subgraph<T>) -> Result<()> {
        if subgraph.relation_names != self.config.relations {
            return Err(Error::Config(format!(
                "model relations {:?} do not match subgraph relations {:?}",
                self.config.relations, subgraph.relation_names
            )));
        }
        if subgraph.levels() != self.config.layers {
            return Err(Error::Config(format!(
                "model has {} propagation layers but subgraph was sampled for {}",
                self.config.layers,
                subgraph.levels()
            )));
        }
        Ok(())
    }

    /// Feature extraction alone: images through the self-connection trunk to
    /// pooled vectors (N x D) and transition maps (N x D x s x s).
    pub fn mpu_forward(&mut self, images: &Tensor<T>, phase: Phase) -> Result<MpuForward<T>> {
        let shape = images.shape().to_vec();
        self.check_images(&shape, shape.first().copied().unwrap_or(0))?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(phase == Phase::Train);
        let x = tape.constant(images.clone());
        let idx = self.trunk_index(0);
        let (features, maps) = self.trunks[idx].forward(&mut tape, &mut binder, x, phase)?;
        Ok(MpuForward {
            tape,
            binder,
            features,
            maps,
        })
    }

    fn check_images(&self, shape: &[usize], rows: usize) -> Result<()> {
        let want = [
            rows,
            self.config.input_channels,
            self.config.image_size,
            self.config.image_size,
        ];
        if shape != want {
            return Err(Error::shape(format!(
                "images {:?} want {:?}",
                shape, want
            )));
        }
        Ok(())
    }

    /// Full forward: trunk features for every subgraph node (batch rows only
    /// under `Baseline`), then layered message passing down to batch-row
    /// probabilities.
    pub fn forward_subgraph(
        &mut self,
        images: &Tensor<T>,
        subgraph: &Subgraph<T>,
        phase: Phase,
    ) -> Result<Forward<T>> {
        self.check_subgraph(subgraph)?;
        let baseline = self.config.sharing == SharingMode::Baseline;
        let rows = if baseline {
            subgraph.batch_len()
        } else {
            subgraph.nodes.len()
        };
        let per_image = self.config.input_channels * self.config.image_size * self.config.image_size;
        let images = if images.shape().first() == Some(&subgraph.nodes.len()) && baseline {
            // Baseline never looks past the batch prefix.
            Tensor::new(
                vec![
                    rows,
                    self.config.input_channels,
                    self.config.image_size,
                    self.config.image_size,
                ],
                images.data()[..rows * per_image].to_vec(),
            )?
        } else {
            images.clone()
        };
        self.check_images(images.shape(), rows)?;

        let mut tape = Tape::new();
        let mut binder = Binder::new(phase == Phase::Train);
        let x = tape.constant(images);
        let trunk_count = self.trunks.len();
        let mut slot_features = Vec::with_capacity(trunk_count);
        let mut batch_maps = None;
        for idx in 0..trunk_count {
            let (features, maps) = self.trunks[idx].forward(&mut tape, &mut binder, x, phase)?;
            if idx == 0 {
                batch_maps = Some(maps);
            }
            slot_features.push(features);
        }
        let maps = batch_maps.expect("at least one trunk exists");
        let (logits, probabilities) =
            self.propagate_on_tape(&mut tape, &mut binder, &slot_features, subgraph)?;
        Ok(Forward {
            tape,
            binder,
            logits,
            probabilities,
            maps,
        })
    }

    /// Message passing over precomputed node features (rows aligned with
    /// `subgraph.nodes`); the trunk is bypassed, as if it were the identity.
    pub fn propagate(&mut self, features: &Tensor<T>, subgraph: &Subgraph<T>) -> Result<Forward<T>> {
        self.check_subgraph(subgraph)?;
        let d = self.config.transition_channels;
        let baseline = self.config.sharing == SharingMode::Baseline;
        let rows = if baseline {
            subgraph.batch_len()
        } else {
            subgraph.nodes.len()
        };
        let features = if baseline && features.shape().first() == Some(&subgraph.nodes.len()) {
            Tensor::new(vec![rows, d], features.data()[..rows * d].to_vec())?
        } else {
            features.clone()
        };
        if features.shape() != [rows, d] {
            return Err(Error::shape(format!(
                "features {:?} want [{}, {}]",
                features.shape(),
                rows,
                d
            )));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let f = tape.constant(features);
        let slot_features = vec![f; self.trunks.len()];
        let (logits, probabilities) =
            self.propagate_on_tape(&mut tape, &mut binder, &slot_features, subgraph)?;
        Ok(Forward {
            tape,
            binder,
            logits,
            probabilities,
            maps: f,
        })
    }

    /// Layered aggregation: at layer k each node in B^(k) receives its own
    /// message through the self-connection head plus, per relation, the
    /// adjacency-weighted messages of its sampled neighbors in B^(k-1).
    /// Interior layers apply relu; the last layer emits logits and their
    /// sigmoid over the batch rows.
    fn propagate_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder,
        slot_features: &[Val],
        subgraph: &Subgraph<T>,
    ) -> Result<(Val, Val)> {
        let baseline = self.config.sharing == SharingMode::Baseline;
        let layers = self.config.layers;
        let mut shared = None;
        for k in 1..=layers {
            let rows = if baseline {
                subgraph.batch_len()
            } else {
                subgraph.level_len(k)
            };
            let self_input = match shared {
                Some(x) => x,
                None => slot_features[self.trunk_index(0)],
            };
            let self_rows = prefix_rows(tape, self_input, rows)?;
            let mut total = self.head(k, 0).forward(tape, binder, self_rows)?;
            if !baseline {
                for (r, _) in self.config.relations.iter().enumerate() {
                    let source = match shared {
                        Some(x) => x,
                        None => slot_features[self.trunk_index(r + 1)],
                    };
                    let cols = subgraph.level_len(k - 1);
                    let source = prefix_rows(tape, source, cols)?;
                    let messages = self.head(k, r + 1).forward(tape, binder, source)?;
                    let block = subgraph.layer_block(r, k)?;
                    let mixed = tape.spmm(Arc::new(block), messages)?;
                    total = tape.add(total, mixed)?;
                }
            }
            if k < layers {
                shared = Some(tape.relu(total));
            } else {
                let logits = total;
                let probabilities = tape.sigmoid(logits);
                return Ok((logits, probabilities));
            }
        }
        unreachable!("layers >= 1 is enforced by ModelConfig::validate")
    }

    /// Reference implementation of the same propagation rule, computed node
    /// by node with plain loops; no tape, no sparse algebra. All slots see
    /// the same `features` (identity trunk), mirroring `propagate`.
    pub fn propagate_nodewise(
        &self,
        features: &Tensor<T>,
        subgraph: &Subgraph<T>,
    ) -> Result<Tensor<T>> {
        self.check_subgraph(subgraph)?;
        let d = self.config.transition_channels;
        let baseline = self.config.sharing == SharingMode::Baseline;
        if features.shape() != [subgraph.nodes.len(), d]
            && !(baseline && features.shape() == [subgraph.batch_len(), d])
        {
            return Err(Error::shape(format!(
                "features {:?} want [{}, {}]",
                features.shape(),
                subgraph.nodes.len(),
                d
            )));
        }
        let layers = self.config.layers;
        let mut current: Vec<Vec<T>> = features
            .data()
            .chunks(d)
            .map(|row| row.to_vec())
            .collect();
        for k in 1..=layers {
            let rows = if baseline {
                subgraph.batch_len()
            } else {
                subgraph.level_len(k)
            };
            let out_dim = if k < layers {
                d
            } else {
                self.config.classes
            };
            let mut next = Vec::with_capacity(rows);
            for i in 0..rows {
                let mut acc = apply_linear(self.head(k, 0), &current[i], out_dim);
                if !baseline {
                    for r in 0..self.config.relations.len() {
                        let head = self.head(k, r + 1);
                        let block = subgraph.layer_block(r, k)?;
                        for &(_, j, a) in block.row(i) {
                            let msg = apply_linear(head, &current[j], out_dim);
                            for (t, m) in acc.iter_mut().zip(msg) {
                                *t += a * m;
                            }
                        }
                    }
                }
                if k < layers {
                    for v in &mut acc {
                        *v = v.max(T::zero());
                    }
                }
                next.push(acc);
            }
            current = next;
        }
        let rows = current.len();
        let mut flat = Vec::with_capacity(rows * self.config.classes);
        for row in current {
            for v in row {
                flat.push(sigmoid_scalar(v));
            }
        }
        Tensor::new(vec![rows, self.config.classes], flat)
    }
}

fn apply_linear<T: Real>(layer: &LinearLayer<T>, x: &[T], out_dim: usize) -> Vec<T> {
    let w = layer.weight.value.data();
    let b = layer.bias.value.data();
    let d = x.len();
    (0..out_dim)
        .map(|o| {
            let mut acc = b[o];
            for (i, &xi) in x.iter().enumerate() {
                acc += w[o * d + i] * xi;
            }
            acc
        })
        .collect()
}

/// First `rows` rows of a 2-d node, avoiding a gather when it is the whole
/// matrix.
fn prefix_rows<T: Real>(tape: &mut Tape<T>, x: Val, rows: usize) -> Result<Val> {
    if tape.value(x).shape()[0] == rows {
        Ok(x)
    } else {
        tape.select_rows(x, (0..rows).collect())
    }
}

/// One layer of the plain single-relation graph convolution, used only as a
/// test oracle: `H' = relu(D^(-1/2) A D^(-1/2) H W)` where `a` already
/// includes self-loops.
pub fn original_gcn_layer<T: Real>(a: &[Vec<T>], h: &[Vec<T>], w: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = a.len();
    let deg: Vec<T> = a.iter().map(|row| row.iter().copied().sum()).collect();
    let inv: Vec<T> = deg
        .iter()
        .map(|&d| {
            if d > T::zero() {
                T::one() / d.sqrt()
            } else {
                T::zero()
            }
        })
        .collect();
    let d_in = h[0].len();
    let d_out = w[0].len();
    let mut agg = vec![vec![T::zero(); d_in]; n];
    for i in 0..n {
        for j in 0..n {
            let c = inv[i] * a[i][j] * inv[j];
            if c != T::zero() {
                for f in 0..d_in {
                    agg[i][f] += c * h[j][f];
                }
            }
        }
    }
    let mut out = vec![vec![T::zero(); d_out]; n];
    for i in 0..n {
        for o in 0..d_out {
            let mut acc = T::zero();
            for f in 0..d_in {
                acc += agg[i][f] * w[f][o];
            }
            out[i][o] = acc.max(T::zero());
        }
    }
    out
}
