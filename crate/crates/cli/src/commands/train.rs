//! `train`: end-to-end training over the manifest's training split with
//! per-epoch validation and best-checkpoint selection.

use std::path::PathBuf;

use clap::Args;
use relconv_core::compute::AdamConfig;
use relconv_core::dataio::manifest::DatasetManifest;
use relconv_core::dataio::records::{ImageRecord, Split};
use relconv_core::error::Result;
use relconv_core::model::{checkpoint, ModelConfig, SharingMode};
use relconv_core::relgraph::RelationGraph;
use relconv_core::scalar::Real;
use relconv_core::trainer::{self, TrainConfig};
use serde::Serialize;

use crate::commands::specs_from_names;
use crate::config::{
    parse_channel_list, parse_name_list, pick, pick_required, pick_switch, write_run_config,
    ConfigFile, Precision,
};

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for the checkpoint, log, and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter sharing: independent, pps, aps, or baseline.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated relation keys (person, age, gender, view).
    #[arg(long)]
    relations: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Neighbors sampled per image and relation at every layer.
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Run seed: weight init, shuffling, and sampling all derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Propagation layers (model depth over the graph).
    #[arg(long)]
    layers: Option<usize>,
    /// Trunk stage channels, e.g. 4,8,16 (one stride-2 stage each).
    #[arg(long)]
    trunk_channels: Option<String>,
    /// Channels of the stride-1 transition stage feeding the heads.
    #[arg(long)]
    transition_channels: Option<usize>,
    /// Extra validations every N steps, on top of the per-epoch one.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Validate with exhaustive neighborhoods instead of sampled ones.
    #[arg(long)]
    exhaustive_eval: bool,
    /// Numeric precision: f64 (default) or f32.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Serialize)]
struct Resolved {
    manifest: PathBuf,
    out: PathBuf,
    mode: SharingMode,
    relations: Vec<String>,
    batch_size: usize,
    neighbors: usize,
    epochs: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    weight_decay: f64,
    seed: u64,
    layers: usize,
    trunk_channels: Vec<usize>,
    transition_channels: usize,
    eval_every: Option<usize>,
    exhaustive_eval: bool,
    precision: Precision,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let adam = AdamConfig::default();
    let train = TrainConfig::default();
    let relations = match args.relations {
        Some(s) => parse_name_list(&s)?,
        None => file
            .relations
            .unwrap_or_else(|| ["person", "age", "gender", "view"].iter().map(|s| s.to_string()).collect()),
    };
    let trunk_channels = match args.trunk_channels {
        Some(s) => parse_channel_list(&s)?,
        None => file.trunk_channels.unwrap_or_else(|| vec![4, 8, 16]),
    };
    let mode_name = pick(args.mode, file.mode, "pps".to_string());
    let precision_name = pick(args.precision, file.precision, "f64".to_string());
    let r = Resolved {
        manifest: pick_required(args.manifest, file.manifest, "manifest")?,
        out: args.out.clone(),
        mode: SharingMode::parse(&mode_name)?,
        relations,
        batch_size: pick(args.batch_size, file.batch_size, train.batch_size),
        neighbors: pick(args.neighbors, file.neighbors, train.neighbors),
        epochs: pick(args.epochs, file.epochs, train.epochs),
        lr: pick(args.lr, file.lr, adam.lr),
        beta1: pick(args.beta1, file.beta1, adam.beta1),
        beta2: pick(args.beta2, file.beta2, adam.beta2),
        adam_eps: pick(args.adam_eps, file.adam_eps, adam.eps),
        weight_decay: pick(args.weight_decay, file.weight_decay, adam.weight_decay),
        seed: pick(args.seed, file.seed, 0),
        layers: pick(args.layers, file.layers, 1),
        trunk_channels,
        transition_channels: pick(args.transition_channels, file.transition_channels, 64),
        eval_every: args.eval_every.or(file.eval_every),
        exhaustive_eval: pick_switch(args.exhaustive_eval, file.exhaustive_eval),
        precision: Precision::parse(&precision_name)?,
    };
    write_run_config(&args.out, "train", &r)?;
    match r.precision {
        Precision::F64 => exec::<f64>(&r),
        Precision::F32 => exec::<f32>(&r),
    }
}

fn exec<T: Real>(r: &Resolved) -> Result<()> {
    let manifest = DatasetManifest::load(&r.manifest)?;
    let specs = specs_from_names(&r.relations)?;
    let train_records: Vec<ImageRecord> = manifest
        .split_records(Split::Train)
        .into_iter()
        .cloned()
        .collect();
    let graph: RelationGraph<T> = RelationGraph::build(&train_records, &specs)?;
    let model_config = ModelConfig {
        sharing: r.mode,
        relations: graph.relation_names(),
        classes: manifest.class_names.len(),
        image_size: manifest.image_size,
        input_channels: 3,
        trunk_channels: r.trunk_channels.clone(),
        transition_channels: r.transition_channels,
        layers: r.layers,
        seed: r.seed,
    };
    let train_config = TrainConfig {
        batch_size: r.batch_size,
        neighbors: r.neighbors,
        epochs: r.epochs,
        adam: AdamConfig {
            lr: r.lr,
            beta1: r.beta1,
            beta2: r.beta2,
            eps: r.adam_eps,
            weight_decay: r.weight_decay,
        },
        seed: r.seed,
        eval_every: r.eval_every,
        exhaustive_eval: r.exhaustive_eval,
    };
    let outcome = trainer::train(&train_config, &model_config, &manifest, &graph, &r.out)?;
    println!(
        "{} steps; best validation mean AUC {:.4} at epoch {} (step {})",
        outcome.steps, outcome.best_val_mean_auc, outcome.best_epoch, outcome.best_step
    );
    println!(
        "checkpoint: {}",
        checkpoint::manifest_path(&outcome.checkpoint_stem).display()
    );
    println!("log: {}", outcome.log_path.display());
    Ok(())
}
