//! The flat JSON run configuration shared by `train`, `ablate`, and
//! `grid`. Unknown keys are rejected — they are almost always typos in
//! hyperparameter names — and all schema complaints for a file are
//! listed together, field by field.

use bm3_core::model::DataPointers;
use bm3_core::{
    build_dataset_with_maps, load_feature_matrix, load_interactions, read_index_map,
    split_per_user, Error, FeatureMatrix, MaskMode, Modality, Result, SplitDataset, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_split_seed() -> u64 {
    42
}
fn default_mask_mode() -> MaskMode {
    MaskMode::Element
}
fn default_true() -> bool {
    true
}
fn base() -> TrainConfig {
    TrainConfig::default()
}
fn default_d() -> usize {
    base().d
}
fn default_layers() -> usize {
    base().layers
}
fn default_dropout() -> f64 {
    base().dropout
}
fn default_lambda() -> f64 {
    base().lambda
}
fn default_lr() -> f64 {
    base().lr
}
fn default_batch_size() -> usize {
    base().batch_size
}
fn default_max_epochs() -> usize {
    base().max_epochs
}
fn default_patience() -> usize {
    base().patience
}
fn default_seed() -> u64 {
    base().seed
}
fn default_cutoffs() -> Vec<usize> {
    base().cutoffs
}
fn default_stop_cutoff() -> usize {
    base().stop_cutoff
}
fn default_grid_layers() -> Vec<usize> {
    vec![1, 2]
}
fn default_grid_dropout() -> Vec<f64> {
    vec![0.3, 0.5]
}
fn default_grid_lambda() -> Vec<f64> {
    vec![0.1, 0.01]
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // Dataset artifacts, as produced by `bm3 prepare`.
    pub interactions: PathBuf,
    pub user_index: PathBuf,
    pub item_index: PathBuf,
    #[serde(default)]
    pub visual_features: Option<PathBuf>,
    #[serde(default)]
    pub textual_features: Option<PathBuf>,
    /// Every report, log, and checkpoint of the run lands here.
    pub out_dir: PathBuf,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,

    // Model and optimization settings; defaults mirror `TrainConfig`.
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_mask_mode")]
    pub mask_mode: MaskMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default = "default_stop_cutoff")]
    pub stop_cutoff: usize,
    #[serde(default = "default_true")]
    pub use_visual: bool,
    #[serde(default = "default_true")]
    pub use_textual: bool,
    #[serde(default = "default_true")]
    pub enable_align: bool,
    #[serde(default = "default_true")]
    pub enable_mask: bool,

    // Axes for `bm3 grid`; ignored by the other commands.
    #[serde(default = "default_grid_layers")]
    pub grid_layers: Vec<usize>,
    #[serde(default = "default_grid_dropout")]
    pub grid_dropout: Vec<f64>,
    #[serde(default = "default_grid_lambda")]
    pub grid_lambda: Vec<f64>,
}

const KNOWN_KEYS: &[&str] = &[
    "interactions",
    "user_index",
    "item_index",
    "visual_features",
    "textual_features",
    "out_dir",
    "split_seed",
    "d",
    "layers",
    "dropout",
    "mask_mode",
    "lambda",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "cutoffs",
    "stop_cutoff",
    "use_visual",
    "use_textual",
    "enable_align",
    "enable_mask",
    "grid_layers",
    "grid_dropout",
    "grid_lambda",
];

const REQUIRED_KEYS: &[&str] = &["interactions", "user_index", "item_index", "out_dir"];

/// Loads and validates a run configuration. Schema problems — unknown
/// keys, missing required keys — are collected and reported together.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot read config {}: {}", path.display(), e))
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        Error::InvalidConfig(format!("config {} is not valid JSON: {}", path.display(), e))
    })?;
    let map = value.as_object().ok_or_else(|| {
        Error::InvalidConfig(format!("config {} must be a JSON object", path.display()))
    })?;
    let mut issues: Vec<String> = map
        .keys()
        .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|k| format!("unknown key `{}`", k))
        .collect();
    issues.extend(
        REQUIRED_KEYS
            .iter()
            .filter(|k| !map.contains_key(**k))
            .map(|k| format!("missing required key `{}`", k)),
    );
    if !issues.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "config {}: {}",
            path.display(),
            issues.join("; ")
        )));
    }
    serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {}", path.display(), e)))
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            d: self.d,
            layers: self.layers,
            dropout: self.dropout,
            mask_mode: self.mask_mode,
            lambda: self.lambda,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            cutoffs: self.cutoffs.clone(),
            stop_cutoff: self.stop_cutoff,
            use_visual: self.use_visual,
            use_textual: self.use_textual,
            enable_align: self.enable_align,
            enable_mask: self.enable_mask,
        }
    }

    /// Loads the dataset, split, and feature tables the config points
    /// at, plus canonical path pointers for the checkpoint manifest.
    pub fn load_data(&self) -> Result<(SplitDataset, Vec<FeatureMatrix>, DataPointers)> {
        let records = load_interactions(&self.interactions, '\t')?;
        let user_keys = read_index_map(&self.user_index)?;
        let item_keys = read_index_map(&self.item_index)?;
        let dataset = build_dataset_with_maps(&records, user_keys, item_keys)?;
        let num_items = dataset.num_items();
        let mut features = Vec::new();
        if let Some(path) = &self.visual_features {
            features.push(load_feature_matrix(path, Modality::Visual, Some(num_items))?);
        }
        if let Some(path) = &self.textual_features {
            features.push(load_feature_matrix(path, Modality::Textual, Some(num_items))?);
        }
        let pointers = DataPointers {
            interactions: canonical(&self.interactions)?,
            user_index: canonical(&self.user_index)?,
            item_index: canonical(&self.item_index)?,
            visual_features: self.visual_features.as_deref().map(canonical).transpose()?,
            textual_features: self.textual_features.as_deref().map(canonical).transpose()?,
            split_seed: self.split_seed,
        };
        let split = split_per_user(dataset, self.split_seed)?;
        Ok((split, features, pointers))
    }
}

fn canonical(path: &Path) -> Result<String> {
    let abs = std::fs::canonicalize(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(abs.to_string_lossy().into_owned())
}
