//! The training loop: mini-batches over positive interactions with a
//! forward pass, hand-rolled backward pass, and an Adam step per
//! batch; validation once per epoch; early stopping on Recall at the
//! stop cutoff with checkpoint-on-improvement; final test metrics
//! computed from the best checkpoint *reloaded from disk*, so a later
//! `evaluate` of the same checkpoint reproduces them bit for bit.
//!
//! Every random decision (shuffles, dropout masks) draws from its own
//! stream derived from the run seed plus epoch/batch coordinates, so
//! runs with equal seeds produce byte-identical logs and reports.

use crate::data::{items_by_user, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricsReport, Phase};
use crate::fmat::{load_feature_matrix, FeatureMatrix, Modality};
use crate::graph::build_adjacency;
use crate::loss::{total_loss_backward, LossBreakdown, LossConfig};
use crate::model::{
    forward, load_checkpoint, save_checkpoint, CheckpointManifest, DataPointers, ModelParams,
};
use crate::nn::{AdamState, MaskMode};
use crate::rng;
use rand::seq::SliceRandom;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub d: usize,
    pub layers: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub cutoffs: Vec<usize>,
    /// The cutoff whose Recall drives early stopping and model choice.
    pub stop_cutoff: usize,
    /// Ablation switches: withhold a modality's feature table entirely
    /// (its projection is then never created) or disable a loss term.
    pub use_visual: bool,
    pub use_textual: bool,
    pub enable_align: bool,
    pub enable_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            layers: 1,
            dropout: 0.5,
            mask_mode: MaskMode::Element,
            lambda: 0.01,
            lr: 1e-3,
            batch_size: 2048,
            max_epochs: 1000,
            patience: 20,
            seed: 42,
            cutoffs: vec![10, 20],
            stop_cutoff: 20,
            use_visual: true,
            use_textual: true,
            enable_align: true,
            enable_mask: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, has_modalities: bool) -> Result<()> {
        let bad = |name: &'static str, reason: String| {
            Err(Error::InvalidParameter { name, reason })
        };
        if self.d == 0 {
            return bad("d", "embedding dimension must be at least 1".into());
        }
        if self.layers == 0 {
            return bad("layers", "at least one propagation layer is required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} is outside [0, 1)", self.dropout));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("lambda", format!("{} must be finite and non-negative", self.lambda));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("lr", format!("{} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "batches must hold at least one pair".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "at least one epoch is required".into());
        }
        if self.patience == 0 {
            return bad("patience", "patience must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(
                "patience",
                format!("{} exceeds max_epochs {}", self.patience, self.max_epochs),
            );
        }
        EvalConfig::new(self.cutoffs.clone())?;
        if !self.cutoffs.contains(&self.stop_cutoff) {
            return bad(
                "stop_cutoff",
                format!("{} is not among the cutoffs {:?}", self.stop_cutoff, self.cutoffs),
            );
        }
        if (self.enable_align || self.enable_mask) && !has_modalities {
            return Err(Error::InvalidConfig(
                "alignment/masking losses are enabled but no feature tables were provided"
                    .into(),
            ));
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            enable_align: self.enable_align,
            enable_mask: self.enable_mask,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Validation Recall at the stop cutoff of the best epoch — the
    /// maximum of the validation trace.
    pub best_valid_r20: f64,
    pub best_valid: MetricsReport,
    pub test_metrics: MetricsReport,
    /// Mean training loss of each completed epoch, in epoch order.
    pub loss_trace: Vec<LossBreakdown>,
    /// Wall-clock seconds spent in each epoch's optimization loop
    /// (forward, backward, Adam), one entry per completed epoch.
    pub epoch_seconds: Vec<f64>,
    pub checkpoint_dir: String,
}

/// One metrics-log object per epoch: the epoch's mean training loss,
/// its validation metrics, and the wall-clock seconds of its
/// optimization loop.
#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: usize,
    batches: usize,
    loss: &'a LossBreakdown,
    valid: &'a MetricsReport,
    seconds: f64,
}

/// The final log object: test metrics of the reloaded best epoch.
#[derive(Serialize)]
struct TestLine<'a> {
    epoch: usize,
    test: &'a MetricsReport,
}

/// Returns the log with every `seconds` field removed — the
/// deterministic view of a metrics log. Two runs with identical
/// configuration and seed produce identical output here even though
/// their wall-clock timings differ.
pub fn log_without_timing(content: &str) -> Result<String> {
    let mut out = String::with_capacity(content.len());
    for line in content.lines().filter(|l| !l.trim().is_empty()) {
        let mut value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Json { path: "<metrics log>".into(), source: e })?;
        if let Some(map) = value.as_object_mut() {
            map.remove("seconds");
        }
        out.push_str(&value.to_string());
        out.push('\n');
    }
    Ok(out)
}

/// Shuffles the training edges for one epoch and chunks them into
/// batches. Every edge appears in exactly one batch.
pub fn epoch_batches(
    edges: &[(u32, u32)],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<(u32, u32)>> {
    let mut shuffled = edges.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, "shuffle", &[epoch as u64]));
    shuffled.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn mean_loss(sums: &LossBreakdown, batches: usize) -> LossBreakdown {
    let n = batches as f64;
    LossBreakdown {
        rec: sums.rec / n,
        align: sums.align / n,
        mask: sums.mask / n,
        reg: sums.reg / n,
        total: sums.total / n,
    }
}

fn write_line<T: Serialize>(
    log: &mut std::io::BufWriter<std::fs::File>,
    path: &Path,
    value: &T,
) -> Result<()> {
    let s = serde_json::to_string(value)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    writeln!(log, "{}", s).map_err(|e| Error::io(path, e))?;
    log.flush().map_err(|e| Error::io(path, e))
}

/// Trains a model on the split's training edges and writes into
/// `out_dir`:
///
/// * `metrics.ndjson` — one object per epoch (mean training loss,
///   validation metrics, wall-clock seconds), plus a final test
///   object;
/// * `checkpoint/` — tensors and manifest of the best epoch so far.
///
/// Feature tables whose modality is switched off in the config
/// (`use_visual`, `use_textual`) are withheld before the model is
/// built, so the corresponding projections never exist.
///
/// Returns the report with the best validation metrics and the test
/// metrics of the reloaded best checkpoint.
pub fn train(
    cfg: &TrainConfig,
    split: &SplitDataset,
    features: &[FeatureMatrix],
    out_dir: &Path,
    data: Option<DataPointers>,
) -> Result<TrainReport> {
    let kept: Vec<FeatureMatrix>;
    let features: &[FeatureMatrix] = if cfg.use_visual && cfg.use_textual {
        features
    } else {
        kept = features
            .iter()
            .filter(|f| match f.modality {
                Modality::Visual => cfg.use_visual,
                Modality::Textual => cfg.use_textual,
                Modality::Other(_) => true,
            })
            .cloned()
            .collect();
        &kept
    };
    cfg.validate(!features.is_empty())?;
    let nu = split.num_users();
    let ni = split.num_items();
    if split.train.is_empty() {
        return Err(Error::EmptyDataset);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("metrics.ndjson");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );

    let adj = build_adjacency(nu, ni, &split.train)?;
    let train_by_user = items_by_user(&split.train, nu);
    let valid_by_user = items_by_user(&split.valid, nu);
    let test_by_user = items_by_user(&split.test, nu);
    let exclude_for_test: Vec<Vec<u32>> = train_by_user
        .iter()
        .zip(&valid_by_user)
        .map(|(t, v)| t.iter().chain(v).copied().collect())
        .collect();

    let modality_dims: Vec<(Modality, usize)> =
        features.iter().map(|f| (f.modality.clone(), f.values.cols())).collect();
    let mut params = ModelParams::init(nu, ni, cfg.d, cfg.layers, &modality_dims, cfg.seed)?;
    params.zero_grads();
    let mut adam = AdamState::new(cfg.lr)?;
    let loss_cfg = cfg.loss_config();
    let eval_cfg = EvalConfig::new(cfg.cutoffs.clone())?;
    let checkpoint_dir = out_dir.join("checkpoint");
    let manifest_for = |epoch: usize| CheckpointManifest {
        d: cfg.d,
        layers: cfg.layers,
        dropout: cfg.dropout,
        lambda: cfg.lambda,
        modalities: features.iter().map(|f| f.modality.tag().to_string()).collect(),
        dataset_fingerprint: split.dataset.fingerprint(),
        epoch,
        cutoffs: cfg.cutoffs.clone(),
        data: data.clone(),
    };

    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_valid: Option<MetricsReport> = None;
    let mut bad_evals = 0usize;
    let mut epochs_run = 0usize;
    let mut stopped_early = false;
    let mut loss_trace: Vec<LossBreakdown> = Vec::new();
    let mut epoch_seconds: Vec<f64> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let clock = std::time::Instant::now();
        let batches = epoch_batches(&split.train, cfg.batch_size, cfg.seed, epoch);
        let mut sums = LossBreakdown { rec: 0.0, align: 0.0, mask: 0.0, reg: 0.0, total: 0.0 };
        for (b, batch) in batches.iter().enumerate() {
            let dropout_seed = rng::derive_seed(cfg.seed, "dropout", &[epoch as u64, b as u64]);
            let state =
                forward(&params, &adj, features, cfg.dropout, cfg.mask_mode, dropout_seed)?;
            let out = total_loss_backward(&mut params, &adj, features, &state, batch, &loss_cfg)?;
            if !out.total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1 });
            }
            adam.step(params.tensors_mut());
            sums.rec += out.rec;
            sums.align += out.align;
            sums.mask += out.mask;
            sums.reg += out.reg;
            sums.total += out.total;
        }
        let seconds = clock.elapsed().as_secs_f64();
        epoch_seconds.push(seconds);
        let epoch_loss = mean_loss(&sums, batches.len());

        let state = forward(&params, &adj, features, 0.0, cfg.mask_mode, 0)?;
        let valid = evaluate(Phase::Valid, &state, &valid_by_user, &train_by_user, &eval_cfg)?;
        write_line(
            &mut log,
            &log_path,
            &EpochLine { epoch, batches: batches.len(), loss: &epoch_loss, valid: &valid, seconds },
        )?;
        loss_trace.push(epoch_loss);

        let metric = valid.recall_at(cfg.stop_cutoff).expect("stop cutoff validated");
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best_valid = Some(valid);
            bad_evals = 0;
            save_checkpoint(&params, &manifest_for(epoch), &checkpoint_dir)?;
        } else {
            bad_evals += 1;
            if bad_evals >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    // Test metrics come from the checkpoint as persisted, so that
    // reloading it later reproduces them exactly.
    let (best_params, _manifest) = load_checkpoint(&checkpoint_dir)?;
    let state = forward(&best_params, &adj, features, 0.0, cfg.mask_mode, 0)?;
    let test_metrics = evaluate(Phase::Test, &state, &test_by_user, &exclude_for_test, &eval_cfg)?;
    write_line(&mut log, &log_path, &TestLine { epoch: best_epoch, test: &test_metrics })?;

    Ok(TrainReport {
        best_epoch,
        epochs_run,
        stopped_early,
        best_valid_r20: best_metric,
        best_valid: best_valid.expect("at least one epoch ran"),
        test_metrics,
        loss_trace,
        epoch_seconds,
        checkpoint_dir: checkpoint_dir.to_string_lossy().into_owned(),
    })
}

/// Re-evaluates a saved checkpoint from its recorded data pointers:
/// rebuilds the dataset with the pinned index maps, recreates the
/// split from the stored seed, and runs the ranking evaluation.
pub fn evaluate_checkpoint(dir: &Path, phase: Phase) -> Result<MetricsReport> {
    let (params, manifest) = load_checkpoint(dir)?;
    let data = manifest.data.as_ref().ok_or_else(|| {
        Error::CheckpointMismatch(
            "checkpoint stores no dataset pointers; re-evaluation needs a checkpoint written by training on prepared data"
                .into(),
        )
    })?;
    let records = crate::data::load_interactions(Path::new(&data.interactions), '\t')?;
    let user_keys = crate::data::read_index_map(Path::new(&data.user_index))?;
    let item_keys = crate::data::read_index_map(Path::new(&data.item_index))?;
    let dataset = crate::data::build_dataset_with_maps(&records, user_keys, item_keys)?;
    if dataset.fingerprint() != manifest.dataset_fingerprint {
        return Err(Error::CheckpointMismatch(format!(
            "dataset fingerprint {} does not match the checkpoint's {}",
            dataset.fingerprint(),
            manifest.dataset_fingerprint
        )));
    }
    if dataset.num_users() != params.num_users || dataset.num_items() != params.num_items {
        return Err(Error::CheckpointMismatch(format!(
            "dataset has {} users / {} items, checkpoint tensors have {} / {}",
            dataset.num_users(),
            dataset.num_items(),
            params.num_users,
            params.num_items
        )));
    }
    let mut features = Vec::new();
    for tag in &manifest.modalities {
        let modality = Modality::from_tag(tag);
        let path = match modality {
            Modality::Visual => data.visual_features.as_ref(),
            Modality::Textual => data.textual_features.as_ref(),
            Modality::Other(_) => None,
        }
        .ok_or_else(|| {
            Error::CheckpointMismatch(format!(
                "checkpoint uses modality {:?} but stores no feature path for it",
                tag
            ))
        })?;
        features.push(load_feature_matrix(
            Path::new(path),
            modality,
            Some(dataset.num_items()),
        )?);
    }

    let split = crate::data::split_per_user(dataset, data.split_seed)?;
    let nu = split.num_users();
    let adj = build_adjacency(nu, split.num_items(), &split.train)?;
    let train_by_user = items_by_user(&split.train, nu);
    let valid_by_user = items_by_user(&split.valid, nu);
    let test_by_user = items_by_user(&split.test, nu);
    let state = forward(&params, &adj, &features, 0.0, MaskMode::Element, 0)?;
    let eval_cfg = EvalConfig::new(manifest.cutoffs.clone())?;
    match phase {
        Phase::Valid => evaluate(phase, &state, &valid_by_user, &train_by_user, &eval_cfg),
        Phase::Test => {
            let exclude: Vec<Vec<u32>> = train_by_user
                .iter()
                .zip(&valid_by_user)
                .map(|(t, v)| t.iter().chain(v).copied().collect())
                .collect();
            evaluate(phase, &state, &test_by_user, &exclude, &eval_cfg)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    /// No feature tables, no modality losses.
    WoVt,
    /// Visual features withheld.
    WoV,
    /// Textual features withheld.
    WoT,
    /// Features present but both modality losses disabled.
    WoMm,
    /// Alignment (inter-modality) loss disabled.
    WoInter,
    /// Masking (intra-modality) loss disabled.
    WoIntra,
    /// The complete model.
    Full,
}

pub const ABLATION_ORDER: [AblationVariant; 7] = [
    AblationVariant::WoVt,
    AblationVariant::WoV,
    AblationVariant::WoT,
    AblationVariant::WoMm,
    AblationVariant::WoInter,
    AblationVariant::WoIntra,
    AblationVariant::Full,
];

impl AblationVariant {
    /// Filesystem-safe identifier, also the output subdirectory name.
    pub fn key(&self) -> &'static str {
        match self {
            AblationVariant::WoVt => "wo_vt",
            AblationVariant::WoV => "wo_v",
            AblationVariant::WoT => "wo_t",
            AblationVariant::WoMm => "wo_mm",
            AblationVariant::WoInter => "wo_inter",
            AblationVariant::WoIntra => "wo_intra",
            AblationVariant::Full => "full",
        }
    }

    /// Human-readable row label.
    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::WoVt => "BM3 w/o v&t",
            AblationVariant::WoV => "BM3 w/o v",
            AblationVariant::WoT => "BM3 w/o t",
            AblationVariant::WoMm => "BM3 w/o mm",
            AblationVariant::WoInter => "BM3 w/o inter",
            AblationVariant::WoIntra => "BM3 w/o intra",
            AblationVariant::Full => "BM3",
        }
    }

    /// The base config with this variant's switches applied.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            AblationVariant::WoVt => {
                cfg.use_visual = false;
                cfg.use_textual = false;
                cfg.enable_align = false;
                cfg.enable_mask = false;
            }
            AblationVariant::WoV => cfg.use_visual = false,
            AblationVariant::WoT => cfg.use_textual = false,
            AblationVariant::WoMm => {
                cfg.enable_align = false;
                cfg.enable_mask = false;
            }
            AblationVariant::WoInter => cfg.enable_align = false,
            AblationVariant::WoIntra => cfg.enable_mask = false,
            AblationVariant::Full => {}
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub key: &'static str,
    pub label: &'static str,
    pub report: TrainReport,
}

/// Trains all seven model variants with the same seed, each into
/// `out_dir/<key>`. Requires both a visual and a textual feature
/// table, since the variant set withholds each in turn.
pub fn run_ablation(
    cfg: &TrainConfig,
    split: &SplitDataset,
    features: &[FeatureMatrix],
    out_dir: &Path,
    data: Option<DataPointers>,
) -> Result<Vec<AblationRow>> {
    for needed in [Modality::Visual, Modality::Textual] {
        if !features.iter().any(|f| f.modality == needed) {
            return Err(Error::InvalidConfig(format!(
                "the ablation sweep withholds each modality in turn and needs both; {} features are missing",
                needed
            )));
        }
    }
    let mut rows = Vec::with_capacity(ABLATION_ORDER.len());
    for variant in ABLATION_ORDER {
        let vcfg = variant.apply(cfg);
        let report = train(&vcfg, split, features, &out_dir.join(variant.key()), data.clone())?;
        rows.push(AblationRow { key: variant.key(), label: variant.label(), report });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct GridPoint {
    pub layers: usize,
    pub dropout: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub dir: String,
    /// Validation Recall at the stop cutoff, the selection criterion.
    pub valid_stop_metric: f64,
    pub report: TrainReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the best configuration (first wins ties).
    pub best: usize,
}

/// Full cartesian sweep over layers, dropout, and lambda; each cell
/// trains into `out_dir/L<layers>_p<dropout>_lam<lambda>`.
pub fn run_grid(
    cfg: &TrainConfig,
    split: &SplitDataset,
    features: &[FeatureMatrix],
    out_dir: &Path,
    data: Option<DataPointers>,
    layers_axis: &[usize],
    dropout_axis: &[f64],
    lambda_axis: &[f64],
) -> Result<GridOutcome> {
    if layers_axis.is_empty() || dropout_axis.is_empty() || lambda_axis.is_empty() {
        return Err(Error::InvalidConfig(
            "every grid axis needs at least one value".into(),
        ));
    }
    let mut rows = Vec::new();
    for &layers in layers_axis {
        for &dropout in dropout_axis {
            for &lambda in lambda_axis {
                let mut cell = cfg.clone();
                cell.layers = layers;
                cell.dropout = dropout;
                cell.lambda = lambda;
                let dir = format!("L{}_p{}_lam{}", layers, dropout, lambda);
                let report = train(&cell, split, features, &out_dir.join(&dir), data.clone())?;
                let metric = report.best_valid_r20;
                rows.push(GridRow {
                    point: GridPoint { layers, dropout, lambda },
                    dir,
                    valid_stop_metric: metric,
                    report,
                });
            }
        }
    }
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.valid_stop_metric > rows[best].valid_stop_metric {
            best = i;
        }
    }
    Ok(GridOutcome { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, split_per_user};
    use crate::synthetic;
    use std::collections::HashSet;

    fn small_split(seed: u64) -> SplitDataset {
        let records = synthetic::planted_block(12, 8, 2, 4, seed).unwrap();
        split_per_user(build_dataset(&records).unwrap(), seed).unwrap()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            d: 8,
            layers: 1,
            dropout: 0.3,
            lambda: 0.01,
            batch_size: 16,
            max_epochs: 3,
            patience: 2,
            seed: 5,
            cutoffs: vec![2, 4],
            stop_cutoff: 4,
            enable_align: false,
            enable_mask: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_batches_cover_every_edge_once() {
        let edges: Vec<(u32, u32)> = (0..23u32).map(|k| (k % 5, k % 7)).collect();
        let batches = epoch_batches(&edges, 6, 9, 1);
        assert_eq!(batches.len(), 4);
        assert!(batches[..3].iter().all(|b| b.len() == 6));
        assert_eq!(batches[3].len(), 5);
        let mut seen: Vec<(u32, u32)> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        let mut want = edges.clone();
        want.sort_unstable();
        assert_eq!(seen, want);
        // Different epochs shuffle differently; same epoch repeats.
        assert_eq!(epoch_batches(&edges, 6, 9, 2), epoch_batches(&edges, 6, 9, 2));
        assert_ne!(
            epoch_batches(&edges, 6, 9, 1)[0],
            epoch_batches(&edges, 6, 9, 2)[0]
        );
    }

    #[test]
    fn config_validation_rejects_incoherent_settings() {
        let ok = fast_cfg();
        ok.validate(false).unwrap();
        let mut c = fast_cfg();
        c.dropout = 1.0;
        assert!(c.validate(false).is_err());
        let mut c = fast_cfg();
        c.stop_cutoff = 99;
        assert!(c.validate(false).is_err());
        let mut c = fast_cfg();
        c.enable_align = true;
        assert!(c.validate(false).is_err(), "align loss without features");
        c.validate(true).unwrap();
        let mut c = fast_cfg();
        c.patience = 0;
        assert!(c.validate(false).is_err());
        let mut c = fast_cfg();
        c.patience = c.max_epochs + 1;
        assert!(c.validate(false).is_err(), "patience must not exceed max_epochs");
    }

    fn deterministic_log(dir: &Path) -> String {
        let raw = std::fs::read_to_string(dir.join("metrics.ndjson")).unwrap();
        log_without_timing(&raw).unwrap()
    }

    #[test]
    fn same_seed_runs_match_up_to_wall_clock() {
        let split = small_split(3);
        let cfg = fast_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ra = train(&cfg, &split, &[], dir_a.path(), None).unwrap();
        let rb = train(&cfg, &split, &[], dir_b.path(), None).unwrap();
        let log_a = deterministic_log(dir_a.path());
        let log_b = deterministic_log(dir_b.path());
        assert_eq!(log_a, log_b);
        assert_eq!(
            serde_json::to_string(&ra.test_metrics).unwrap(),
            serde_json::to_string(&rb.test_metrics).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&ra.loss_trace).unwrap(),
            serde_json::to_string(&rb.loss_trace).unwrap()
        );
        assert_eq!(ra.epoch_seconds.len(), ra.epochs_run);
        assert_eq!(ra.loss_trace.len(), ra.epochs_run);
        assert!(ra.epoch_seconds.iter().all(|s| *s >= 0.0));
        assert_eq!(
            ra.best_valid_r20,
            ra.best_valid.recall_at(cfg.stop_cutoff).unwrap()
        );

        // The raw log still carries a timing field on epoch lines.
        let raw = std::fs::read_to_string(dir_a.path().join("metrics.ndjson")).unwrap();
        assert!(raw.lines().next().unwrap().contains("\"seconds\""));

        // A different seed must change the trajectory.
        let mut other = cfg.clone();
        other.seed = 6;
        let dir_c = tempfile::tempdir().unwrap();
        train(&other, &split, &[], dir_c.path(), None).unwrap();
        assert_ne!(log_a, deterministic_log(dir_c.path()));
    }

    #[test]
    fn zero_lr_with_patience_one_stops_after_two_epochs() {
        let split = small_split(1);
        let mut cfg = fast_cfg();
        cfg.lr = 0.0;
        cfg.patience = 1;
        cfg.max_epochs = 50;
        let dir = tempfile::tempdir().unwrap();
        let report = train(&cfg, &split, &[], dir.path(), None).unwrap();
        assert_eq!(report.epochs_run, 2, "first eval improves, second ties, then stop");
        assert!(report.stopped_early);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn reloaded_checkpoint_reproduces_test_metrics_exactly() {
        let split = small_split(2);
        let cfg = fast_cfg();
        let dir = tempfile::tempdir().unwrap();
        let report = train(&cfg, &split, &[], dir.path(), None).unwrap();
        let (params, manifest) = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(manifest.epoch, report.best_epoch);
        let nu = split.num_users();
        let adj = build_adjacency(nu, split.num_items(), &split.train).unwrap();
        let train_by = items_by_user(&split.train, nu);
        let valid_by = items_by_user(&split.valid, nu);
        let test_by = items_by_user(&split.test, nu);
        let exclude: Vec<Vec<u32>> = train_by
            .iter()
            .zip(&valid_by)
            .map(|(t, v)| t.iter().chain(v).copied().collect())
            .collect();
        let state = forward(&params, &adj, &[], 0.0, cfg.mask_mode, 0).unwrap();
        let again = evaluate(
            Phase::Test,
            &state,
            &test_by,
            &exclude,
            &EvalConfig::new(cfg.cutoffs.clone()).unwrap(),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&again).unwrap(),
            serde_json::to_string(&report.test_metrics).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let split = small_split(4);
        let mut cfg = fast_cfg();
        cfg.lambda = 1e308; // Regularizer overflows to infinity.
        let dir = tempfile::tempdir().unwrap();
        match train(&cfg, &split, &[], dir.path(), None) {
            Err(Error::Diverged { epoch: 1, batch: 1 }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.best_epoch)),
        }
    }

    #[test]
    fn modality_variants_flip_the_right_switches() {
        let cfg = TrainConfig::default();
        let c = AblationVariant::WoVt.apply(&cfg);
        assert!(!c.use_visual && !c.use_textual && !c.enable_align && !c.enable_mask);
        let c = AblationVariant::WoV.apply(&cfg);
        assert!(!c.use_visual && c.use_textual && c.enable_align && c.enable_mask);
        let c = AblationVariant::WoT.apply(&cfg);
        assert!(c.use_visual && !c.use_textual && c.enable_align && c.enable_mask);
        let c = AblationVariant::WoMm.apply(&cfg);
        assert!(c.use_visual && c.use_textual && !c.enable_align && !c.enable_mask);
        let c = AblationVariant::WoInter.apply(&cfg);
        assert!(!c.enable_align && c.enable_mask);
        let c = AblationVariant::WoIntra.apply(&cfg);
        assert!(c.enable_align && !c.enable_mask);
        let c = AblationVariant::Full.apply(&cfg);
        assert!(c.use_visual && c.use_textual && c.enable_align && c.enable_mask);
        let keys: HashSet<&str> = ABLATION_ORDER.iter().map(|v| v.key()).collect();
        assert_eq!(keys.len(), 7, "keys must be distinct");
    }

    #[test]
    fn train_withholds_switched_off_feature_tables() {
        let split = small_split(8);
        let features = vec![
            synthetic::random_features(8, 3, Modality::Visual, 1),
            synthetic::random_features(8, 4, Modality::Textual, 2),
        ];
        let mut cfg = fast_cfg();
        cfg.max_epochs = 1;
        cfg.patience = 1;
        cfg.use_visual = false;
        cfg.enable_align = true;
        cfg.enable_mask = true;
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &split, &features, dir.path(), None).unwrap();
        let (params, manifest) =
            load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(manifest.modalities, vec!["textual".to_string()]);
        assert_eq!(params.modalities(), vec![Modality::Textual]);

        // Switching off both tables while keeping the modality losses
        // enabled leaves nothing to align against.
        let mut bad = cfg.clone();
        bad.use_textual = false;
        let err = train(&bad, &split, &features, dir.path(), None);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn ablation_requires_both_feature_tables() {
        let split = small_split(5);
        let cfg = fast_cfg();
        let only_visual = vec![synthetic::random_features(8, 3, Modality::Visual, 1)];
        let dir = tempfile::tempdir().unwrap();
        let err = run_ablation(&cfg, &split, &only_visual, dir.path(), None);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn grid_sweeps_the_cartesian_product_and_picks_the_best() {
        let split = small_split(6);
        let mut cfg = fast_cfg();
        cfg.max_epochs = 2;
        let dir = tempfile::tempdir().unwrap();
        let out = run_grid(
            &cfg,
            &split,
            &[],
            dir.path(),
            None,
            &[1, 2],
            &[0.0, 0.3],
            &[0.01],
        )
        .unwrap();
        assert_eq!(out.rows.len(), 4);
        assert_eq!(out.rows[0].dir, "L1_p0_lam0.01");
        assert_eq!(out.rows[3].dir, "L2_p0.3_lam0.01");
        assert!(dir.path().join("L2_p0.3_lam0.01/checkpoint/manifest.json").exists());
        let best = &out.rows[out.best];
        assert!(out
            .rows
            .iter()
            .all(|r| r.valid_stop_metric <= best.valid_stop_metric));
        // First-wins tie break: no earlier row may equal the best.
        assert!(out.rows[..out.best]
            .iter()
            .all(|r| r.valid_stop_metric < best.valid_stop_metric));
    }

    #[test]
    fn evaluate_checkpoint_without_data_pointers_is_rejected() {
        let split = small_split(7);
        let cfg = fast_cfg();
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &split, &[], dir.path(), None).unwrap();
        let err = evaluate_checkpoint(&dir.path().join("checkpoint"), Phase::Test);
        assert!(matches!(err, Err(Error::CheckpointMismatch(_))));
    }
}
