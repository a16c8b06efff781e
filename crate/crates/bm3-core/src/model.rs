//! The BM3 model: embedding tables, modality projections, graph
//! propagation with layer-mean readout, a shared predictor, and
//! dropout-perturbed target views.
//!
//! A forward pass computes, in order:
//!
//! 1. `H^0` — user and item embeddings stacked into one node table;
//!    `H^(l+1) = A_norm H^l` for `l < L` (no self-loops);
//! 2. readouts — users take the mean of their rows across all `L + 1`
//!    layers; items take the same mean **plus** their `H^0` row;
//! 3. modality latents — `h_m = F_m W_m + b_m` per item feature table;
//! 4. online views — one shared affine predictor applied to both
//!    readouts and every latent;
//! 5. target views — a fresh dropout mask applied to each readout and
//!    latent. Targets are never backpropagated through (they are the
//!    stop-gradient side of the contrastive losses), and with `p = 0`
//!    they equal their sources bit for bit.

use crate::error::{Error, Result};
use crate::fmat::{read_fmat, write_fmat, FeatureMatrix, Modality};
use crate::graph::NormalizedAdjacency;
use crate::mat::{dot, Mat};
use crate::nn::{DropoutMask, FdReport, LinearLayer, MaskMode, ParamTensor};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub num_users: usize,
    pub num_items: usize,
    pub d: usize,
    pub layers: usize,
    pub user_emb: ParamTensor,
    pub item_emb: ParamTensor,
    /// Per-modality feature projections, sorted by modality.
    pub projections: Vec<(Modality, LinearLayer)>,
    pub predictor: LinearLayer,
}

impl ModelParams {
    /// Xavier-initializes all tensors. Each tensor draws from its own
    /// stream derived from `seed` and the tensor name, so the presence
    /// or absence of one modality never shifts another tensor's init.
    pub fn init(
        num_users: usize,
        num_items: usize,
        d: usize,
        layers: usize,
        modality_dims: &[(Modality, usize)],
        seed: u64,
    ) -> Result<Self> {
        if num_users == 0 || num_items == 0 {
            return Err(Error::EmptyDataset);
        }
        if d == 0 {
            return Err(Error::InvalidParameter {
                name: "d",
                reason: "embedding dimension must be at least 1".into(),
            });
        }
        let mut dims = modality_dims.to_vec();
        dims.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in dims.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidParameter {
                    name: "modalities",
                    reason: format!("duplicate modality {}", pair[0].0),
                });
            }
        }
        let projections = dims
            .into_iter()
            .map(|(m, dim)| {
                let prefix = format!("proj_{}", m.short());
                let layer = LinearLayer::xavier(
                    &prefix,
                    dim,
                    d,
                    rng::derive_seed(seed, &format!("init/{}", prefix), &[]),
                );
                (m, layer)
            })
            .collect();
        Ok(ModelParams {
            num_users,
            num_items,
            d,
            layers,
            user_emb: ParamTensor::xavier(
                "user_emb",
                num_users,
                d,
                rng::derive_seed(seed, "init/user_emb", &[]),
            ),
            item_emb: ParamTensor::xavier(
                "item_emb",
                num_items,
                d,
                rng::derive_seed(seed, "init/item_emb", &[]),
            ),
            projections,
            predictor: LinearLayer::xavier("pred", d, d, rng::derive_seed(seed, "init/pred", &[])),
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.projections.iter().map(|(m, _)| m.clone()).collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["user_emb".to_string(), "item_emb".to_string()];
        for (_, layer) in &self.projections {
            names.push(layer.w.name.clone());
            names.push(layer.b.name.clone());
        }
        names.push(self.predictor.w.name.clone());
        names.push(self.predictor.b.name.clone());
        names
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        match name {
            "user_emb" => Some(&self.user_emb),
            "item_emb" => Some(&self.item_emb),
            _ => {
                for (_, layer) in &self.projections {
                    if layer.w.name == name {
                        return Some(&layer.w);
                    }
                    if layer.b.name == name {
                        return Some(&layer.b);
                    }
                }
                [&self.predictor.w, &self.predictor.b]
                    .into_iter()
                    .find(|t| t.name == name)
            }
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        match name {
            "user_emb" => Some(&mut self.user_emb),
            "item_emb" => Some(&mut self.item_emb),
            _ => {
                for (_, layer) in &mut self.projections {
                    if layer.w.name == name {
                        return Some(&mut layer.w);
                    }
                    if layer.b.name == name {
                        return Some(&mut layer.b);
                    }
                }
                [&mut self.predictor.w, &mut self.predictor.b]
                    .into_iter()
                    .find(|t| t.name == name)
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.user_emb, &mut self.item_emb];
        for (_, layer) in &mut self.projections {
            v.push(&mut layer.w);
            v.push(&mut layer.b);
        }
        v.push(&mut self.predictor.w);
        v.push(&mut self.predictor.b);
        v
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }
}

/// The dropout masks drawn for one forward pass, one per target view.
#[derive(Clone, Debug)]
pub struct ForwardMasks {
    pub user: DropoutMask,
    pub item: DropoutMask,
    pub modal: Vec<(Modality, DropoutMask)>,
}

impl ForwardMasks {
    pub fn identity(modalities: &[Modality]) -> Self {
        ForwardMasks {
            user: DropoutMask::identity(),
            item: DropoutMask::identity(),
            modal: modalities.iter().map(|m| (m.clone(), DropoutMask::identity())).collect(),
        }
    }

    /// Samples a full mask set. Each view draws from its own stream
    /// derived from `dropout_seed` and the view name.
    pub fn sample(
        params: &ModelParams,
        modalities: &[Modality],
        p: f64,
        mode: MaskMode,
        dropout_seed: u64,
    ) -> Result<Self> {
        if p == 0.0 {
            return Ok(ForwardMasks::identity(modalities));
        }
        let user = DropoutMask::sample(
            params.num_users,
            params.d,
            p,
            mode,
            &mut rng::stream(dropout_seed, "target/user", &[]),
        )?;
        let item = DropoutMask::sample(
            params.num_items,
            params.d,
            p,
            mode,
            &mut rng::stream(dropout_seed, "target/item", &[]),
        )?;
        let mut modal = Vec::with_capacity(modalities.len());
        for m in modalities {
            let mask = DropoutMask::sample(
                params.num_items,
                params.d,
                p,
                mode,
                &mut rng::stream(dropout_seed, &format!("target/{}", m.tag()), &[]),
            )?;
            modal.push((m.clone(), mask));
        }
        Ok(ForwardMasks { user, item, modal })
    }
}

/// Everything a forward pass produces. Views over modality latents
/// are kept in the same (sorted) order as `ModelParams::projections`.
#[derive(Clone, Debug)]
pub struct ForwardState {
    /// `H^0 ..= H^L`, each `(|U| + |I|) x d`.
    pub layer_embs: Vec<Mat>,
    pub readout_u: Mat,
    pub readout_i: Mat,
    /// Modality latents `h_m`, `|I| x d`.
    pub latents: Vec<(Modality, Mat)>,
    pub online_u: Mat,
    pub online_i: Mat,
    pub online_m: Vec<(Modality, Mat)>,
    pub target_u: Mat,
    pub target_i: Mat,
    pub target_m: Vec<(Modality, Mat)>,
    pub masks: ForwardMasks,
}

impl ForwardState {
    pub fn num_users(&self) -> usize {
        self.readout_u.rows()
    }

    pub fn num_items(&self) -> usize {
        self.readout_i.rows()
    }
}

fn check_features<'a>(
    params: &ModelParams,
    features: &'a [FeatureMatrix],
) -> Result<Vec<&'a FeatureMatrix>> {
    let mut sorted: Vec<&FeatureMatrix> = features.iter().collect();
    sorted.sort_by(|a, b| a.modality.cmp(&b.modality));
    for pair in sorted.windows(2) {
        if pair[0].modality == pair[1].modality {
            return Err(Error::InvalidParameter {
                name: "features",
                reason: format!("duplicate modality {}", pair[0].modality),
            });
        }
    }
    for f in &sorted {
        if f.values.rows() != params.num_items {
            return Err(Error::DimensionMismatch {
                op: "forward",
                detail: format!(
                    "{} features have {} rows for {} items",
                    f.modality,
                    f.values.rows(),
                    params.num_items
                ),
            });
        }
        let proj = params
            .projections
            .iter()
            .find(|(m, _)| *m == f.modality)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::DimensionMismatch {
                op: "forward",
                detail: format!("no projection initialized for modality {}", f.modality),
            })?;
        if proj.in_dim() != f.values.cols() {
            return Err(Error::DimensionMismatch {
                op: "forward",
                detail: format!(
                    "{} features are {}-dimensional but the projection expects {}",
                    f.modality,
                    f.values.cols(),
                    proj.in_dim()
                ),
            });
        }
    }
    Ok(sorted)
}

/// Full forward pass with freshly sampled dropout masks; see the
/// module docs for the exact pipeline. `dropout_seed` pins the masks,
/// so equal seeds give bit-identical states.
pub fn forward(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    features: &[FeatureMatrix],
    p: f64,
    mode: MaskMode,
    dropout_seed: u64,
) -> Result<ForwardState> {
    let sorted = check_features(params, features)?;
    let modalities: Vec<Modality> = sorted.iter().map(|f| f.modality.clone()).collect();
    let masks = ForwardMasks::sample(params, &modalities, p, mode, dropout_seed)?;
    forward_with_masks(params, adj, features, &masks)
}

/// Forward pass with caller-supplied masks — the hook that gradient
/// checks use to pin dropout while parameters move.
pub fn forward_with_masks(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    features: &[FeatureMatrix],
    masks: &ForwardMasks,
) -> Result<ForwardState> {
    let sorted = check_features(params, features)?;
    if adj.num_users() != params.num_users || adj.num_items() != params.num_items {
        return Err(Error::DimensionMismatch {
            op: "forward",
            detail: format!(
                "graph has {}+{} nodes, model has {}+{}",
                adj.num_users(),
                adj.num_items(),
                params.num_users,
                params.num_items
            ),
        });
    }

    // Propagation over the stacked node table.
    let n = params.num_users + params.num_items;
    let mut h0 = Mat::zeros(n, params.d);
    for u in 0..params.num_users {
        h0.row_mut(u).copy_from_slice(params.user_emb.value.row(u));
    }
    for i in 0..params.num_items {
        h0.row_mut(params.num_users + i)
            .copy_from_slice(params.item_emb.value.row(i));
    }
    let mut layer_embs = Vec::with_capacity(params.layers + 1);
    layer_embs.push(h0);
    for _ in 0..params.layers {
        let next = adj.propagate(layer_embs.last().expect("nonempty"))?;
        layer_embs.push(next);
    }

    // Layer-mean readout; items add their own initial embedding back.
    let scale = 1.0 / (params.layers + 1) as f64;
    let mut readout_u = Mat::zeros(params.num_users, params.d);
    let mut readout_i = Mat::zeros(params.num_items, params.d);
    for h in &layer_embs {
        for u in 0..params.num_users {
            crate::mat::axpy(scale, h.row(u), readout_u.row_mut(u));
        }
        for i in 0..params.num_items {
            crate::mat::axpy(scale, h.row(params.num_users + i), readout_i.row_mut(i));
        }
    }
    for i in 0..params.num_items {
        crate::mat::axpy(1.0, layer_embs[0].row(params.num_users + i), readout_i.row_mut(i));
    }

    // Modality latents.
    let mut latents = Vec::with_capacity(sorted.len());
    for f in &sorted {
        let layer = params
            .projections
            .iter()
            .find(|(m, _)| *m == f.modality)
            .map(|(_, l)| l)
            .expect("checked above");
        latents.push((f.modality.clone(), layer.apply(&f.values)?));
    }

    // Online views through the shared predictor.
    let online_u = params.predictor.apply(&readout_u)?;
    let online_i = params.predictor.apply(&readout_i)?;
    let mut online_m = Vec::with_capacity(latents.len());
    for (m, h) in &latents {
        online_m.push((m.clone(), params.predictor.apply(h)?));
    }

    // Gradient-stopped target views.
    if masks.modal.len() != latents.len() {
        return Err(Error::DimensionMismatch {
            op: "forward",
            detail: format!(
                "{} modality masks for {} feature tables",
                masks.modal.len(),
                latents.len()
            ),
        });
    }
    let target_u = masks.user.apply(&readout_u)?;
    let target_i = masks.item.apply(&readout_i)?;
    let mut target_m = Vec::with_capacity(latents.len());
    for ((m, h), (mask_m, mask)) in latents.iter().zip(&masks.modal) {
        if m != mask_m {
            return Err(Error::DimensionMismatch {
                op: "forward",
                detail: format!("mask for {} paired with latent {}", mask_m, m),
            });
        }
        target_m.push((m.clone(), mask.apply(h)?));
    }

    Ok(ForwardState {
        layer_embs,
        readout_u,
        readout_i,
        latents,
        online_u,
        online_i,
        online_m,
        target_u,
        target_i,
        target_m,
        masks: masks.clone(),
    })
}

/// Scores every item for one user: the dot product of predictor
/// outputs. Run on a `p = 0` forward state for inference.
pub fn score_all(state: &ForwardState, user: usize) -> Result<Vec<f64>> {
    if user >= state.num_users() {
        return Err(Error::DimensionMismatch {
            op: "score_all",
            detail: format!("user {} out of {}", user, state.num_users()),
        });
    }
    let u = state.online_u.row(user);
    Ok((0..state.num_items()).map(|i| dot(u, state.online_i.row(i))).collect())
}

/// Pointers back to the prepared dataset, stored in checkpoints so
/// that evaluation can rebuild the exact data and split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataPointers {
    pub interactions: String,
    pub user_index: String,
    pub item_index: String,
    pub visual_features: Option<String>,
    pub textual_features: Option<String>,
    pub split_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub d: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub modalities: Vec<String>,
    pub dataset_fingerprint: String,
    pub epoch: usize,
    pub cutoffs: Vec<usize>,
    pub data: Option<DataPointers>,
}

/// Writes one `.fmat` file per tensor plus `manifest.json`.
pub fn save_checkpoint(params: &ModelParams, manifest: &CheckpointManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    let mut write = |t: &ParamTensor| -> Result<()> {
        names.push(t.name.clone());
        write_fmat(&dir.join(format!("{}.fmat", t.name)), &t.value)
    };
    write(&params.user_emb)?;
    write(&params.item_emb)?;
    for (_, layer) in &params.projections {
        write(&layer.w)?;
        write(&layer.b)?;
    }
    write(&params.predictor.w)?;
    write(&params.predictor.b)?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads a checkpoint directory back into model parameters. Optimizer
/// state is not stored; reloaded tensors start with fresh moments.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest_src = std::fs::read_to_string(&manifest_path).map_err(|_| {
        Error::IncompleteCheckpoint { path: dir.into(), missing: "manifest.json".into() }
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_src)
        .map_err(|e| Error::Json { path: manifest_path, source: e })?;

    let read = |stem: &str| -> Result<Mat> {
        let path = dir.join(format!("{}.fmat", stem));
        if !path.exists() {
            return Err(Error::IncompleteCheckpoint {
                path: dir.into(),
                missing: format!("{}.fmat", stem),
            });
        }
        read_fmat(&path)
    };

    let user_emb = read("user_emb")?;
    let item_emb = read("item_emb")?;
    let (num_users, num_items) = (user_emb.rows(), item_emb.rows());
    let mut projections = Vec::new();
    let mut modalities: Vec<Modality> =
        manifest.modalities.iter().map(|t| Modality::from_tag(t)).collect();
    modalities.sort();
    for m in modalities {
        let prefix = format!("proj_{}", m.short());
        let w = read(&format!("{}_W", prefix))?;
        let b = read(&format!("{}_b", prefix))?;
        projections.push((m, LinearLayer::from_parts(&prefix, w, b)));
    }
    let predictor = LinearLayer::from_parts("pred", read("pred_W")?, read("pred_b")?);
    let params = ModelParams {
        num_users,
        num_items,
        d: manifest.d,
        layers: manifest.layers,
        user_emb: ParamTensor::new("user_emb", user_emb),
        item_emb: ParamTensor::new("item_emb", item_emb),
        projections,
        predictor,
    };
    Ok((params, manifest))
}

#[derive(Clone, Debug)]
pub struct FdModelReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_tensor: Option<String>,
    pub worst: Option<crate::nn::FdWorst>,
}

/// Central-difference check of every parameter gradient against the
/// scalar `loss`, which must be a deterministic function of the
/// parameter values (pin dropout masks and target views before use).
/// Call after a backward pass has populated `.grad` fields.
/// `max_coords_per_tensor` limits the probed coordinates per tensor
/// (sampled from a stream seeded by `seed`).
pub fn finite_difference_check(
    params: &mut ModelParams,
    eps: f64,
    max_coords_per_tensor: Option<usize>,
    seed: u64,
    loss: impl Fn(&ModelParams) -> f64,
) -> FdModelReport {
    use rand::seq::SliceRandom;
    let mut overall = FdModelReport {
        max_rel_err: 0.0,
        checked: 0,
        worst_tensor: None,
        worst: None,
    };
    for name in params.tensor_names() {
        let len = params.tensor(&name).expect("own name").value.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if let Some(cap) = max_coords_per_tensor {
            if cap < len {
                coords.shuffle(&mut rng::stream(seed, &format!("fd/{}", name), &[]));
                coords.truncate(cap);
                coords.sort_unstable();
            }
        }
        let mut report = FdReport::empty();
        for j in coords {
            let old = params.tensor(&name).expect("own name").value.data()[j];
            params.tensor_mut(&name).expect("own name").value.data_mut()[j] = old + eps;
            let up = loss(params);
            params.tensor_mut(&name).expect("own name").value.data_mut()[j] = old - eps;
            let down = loss(params);
            params.tensor_mut(&name).expect("own name").value.data_mut()[j] = old;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = params.tensor(&name).expect("own name").grad.data()[j];
            report.absorb(j, analytic, numeric);
        }
        if report.max_rel_err > overall.max_rel_err || overall.worst.is_none() {
            overall.max_rel_err = overall.max_rel_err.max(report.max_rel_err);
            overall.worst_tensor = Some(name.clone());
            overall.worst = report.worst.clone();
        }
        overall.checked += report.checked;
    }
    overall
}
