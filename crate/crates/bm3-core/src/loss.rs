//! The three-part contrastive training objective and its backward
//! pass.
//!
//! For a batch `B` of positive (user, item) pairs, with `C` the
//! negative cosine similarity, online views `~h` and gradient-stopped
//! target views `.h`:
//!
//! * recovery: `mean_B [ C(~h_u, .h_i) + C(.h_u, ~h_i) ]`
//! * alignment: `mean_B sum_m C(~h_m[i], .h_i)`
//! * masking:   `mean_B sum_m C(~h_m[i], .h_m[i])`
//! * regularizer: `lambda * mean_B (|h_u|^2 + |h_i|^2)` on readout
//!   rows, before the predictor.
//!
//! The backward pass differentiates only through the online views —
//! target views are constants. It accumulates into `ParamTensor.grad`
//! fields and works on compact matrices over the unique batch rows,
//! so per-batch cost scales with the batch, not the catalog.

use crate::error::{Error, Result};
use crate::fmat::{FeatureMatrix, Modality};
use crate::graph::NormalizedAdjacency;
use crate::mat::{axpy, dot, Mat};
use crate::model::{forward_with_masks, ForwardMasks, ForwardState, ModelParams};
use crate::nn::{neg_cosine_grad, neg_cosine_guarded};
use serde::Serialize;

#[derive(Clone, Debug)]
pub struct LossConfig {
    /// Weight of the squared-norm regularizer on readout rows.
    pub lambda: f64,
    /// Include the inter-modality alignment term.
    pub enable_align: bool,
    /// Include the intra-modality masking term.
    pub enable_mask: bool,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Self {
        LossConfig { lambda, enable_align: true, enable_mask: true }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub align: f64,
    pub mask: f64,
    pub reg: f64,
    pub total: f64,
}

fn check_batch(state: &ForwardState, batch: &[(u32, u32)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (nu, ni) = (state.num_users(), state.num_items());
    for &(u, i) in batch {
        if (u as usize) >= nu || (i as usize) >= ni {
            return Err(Error::EdgeOutOfRange {
                user: u,
                item: i,
                num_users: nu,
                num_items: ni,
            });
        }
    }
    Ok(())
}

fn check_flags(state: &ForwardState, cfg: &LossConfig) -> Result<()> {
    if (cfg.enable_align || cfg.enable_mask) && state.latents.is_empty() {
        return Err(Error::InvalidConfig(
            "alignment/masking losses are enabled but the model holds no modality latents"
                .into(),
        ));
    }
    Ok(())
}

/// Recovery term alone.
pub fn rec_loss(state: &ForwardState, batch: &[(u32, u32)]) -> Result<f64> {
    check_batch(state, batch)?;
    let sum: f64 = batch
        .iter()
        .map(|&(u, i)| {
            let (u, i) = (u as usize, i as usize);
            neg_cosine_guarded(state.online_u.row(u), state.target_i.row(i))
                + neg_cosine_guarded(state.target_u.row(u), state.online_i.row(i))
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Alignment term alone (sums over modalities).
pub fn align_loss(state: &ForwardState, batch: &[(u32, u32)]) -> Result<f64> {
    check_batch(state, batch)?;
    let sum: f64 = batch
        .iter()
        .map(|&(_, i)| {
            let i = i as usize;
            state
                .online_m
                .iter()
                .map(|(_, om)| neg_cosine_guarded(om.row(i), state.target_i.row(i)))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Masking term alone (sums over modalities).
pub fn mask_loss(state: &ForwardState, batch: &[(u32, u32)]) -> Result<f64> {
    check_batch(state, batch)?;
    let sum: f64 = batch
        .iter()
        .map(|&(_, i)| {
            let i = i as usize;
            state
                .online_m
                .iter()
                .zip(&state.target_m)
                .map(|((_, om), (_, tm))| neg_cosine_guarded(om.row(i), tm.row(i)))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Regularizer on the readout rows of the batch, already scaled by
/// `lambda`.
pub fn reg_term(state: &ForwardState, batch: &[(u32, u32)], lambda: f64) -> Result<f64> {
    check_batch(state, batch)?;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = batch
        .iter()
        .map(|&(u, i)| {
            let ru = state.readout_u.row(u as usize);
            let ri = state.readout_i.row(i as usize);
            dot(ru, ru) + dot(ri, ri)
        })
        .sum();
    Ok(lambda * sum / batch.len() as f64)
}

/// All loss terms for one batch. Values only; see
/// [`total_loss_backward`] for gradients.
pub fn total_loss(
    state: &ForwardState,
    batch: &[(u32, u32)],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_batch(state, batch)?;
    check_flags(state, cfg)?;
    let rec = rec_loss(state, batch)?;
    let align = if cfg.enable_align { align_loss(state, batch)? } else { 0.0 };
    let mask = if cfg.enable_mask { mask_loss(state, batch)? } else { 0.0 };
    let reg = reg_term(state, batch, cfg.lambda)?;
    Ok(LossBreakdown { rec, align, mask, reg, total: rec + align + mask + reg })
}

/// Target views pinned to constants, for finite-difference checks of
/// the stop-gradient behaviour.
#[derive(Clone, Debug)]
pub struct TargetViews {
    pub user: Mat,
    pub item: Mat,
    pub modal: Vec<(Modality, Mat)>,
}

impl TargetViews {
    pub fn from_state(state: &ForwardState) -> Self {
        TargetViews {
            user: state.target_u.clone(),
            item: state.target_i.clone(),
            modal: state.target_m.clone(),
        }
    }
}

/// Loss as a function of the parameters with the target views held
/// constant — exactly what the analytic backward differentiates. The
/// masks are unused for targets here but still validate shapes.
pub fn pinned_target_loss(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    features: &[FeatureMatrix],
    masks: &ForwardMasks,
    targets: &TargetViews,
    batch: &[(u32, u32)],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut state = forward_with_masks(params, adj, features, masks)?;
    state.target_u = targets.user.clone();
    state.target_i = targets.item.clone();
    state.target_m = targets.modal.clone();
    Ok(total_loss(&state, batch, cfg)?.total)
}

/// Loss as a function of the parameters with the targets recomputed
/// from them (masks still pinned). This is what the loss would be
/// *without* a stop-gradient; its derivative differs from the
/// analytic backward wherever the target pathway matters.
pub fn free_target_loss(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    features: &[FeatureMatrix],
    masks: &ForwardMasks,
    batch: &[(u32, u32)],
    cfg: &LossConfig,
) -> Result<f64> {
    let state = forward_with_masks(params, adj, features, masks)?;
    Ok(total_loss(&state, batch, cfg)?.total)
}

/// Full backward pass: accumulates `d total / d theta` into every
/// parameter's `.grad`, differentiating through online views only.
pub fn total_loss_backward(
    params: &mut ModelParams,
    adj: &NormalizedAdjacency,
    features: &[FeatureMatrix],
    state: &ForwardState,
    batch: &[(u32, u32)],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    backward_impl(params, adj, features, state, batch, cfg, true)
}

/// Runs the identical backward scaffolding but with every online-view
/// accumulation switched off, leaving only what would flow through
/// the gradient-stopped target views — which is nothing. Grads are
/// unchanged to the bit; the stop-gradient acceptance check asserts
/// they stay exactly zero.
pub fn stopped_branch_backward(
    params: &mut ModelParams,
    adj: &NormalizedAdjacency,
    features: &[FeatureMatrix],
    state: &ForwardState,
    batch: &[(u32, u32)],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    backward_impl(params, adj, features, state, batch, cfg, false)
}

fn backward_impl(
    params: &mut ModelParams,
    adj: &NormalizedAdjacency,
    features: &[FeatureMatrix],
    state: &ForwardState,
    batch: &[(u32, u32)],
    cfg: &LossConfig,
    include_online: bool,
) -> Result<LossBreakdown> {
    check_batch(state, batch)?;
    check_flags(state, cfg)?;
    if state.num_users() != params.num_users || state.num_items() != params.num_items {
        return Err(Error::DimensionMismatch {
            op: "total_loss_backward",
            detail: "forward state and parameters disagree on node counts".into(),
        });
    }
    // Feature tables must line up one-to-one with the state's latents.
    let mut sorted_features: Vec<&FeatureMatrix> = features.iter().collect();
    sorted_features.sort_by(|a, b| a.modality.cmp(&b.modality));
    if sorted_features.len() != state.latents.len()
        || sorted_features
            .iter()
            .zip(&state.latents)
            .any(|(f, (m, _))| f.modality != *m)
    {
        return Err(Error::DimensionMismatch {
            op: "total_loss_backward",
            detail: "feature tables do not match the forward state's modality latents".into(),
        });
    }

    let d = params.d;
    let inv_b = 1.0 / batch.len() as f64;
    let mut users: Vec<u32> = batch.iter().map(|&(u, _)| u).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<u32> = batch.iter().map(|&(_, i)| i).collect();
    items.sort_unstable();
    items.dedup();
    let user_slot = |u: u32| users.binary_search(&u).expect("user present by construction");
    let item_slot = |i: u32| items.binary_search(&i).expect("item present by construction");

    let modality_loss_on = cfg.enable_align || cfg.enable_mask;
    let mut d_online_u = Mat::zeros(users.len(), d);
    let mut d_online_i = Mat::zeros(items.len(), d);
    let mut d_online_m: Vec<Mat> =
        state.latents.iter().map(|_| Mat::zeros(items.len(), d)).collect();
    let mut d_readout_u = Mat::zeros(users.len(), d);
    let mut d_readout_i = Mat::zeros(items.len(), d);

    // Value sums accumulate in the same per-pair association order as
    // the value-only functions above, so the returned breakdown is
    // bit-identical to `total_loss` on the same state.
    let (mut rec_sum, mut align_sum, mut mask_sum, mut reg_sum) = (0.0, 0.0, 0.0, 0.0);
    for &(u, i) in batch {
        let (cu, ci) = (user_slot(u), item_slot(i));
        let (u, i) = (u as usize, i as usize);

        let (v1, g) = neg_cosine_grad(state.online_u.row(u), state.target_i.row(i));
        if include_online {
            axpy(inv_b, &g, d_online_u.row_mut(cu));
        }
        let (v2, g) = neg_cosine_grad(state.online_i.row(i), state.target_u.row(u));
        rec_sum += v1 + v2;
        if include_online {
            axpy(inv_b, &g, d_online_i.row_mut(ci));
        }

        let (mut pair_align, mut pair_mask) = (0.0, 0.0);
        for (k, (_, om)) in state.online_m.iter().enumerate() {
            if cfg.enable_align {
                let (v, g) = neg_cosine_grad(om.row(i), state.target_i.row(i));
                pair_align += v;
                if include_online {
                    axpy(inv_b, &g, d_online_m[k].row_mut(ci));
                }
            }
            if cfg.enable_mask {
                let (v, g) = neg_cosine_grad(om.row(i), state.target_m[k].1.row(i));
                pair_mask += v;
                if include_online {
                    axpy(inv_b, &g, d_online_m[k].row_mut(ci));
                }
            }
        }
        align_sum += pair_align;
        mask_sum += pair_mask;

        if cfg.lambda != 0.0 {
            let ru = state.readout_u.row(u);
            let ri = state.readout_i.row(i);
            reg_sum += dot(ru, ru) + dot(ri, ri);
            if include_online {
                axpy(2.0 * cfg.lambda * inv_b, ru, d_readout_u.row_mut(cu));
                axpy(2.0 * cfg.lambda * inv_b, ri, d_readout_i.row_mut(ci));
            }
        }
    }

    // Predictor backward on compact row blocks; d_out flows back to
    // the predictor inputs (readouts and latents).
    let user_rows: Vec<usize> = users.iter().map(|&u| u as usize).collect();
    let item_rows: Vec<usize> = items.iter().map(|&i| i as usize).collect();
    let x_u = state.readout_u.gather_rows(&user_rows);
    d_readout_u.add_assign(&params.predictor.backward(&x_u, &d_online_u)?)?;
    let x_i = state.readout_i.gather_rows(&item_rows);
    d_readout_i.add_assign(&params.predictor.backward(&x_i, &d_online_i)?)?;
    if modality_loss_on {
        for (k, (modality, latent)) in state.latents.iter().enumerate() {
            let x_m = latent.gather_rows(&item_rows);
            let d_latent = params.predictor.backward(&x_m, &d_online_m[k])?;
            let feats = sorted_features[k];
            debug_assert_eq!(&feats.modality, modality);
            let f_rows = feats.values.gather_rows(&item_rows);
            let proj = params
                .projections
                .iter_mut()
                .find(|(m, _)| m == modality)
                .map(|(_, l)| l)
                .ok_or_else(|| Error::DimensionMismatch {
                    op: "total_loss_backward",
                    detail: format!("no projection for modality {}", modality),
                })?;
            proj.backward_params_only(&f_rows, &d_latent)?;
        }
    }

    // Readout backward. Scatter the compact readout gradients onto the
    // full node table, then run the propagation transpose (A is
    // symmetric): dH^L = R / (L+1); dH^l = R / (L+1) + A dH^(l+1).
    let n = params.num_users + params.num_items;
    let mut r_nodes = Mat::zeros(n, d);
    for (k, &u) in users.iter().enumerate() {
        axpy(1.0, d_readout_u.row(k), r_nodes.row_mut(u as usize));
    }
    for (k, &i) in items.iter().enumerate() {
        axpy(1.0, d_readout_i.row(k), r_nodes.row_mut(params.num_users + i as usize));
    }
    let layer_scale = 1.0 / (params.layers + 1) as f64;
    let mut g = r_nodes.clone();
    g.scale(layer_scale);
    for _ in 0..params.layers {
        let mut next = adj.propagate(&g)?;
        axpy(layer_scale, r_nodes.data(), next.data_mut());
        g = next;
    }
    // Items add their initial embedding straight into the readout, so
    // dH^0 takes the item gradients once more, unscaled.
    for (k, &i) in items.iter().enumerate() {
        axpy(1.0, d_readout_i.row(k), g.row_mut(params.num_users + i as usize));
    }
    for u in 0..params.num_users {
        axpy(1.0, g.row(u), params.user_emb.grad.row_mut(u));
    }
    for i in 0..params.num_items {
        axpy(1.0, g.row(params.num_users + i), params.item_emb.grad.row_mut(i));
    }

    let n = batch.len() as f64;
    let rec = rec_sum / n;
    let align = align_sum / n;
    let mask = mask_sum / n;
    let reg = cfg.lambda * reg_sum / n;
    Ok(LossBreakdown { rec, align, mask, reg, total: rec + align + mask + reg })
}
