//! Gaussian mixture training objective: bivariate negative log-likelihood of
//! the hard-assigned positive mode plus mode cross-entropy, summed equally
//! over decoder layers.

use std::f64::consts::PI;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::decoder::{LayerPrediction, RHO_LIMIT};
use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

/// Negative log-density of `gt` under a bivariate normal.
pub fn gmm_nll_step(mu: [f64; 2], sigma: [f64; 2], rho: f64, gt: [f64; 2]) -> Result<f64> {
    if !(sigma[0] > 0.0 && sigma[1] > 0.0) {
        return Err(Error::InvalidGmm(format!("sigma must be positive, got {sigma:?}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidGmm(format!("|rho| must be below 1, got {rho}")));
    }
    let dx = gt[0] - mu[0];
    let dy = gt[1] - mu[1];
    let one_m = 1.0 - rho * rho;
    let q = dx * dx / (sigma[0] * sigma[0]) - 2.0 * rho * dx * dy / (sigma[0] * sigma[1])
        + dy * dy / (sigma[1] * sigma[1]);
    Ok((2.0 * PI * sigma[0] * sigma[1] * one_m.sqrt()).ln() + q / (2.0 * one_m))
}

/// Value and analytic gradient with respect to
/// `(mu_x, mu_y, log_sigma_x, log_sigma_y, rho_raw)` where
/// `sigma = exp(log_sigma)` and `rho = tanh(rho_raw)`.
pub fn gmm_nll_step_grad(
    mu: [f64; 2],
    log_sigma: [f64; 2],
    rho_raw: f64,
    gt: [f64; 2],
) -> Result<(f64, [f64; 5])> {
    let sx = log_sigma[0].exp();
    let sy = log_sigma[1].exp();
    let rho = rho_raw.tanh();
    let value = gmm_nll_step(mu, [sx, sy], rho, gt)?;
    let dx = gt[0] - mu[0];
    let dy = gt[1] - mu[1];
    let zx = dx / sx;
    let zy = dy / sy;
    let one_m = 1.0 - rho * rho;
    let q = zx * zx - 2.0 * rho * zx * zy + zy * zy;
    let g_mux = -(zx - rho * zy) / (sx * one_m);
    let g_muy = -(zy - rho * zx) / (sy * one_m);
    // d/dlog_sigma of log sigma is 1; q depends on sigma through z.
    let g_lsx = 1.0 - (zx * zx - rho * zx * zy) / one_m;
    let g_lsy = 1.0 - (zy * zy - rho * zx * zy) / one_m;
    let g_rho = -rho / one_m - zx * zy / one_m + q * rho / (one_m * one_m);
    let g_raw = g_rho * (1.0 - rho * rho);
    Ok((value, [g_mux, g_muy, g_lsx, g_lsy, g_raw]))
}

/// Host-side mixture component for one mode: `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeGmm {
    pub mu: Vec<[f64; 2]>,
    pub log_sigma: Vec<[f64; 2]>,
    pub rho_raw: Vec<f64>,
}

/// Scalar layer loss for one sample, applying the same clamps as the model.
/// Returns `(nll, cls)`.
pub fn sample_layer_loss(
    modes: &[ModeGmm],
    mode_logits: &[f64],
    gt: &[[f64; 2]],
    valid: &[bool],
    positive: usize,
    log_sigma_range: [f64; 2],
) -> Result<(f64, f64)> {
    let mode = modes
        .get(positive)
        .ok_or_else(|| Error::Shape(format!("positive mode {positive} out of range")))?;
    if modes.len() != mode_logits.len() {
        return Err(Error::Shape("one logit per mode required".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..gt.len() {
        if !valid[t] {
            continue;
        }
        let ls = mode.log_sigma[t];
        let sigma = [
            ls[0].clamp(log_sigma_range[0], log_sigma_range[1]).exp(),
            ls[1].clamp(log_sigma_range[0], log_sigma_range[1]).exp(),
        ];
        let rho = mode.rho_raw[t].tanh().clamp(-RHO_LIMIT, RHO_LIMIT);
        total += gmm_nll_step(mode.mu[t], sigma, rho, gt[t])?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("valid ground-truth steps"));
    }
    let max = mode_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mode_logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    Ok((total / count as f64, lse - mode_logits[positive]))
}

/// Batched layer loss `(nll, cls)` as scalar tensors, averaged over samples
/// that have a positive mode and at least one valid step. Only the positive
/// mode enters the regression term.
pub fn layer_loss(
    pred: &LayerPrediction,
    gt_future: &Tensor,
    gt_mask: &Tensor,
    positive_onehot: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let gmm = &pred.gmm;
    let mu = &gmm.mu;
    let (_, _, t, _) = mu.dims4()?;
    if gt_future.dim(1)? != t {
        return Err(Error::Shape(format!(
            "prediction has {t} steps, ground truth {}",
            gt_future.dim(1)?
        )));
    }
    let log_sigma = gmm.clamped_log_sigma()?;
    let sigma = log_sigma.exp()?;
    let rho = gmm.rho()?;
    let z = gt_future.unsqueeze(1)?.broadcast_sub(mu)?.div(&sigma)?;
    let zx = z.narrow(3, 0, 1)?.squeeze(3)?;
    let zy = z.narrow(3, 1, 1)?.squeeze(3)?;
    let one_m = (rho.sqr()?.neg()? + 1.0)?;
    let quad = ((zx.sqr()? + zy.sqr()?)? - ((&rho * 2.0)? * &zx)?.mul(&zy)?)?;
    let nll = ((log_sigma.sum(3)? + (2.0 * PI).ln())?
        + (one_m.log()? * 0.5)?
        + quad.div(&(&one_m * 2.0)?)?)?;
    // [B, K, T] -> [B, T] keeping only the positive mode.
    let selected = nll.broadcast_mul(&positive_onehot.unsqueeze(2)?)?.sum(1)?;
    let steps = gt_mask.sum(1)?;
    let per_sample = (selected * gt_mask)?.sum(1)?.div(&steps.clamp(1f32, f32::MAX)?)?;
    let has_steps = steps.clamp(0f32, 1f32)?;
    let weight = (positive_onehot.sum(1)? * has_steps)?;
    let count = weight.sum_all()?.to_scalar::<f32>()?;
    if count == 0.0 {
        return Err(Error::Empty("samples with valid ground-truth steps"));
    }
    let nll = ((per_sample * &weight)?.sum_all()? / count as f64)?;
    let ce = log_softmax_last(&gmm.mode_logits)?
        .mul(positive_onehot)?
        .sum(D::Minus1)?
        .neg()?;
    let cls = ((ce * &weight)?.sum_all()? / count as f64)?;
    Ok((nll, cls))
}

/// Unweighted sum over layers of `nll + lambda_cls * cls`.
pub fn total_loss(per_layer: &[(Tensor, Tensor)], lambda_cls: f64) -> Result<Tensor> {
    let mut terms = per_layer.iter();
    let (nll, cls) = terms.next().ok_or(Error::Empty("layer losses"))?;
    let mut total = (nll + (cls * lambda_cls)?)?;
    for (nll, cls) in terms {
        total = (total + (nll + (cls * lambda_cls)?)?)?;
    }
    Ok(total)
}

/// Logged loss values for one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_layer_nll: Vec<f64>,
    pub per_layer_cls: Vec<f64>,
    pub total: f64,
    pub positive_index: Vec<Option<usize>>,
}

/// Loss over all decoder layers for a batch: the differentiable total and its
/// breakdown. Names the first layer whose loss is not finite.
pub fn batch_loss(
    layers: &[LayerPrediction],
    batch: &Batch,
    lambda_cls: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut nlls = Vec::with_capacity(layers.len());
    let mut clss = Vec::with_capacity(layers.len());
    for layer in layers {
        let (nll, cls) = layer_loss(layer, &batch.gt_future, &batch.gt_mask, &batch.positive_onehot)?;
        let n = nll.to_scalar::<f32>()? as f64;
        let c = cls.to_scalar::<f32>()? as f64;
        if !n.is_finite() || !c.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                layer: layer.layer_index,
            });
        }
        nlls.push(n);
        clss.push(c);
        per_layer.push((nll, cls));
    }
    let total = total_loss(&per_layer, lambda_cls)?;
    let breakdown = LossBreakdown {
        total: total.to_scalar::<f32>()? as f64,
        per_layer_nll: nlls,
        per_layer_cls: clss,
        positive_index: batch.host.positives.clone(),
    };
    Ok((total, breakdown))
}
