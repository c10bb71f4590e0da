//! Motion decoder: one static intention query and one dynamic searching
//! query per mode, a stack of decoder layers with per-mode map collection,
//! and a Gaussian mixture head per layer.

use candle_core::{Device, Tensor, D};

use crate::batch::HostBatch;
use crate::encoder::{ContextEmbedding, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    mask_to_bias, sine_position_encoding, softmax_last, Builder, Ctx, LayerNorm, Linear, Mlp,
    MultiHeadAttention, MASK_BIAS,
};

pub const RHO_LIMIT: f64 = 0.99;

/// Initial weight scale of the trajectory head's output layer.
const HEAD_INIT_SCALE: f32 = 0.01;

/// Query embeddings for one decoder layer. Tensors are `[B, K, D]`; anchors
/// are the host copy of the points whose encoding defines `search_queries`.
#[derive(Clone, Debug)]
pub struct MotionQueryState {
    pub static_queries: Tensor,
    pub search_queries: Tensor,
    pub search_anchors: Vec<Vec<[f64; 2]>>,
}

/// Raw head outputs. `mu`, `log_sigma`: `[B, K, T, 2]`; `rho_raw`:
/// `[B, K, T]`; `mode_logits`: `[B, K]`.
#[derive(Clone, Debug)]
pub struct GmmParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub rho_raw: Tensor,
    pub mode_logits: Tensor,
    /// Bounds applied to `log_sigma` before use.
    pub log_sigma_range: [f64; 2],
}

impl GmmParams {
    pub fn clamped_log_sigma(&self) -> Result<Tensor> {
        let [lo, hi] = self.log_sigma_range;
        Ok(self.log_sigma.clamp(lo as f32, hi as f32)?)
    }

    pub fn sigma(&self) -> Result<Tensor> {
        Ok(self.clamped_log_sigma()?.exp()?)
    }

    pub fn rho(&self) -> Result<Tensor> {
        Ok(self.rho_raw.tanh()?.clamp(-RHO_LIMIT as f32, RHO_LIMIT as f32)?)
    }

    pub fn mode_probs(&self) -> Result<Tensor> {
        softmax_last(&self.mode_logits)
    }
}

/// Output of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerPrediction {
    pub layer_index: usize,
    pub gmm: GmmParams,
    /// Anchors (per sample, per mode) that defined this layer's searching
    /// queries.
    pub anchors: Vec<Vec<[f64; 2]>>,
    /// Map polylines collected per sample and mode.
    pub collected: Vec<Vec<Vec<usize>>>,
}

impl LayerPrediction {
    /// Predicted trajectories `[B, K, T, 2]`.
    pub fn trajectories(&self) -> &Tensor {
        &self.gmm.mu
    }

    /// Final predicted waypoint per mode, `[B, K, 2]`.
    pub fn endpoints(&self) -> Result<Tensor> {
        let t = self.gmm.mu.dim(2)?;
        Ok(self.gmm.mu.narrow(2, t - 1, 1)?.squeeze(2)?)
    }

    /// Host copy of `mu` as `[B][K][T]` points.
    pub fn trajectories_host(&self) -> Result<Vec<Vec<Vec<[f64; 2]>>>> {
        let (b, k, t, _) = self.gmm.mu.dims4()?;
        let flat: Vec<f32> = self.gmm.mu.flatten_all()?.to_vec1()?;
        Ok((0..b)
            .map(|i| {
                (0..k)
                    .map(|m| {
                        (0..t)
                            .map(|s| {
                                let o = ((i * k + m) * t + s) * 2;
                                [flat[o] as f64, flat[o + 1] as f64]
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }

    /// Host copy of the softmax mode probabilities, `[B][K]`.
    pub fn probs_host(&self) -> Result<Vec<Vec<f64>>> {
        let p = self.gmm.mode_probs()?.to_vec2::<f32>()?;
        Ok(p.into_iter()
            .map(|row| row.into_iter().map(f64::from).collect())
            .collect())
    }
}

/// Indices of the `min(limit, #valid)` valid polylines whose centers lie
/// closest to any reference waypoint, in increasing score order with ties to
/// the smaller index.
pub fn collect_dynamic_map(
    centers: &[[f64; 2]],
    mask: &[bool],
    reference: &[[f64; 2]],
    limit: usize,
) -> Result<Vec<usize>> {
    if limit == 0 {
        return Err(Error::Config("map collection limit must be positive".into()));
    }
    if centers.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} polyline centers but {} mask entries",
            centers.len(),
            mask.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Empty("map collection reference"));
    }
    let mut scored: Vec<(f64, usize)> = centers
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &valid))| valid)
        .map(|(i, (c, _))| {
            let d = reference
                .iter()
                .map(|r| (c[0] - r[0]).hypot(c[1] - r[1]))
                .fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    if scored.is_empty() {
        return Err(Error::Empty("valid map polylines"));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(limit);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

fn points_tensor(points: &[Vec<[f64; 2]>]) -> Result<Tensor> {
    let b = points.len();
    let k = points.first().map_or(0, Vec::len);
    let flat: Vec<f32> = points
        .iter()
        .flat_map(|row| row.iter().flat_map(|p| [p[0] as f32, p[1] as f32]))
        .collect();
    Ok(Tensor::from_vec(flat, (b, k, 2), &Device::Cpu)?)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm_self: LayerNorm,
    agent_attn: MultiHeadAttention,
    map_attn: MultiHeadAttention,
    fuse: Linear,
    norm_cross: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm_ffn: LayerNorm,
    traj_head: Mlp,
    score_head: Mlp,
}

impl DecoderLayer {
    fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let h = cfg.head_hidden;
        Ok(Self {
            self_attn: MultiHeadAttention::new(&b.pp("self_attn"), d, cfg.n_heads)?,
            norm_self: LayerNorm::new(&b.pp("norm_self"), d)?,
            agent_attn: MultiHeadAttention::new(&b.pp("agent_attn"), d, cfg.n_heads)?,
            map_attn: MultiHeadAttention::new(&b.pp("map_attn"), d, cfg.n_heads)?,
            fuse: Linear::new(&b.pp("fuse"), 3 * d, d)?,
            norm_cross: LayerNorm::new(&b.pp("norm_cross"), d)?,
            ffn_in: Linear::new(&b.pp("ffn_in"), d, cfg.ffn_dim)?,
            ffn_out: Linear::new(&b.pp("ffn_out"), cfg.ffn_dim, d)?,
            norm_ffn: LayerNorm::new(&b.pp("norm_ffn"), d)?,
            traj_head: Mlp::with_small_output(
                &b.pp("traj_head"),
                &[d, h, h, cfg.future_steps * 5],
                HEAD_INIT_SCALE,
            )?,
            score_head: Mlp::new(&b.pp("score_head"), &[d, h, h, 1])?,
        })
    }
}

/// Context tensors prepared once per forward pass.
struct Memory {
    agent_keys: Tensor,
    agent_values: Tensor,
    agent_bias: Tensor,
    map_keys: Tensor,
    map_values: Tensor,
    /// Interest agent token `[B, 1, D]`, fused into every query.
    center: Tensor,
}

#[derive(Clone, Debug)]
pub struct MotionDecoder {
    static_mlp: Mlp,
    search_mlp: Mlp,
    layers: Vec<DecoderLayer>,
    cfg: ModelConfig,
}

impl MotionDecoder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            static_mlp: Mlp::new(&b.pp("static_query"), &[d, d, d])?,
            search_mlp: Mlp::new(&b.pp("search_query"), &[d, d, d])?,
            layers: (0..cfg.n_dec_layers)
                .map(|i| DecoderLayer::new(&b.pp(format!("layer{i}")), cfg))
                .collect::<Result<_>>()?,
            cfg: cfg.clone(),
        })
    }

    /// `Q_I = MLP(PE(I))` for intention points `[B, K, 2]`.
    pub fn init_static_queries(&self, intention_points: &Tensor) -> Result<Tensor> {
        let pe = sine_position_encoding(intention_points, self.cfg.d_model)?;
        self.static_mlp.forward(&pe)
    }

    /// `Q_S = MLP(PE(anchor))`. Layer 0 anchors on the intention points, later
    /// layers on the previous layer's endpoints.
    pub fn update_search_queries(
        &self,
        prev: Option<&LayerPrediction>,
        intentions: &[Vec<[f64; 2]>],
    ) -> Result<(Tensor, Vec<Vec<[f64; 2]>>)> {
        let anchors = match prev {
            None => intentions.to_vec(),
            Some(p) => {
                let traj = p.trajectories_host()?;
                let anchors: Vec<Vec<[f64; 2]>> = traj
                    .iter()
                    .map(|modes| modes.iter().map(|t| *t.last().expect("T >= 1")).collect())
                    .collect();
                if anchors.iter().flatten().any(|a| !a[0].is_finite() || !a[1].is_finite()) {
                    return Err(Error::NonFinite {
                        what: "predicted endpoints".into(),
                        layer: p.layer_index,
                    });
                }
                anchors
            }
        };
        let pe = sine_position_encoding(&points_tensor(&anchors)?, self.cfg.d_model)?;
        Ok((self.search_mlp.forward(&pe)?, anchors))
    }

    fn memory(&self, ctx: &ContextEmbedding) -> Result<Memory> {
        let d = self.cfg.d_model;
        Ok(Memory {
            agent_keys: (&ctx.agent_tokens + sine_position_encoding(&ctx.agent_positions, d)?)?,
            agent_values: ctx.agent_tokens.clone(),
            agent_bias: mask_to_bias(&ctx.agent_mask.unsqueeze(1)?)?,
            map_keys: (&ctx.map_tokens + sine_position_encoding(&ctx.map_positions, d)?)?,
            map_values: ctx.map_tokens.clone(),
            center: ctx.agent_tokens.narrow(1, 0, 1)?,
        })
    }

    fn collection_bias(&self, collected: &[Vec<Vec<usize>>], n_m: usize) -> Result<Tensor> {
        let b = collected.len();
        let k = collected.first().map_or(0, Vec::len);
        let mut bias = vec![MASK_BIAS as f32; b * k * n_m];
        for (i, modes) in collected.iter().enumerate() {
            for (m, idx) in modes.iter().enumerate() {
                for &j in idx {
                    bias[(i * k + m) * n_m + j] = 0.0;
                }
            }
        }
        Ok(Tensor::from_vec(bias, (b, k, n_m), &Device::Cpu)?)
    }

    /// One decoder layer over content `[B, K, D]`; `map_bias` restricts each
    /// mode to its collected polylines. `base` is the trajectory `[B, K, T, 2]`
    /// the head's offsets are added to.
    #[allow(clippy::too_many_arguments)]
    fn decode_layer_inner(
        &self,
        j: usize,
        content: &Tensor,
        queries: &MotionQueryState,
        mem: &Memory,
        map_bias: &Tensor,
        base: &Tensor,
        ctx: &Ctx,
    ) -> Result<(GmmParams, Tensor)> {
        let layer = &self.layers[j];
        let rate = self.cfg.dropout;
        let qk = (content + &queries.static_queries)?;
        let sa = layer.self_attn.forward(&qk, &qk, content, None)?;
        let x = layer.norm_self.forward(&(content + ctx.dropout(&sa, rate)?)?)?;

        let q = (&x + &queries.search_queries)?;
        let agent = layer
            .agent_attn
            .forward(&q, &mem.agent_keys, &mem.agent_values, Some(&mem.agent_bias))?;
        let map = layer
            .map_attn
            .forward(&q, &mem.map_keys, &mem.map_values, Some(map_bias))?;
        let center = mem.center.broadcast_as(agent.shape())?;
        let fused = layer.fuse.forward(&Tensor::cat(&[agent, map, center], D::Minus1)?)?;
        let x = layer.norm_cross.forward(&(&x + ctx.dropout(&fused, rate)?)?)?;
        let f = layer.ffn_out.forward(&layer.ffn_in.forward(&x)?.relu()?)?;
        let x = layer.norm_ffn.forward(&(&x + ctx.dropout(&f, rate)?)?)?;

        let (b, k, _) = x.dims3()?;
        let t = self.cfg.future_steps;
        let head = layer.traj_head.forward(&x)?;
        let head = head.reshape((b, k, t, 5))?;
        let (offsets, spread) = (head.narrow(3, 0, 2)?, head.narrow(3, 2, 3)?);
        let mu = (base + (offsets * self.cfg.coord_scale)?)?.contiguous()?;
        let gmm = GmmParams {
            mu,
            log_sigma: spread.narrow(3, 0, 2)?.contiguous()?,
            rho_raw: spread.narrow(3, 2, 1)?.squeeze(3)?.contiguous()?,
            mode_logits: layer.score_head.forward(&x)?.squeeze(2)?,
            log_sigma_range: self.cfg.log_sigma_range,
        };
        Ok((gmm, x))
    }

    /// Single decoder layer with explicit collected sets, for callers that
    /// want to drive the stack themselves.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_layer(
        &self,
        j: usize,
        content: &Tensor,
        queries: &MotionQueryState,
        context: &ContextEmbedding,
        collected: &[Vec<Vec<usize>>],
        base: &Tensor,
        ctx: &Ctx,
    ) -> Result<(LayerPrediction, Tensor)> {
        if j >= self.layers.len() {
            return Err(Error::Shape(format!("decoder has no layer {j}")));
        }
        let mem = self.memory(context)?;
        let bias = self.collection_bias(collected, context.map_tokens.dim(1)?)?;
        let (gmm, x) = self.decode_layer_inner(j, content, queries, &mem, &bias, base, ctx)?;
        Ok((
            LayerPrediction {
                layer_index: j,
                gmm,
                anchors: queries.search_anchors.clone(),
                collected: collected.to_vec(),
            },
            x,
        ))
    }

    /// Straight ramp from the origin to each intention point, `[B, K, T, 2]`.
    fn initial_base(&self, intention_points: &Tensor) -> Result<Tensor> {
        let t = self.cfg.future_steps;
        let ramp: Vec<f32> = (1..=t).map(|s| s as f32 / t as f32).collect();
        let ramp = Tensor::from_vec(ramp, (1, 1, t, 1), &Device::Cpu)?;
        Ok(intention_points.unsqueeze(2)?.broadcast_mul(&ramp)?)
    }

    /// Runs every decoder layer, re-collecting the map and refreshing the
    /// searching queries from each layer's prediction.
    pub fn forward(
        &self,
        context: &ContextEmbedding,
        intention_points: &Tensor,
        host: &HostBatch,
        ctx: &Ctx,
    ) -> Result<Vec<LayerPrediction>> {
        let (b, k, _) = intention_points.dims3()?;
        if host.intentions.len() != b || host.intentions.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("host intentions disagree with the batch".into()));
        }
        let n_m = context.map_tokens.dim(1)?;
        let static_queries = self.init_static_queries(intention_points)?;
        let mem = self.memory(context)?;
        let mut content = Tensor::zeros((b, k, self.cfg.d_model), static_queries.dtype(), &Device::Cpu)?;
        let base = self.initial_base(intention_points)?;
        let mut out: Vec<LayerPrediction> = Vec::with_capacity(self.layers.len());
        for j in 0..self.layers.len() {
            let prev = out.last();
            let (search_queries, anchors) = self.update_search_queries(prev, &host.intentions)?;
            let references: Vec<Vec<Vec<[f64; 2]>>> = match prev {
                None => anchors.iter().map(|r| r.iter().map(|a| vec![*a]).collect()).collect(),
                Some(p) => p.trajectories_host()?,
            };
            let collected = references
                .iter()
                .enumerate()
                .map(|(i, modes)| {
                    modes
                        .iter()
                        .map(|r| {
                            collect_dynamic_map(
                                &host.map_centers[i],
                                &host.map_mask[i],
                                r,
                                self.cfg.map_collect_limit,
                            )
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let queries = MotionQueryState {
                static_queries: static_queries.clone(),
                search_queries,
                search_anchors: anchors,
            };
            let bias = self.collection_bias(&collected, n_m)?;
            let (gmm, x) = self.decode_layer_inner(j, &content, &queries, &mem, &bias, &base, ctx)?;
            let finite = gmm.mu.abs()?.sum_all()?.to_scalar::<f32>()?.is_finite()
                && gmm.mode_logits.abs()?.sum_all()?.to_scalar::<f32>()?.is_finite();
            if !finite {
                return Err(Error::NonFinite {
                    what: "decoder outputs".into(),
                    layer: j,
                });
            }
            content = x;
            out.push(LayerPrediction {
                layer_index: j,
                gmm,
                anchors: queries.search_anchors,
                collected,
            });
        }
        Ok(out)
    }
}
