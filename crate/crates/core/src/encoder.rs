//! Scene context encoding: a PointNet-style polyline encoder for agent
//! tracks and map polylines, then stacked transformer encoder layers over
//! the joint token sequence.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    mask_to_bias, sine_position_encoding, Builder, Ctx, LayerNorm, Linear, Mlp,
    MultiHeadAttention, MASK_BIAS,
};
use crate::scene::{AGENT_CHANNELS, MAP_CHANNELS};

/// Architecture hyperparameters shared by the encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    /// Number of motion query pairs `K`.
    pub num_modes: usize,
    /// Predicted future steps `T`.
    pub future_steps: usize,
    /// Past steps `H`; agent tokens cover `H + 1` steps.
    pub history_steps: usize,
    /// Map polylines collected per query for map cross-attention.
    pub map_collect_limit: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub ffn_dim: usize,
    /// Bounds on the predicted log standard deviations (log m).
    pub log_sigma_range: [f64; 2],
    /// Length unit (m) used to scale coordinates into and out of the network.
    pub coord_scale: f64,
    pub max_points_per_polyline: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 8,
            num_modes: 8,
            future_steps: 16,
            history_steps: 6,
            map_collect_limit: 16,
            dropout: 0.0,
            head_hidden: 128,
            ffn_dim: 256,
            log_sigma_range: [-5.0, 0.0],
            coord_scale: 10.0,
            max_points_per_polyline: 20,
        }
    }

    pub fn paper() -> Self {
        Self {
            d_model: 512,
            num_modes: 64,
            future_steps: 80,
            history_steps: 10,
            map_collect_limit: 128,
            head_hidden: 512,
            ffn_dim: 1024,
            dropout: 0.1,
            log_sigma_range: [-5.0, 5.0],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("num_modes", self.num_modes),
            ("future_steps", self.future_steps),
            ("map_collect_limit", self.map_collect_limit),
            ("head_hidden", self.head_hidden),
            ("ffn_dim", self.ffn_dim),
            ("max_points_per_polyline", self.max_points_per_polyline),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let [lo, hi] = self.log_sigma_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config("log_sigma_range must be finite and ordered".into()));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be divisible by 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.coord_scale > 0.0) {
            return Err(Error::Config(
                "dropout must lie in [0, 1) and coord_scale be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Encoded scene context for a batch: `A [B, N_a, D]`, `M [B, N_m, D]`.
#[derive(Clone, Debug)]
pub struct ContextEmbedding {
    pub agent_tokens: Tensor,
    pub map_tokens: Tensor,
    /// `{0,1}` masks `[B, N_a]` and `[B, N_m]`.
    pub agent_mask: Tensor,
    pub map_mask: Tensor,
    pub agent_positions: Tensor,
    pub map_positions: Tensor,
}

/// Shared per-point MLP followed by a masked max-pool over the point axis.
#[derive(Clone, Debug)]
pub struct PolylineEncoder {
    mlp: Mlp,
    input_scale: Tensor,
    channels: usize,
}

impl PolylineEncoder {
    pub fn new(b: &Builder, channels: usize, dim: usize, input_scale: Vec<f32>) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(b, &[channels, dim, dim, dim])?,
            input_scale: Tensor::from_vec(input_scale, channels, &Device::Cpu)?,
            channels,
        })
    }

    /// `features [B, N, P, C]`, `point_mask [B, N, P]` → `[B, N, D]`; rows
    /// with no valid point are zero.
    pub fn forward(&self, features: &Tensor, point_mask: &Tensor) -> Result<Tensor> {
        let (b, n, p, c) = features.dims4()?;
        if c != self.channels || point_mask.dims() != [b, n, p] {
            return Err(Error::Shape(format!(
                "polyline features {:?} / mask {:?} do not match {} channels",
                features.dims(),
                point_mask.dims(),
                self.channels
            )));
        }
        let h = self.mlp.forward(&features.broadcast_mul(&self.input_scale)?)?;
        let d = h.dim(D::Minus1)?;
        let keep = point_mask.unsqueeze(3)?.broadcast_as((b, n, p, d))?.ne(0f32)?;
        let floor = Tensor::full(MASK_BIAS as f32, (b, n, p, d), features.device())?;
        let pooled = keep.where_cond(&h, &floor)?.max(2)?;
        let any_valid = point_mask.max_keepdim(2)?;
        Ok(pooled.broadcast_mul(&any_valid)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl EncoderLayer {
    fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(&b.pp("norm_attn"), cfg.d_model)?,
            attn: MultiHeadAttention::new(&b.pp("attn"), cfg.d_model, cfg.n_heads)?,
            norm_ffn: LayerNorm::new(&b.pp("norm_ffn"), cfg.d_model)?,
            ffn_in: Linear::new(&b.pp("ffn_in"), cfg.d_model, cfg.ffn_dim)?,
            ffn_out: Linear::new(&b.pp("ffn_out"), cfg.ffn_dim, cfg.d_model)?,
        })
    }

    /// Pre-norm self-attention block; position encodings join queries and keys.
    fn forward(&self, x: &Tensor, pe: &Tensor, bias: &Tensor, dropout: f64, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_attn.forward(x)?;
        let qk = (&h + pe)?;
        let a = self.attn.forward(&qk, &qk, &h, Some(bias))?;
        let x = (x + ctx.dropout(&a, dropout)?)?;
        let h = self.norm_ffn.forward(&x)?;
        let f = self.ffn_out.forward(&self.ffn_in.forward(&h)?.relu()?)?;
        Ok((x + ctx.dropout(&f, dropout)?)?)
    }
}

/// Polyline encoders plus the transformer encoder stack.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    agent_encoder: PolylineEncoder,
    map_encoder: PolylineEncoder,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    d_model: usize,
    dropout: f64,
}

impl ContextEncoder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let inv = (1.0 / cfg.coord_scale) as f32;
        let mut agent_scale = vec![1f32; AGENT_CHANNELS];
        for c in [0, 1, 4, 5] {
            agent_scale[c] = inv;
        }
        let mut map_scale = vec![1f32; MAP_CHANNELS];
        map_scale[0] = inv;
        map_scale[1] = inv;
        Ok(Self {
            agent_encoder: PolylineEncoder::new(
                &b.pp("agent_polyline"),
                AGENT_CHANNELS,
                cfg.d_model,
                agent_scale,
            )?,
            map_encoder: PolylineEncoder::new(
                &b.pp("map_polyline"),
                MAP_CHANNELS,
                cfg.d_model,
                map_scale,
            )?,
            layers: (0..cfg.n_enc_layers)
                .map(|i| EncoderLayer::new(&b.pp(format!("layer{i}")), cfg))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new(&b.pp("final_norm"), cfg.d_model)?,
            d_model: cfg.d_model,
            dropout: cfg.dropout,
        })
    }

    /// Token features `(A0, M0)` from agent tracks and map polylines.
    pub fn encode_polylines(
        &self,
        agent_features: &Tensor,
        agent_step_mask: &Tensor,
        map_features: &Tensor,
        map_point_mask: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        Ok((
            self.agent_encoder.forward(agent_features, agent_step_mask)?,
            self.map_encoder.forward(map_features, map_point_mask)?,
        ))
    }

    /// Joint self-attention over `[A0; M0]` with 2D sinusoidal position
    /// encodings of each token's location; masked tokens are excluded as
    /// keys and zeroed at the output.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_context(
        &self,
        agent_tokens: &Tensor,
        map_tokens: &Tensor,
        agent_positions: &Tensor,
        map_positions: &Tensor,
        agent_mask: &Tensor,
        map_mask: &Tensor,
        ctx: &Ctx,
    ) -> Result<ContextEmbedding> {
        let n_a = agent_tokens.dim(1)?;
        let x = Tensor::cat(&[agent_tokens, map_tokens], 1)?;
        let pos = Tensor::cat(&[agent_positions, map_positions], 1)?;
        let pe = sine_position_encoding(&pos, self.d_model)?;
        let mask = Tensor::cat(&[agent_mask, map_mask], 1)?;
        let bias = mask_to_bias(&mask.unsqueeze(1)?)?;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(&h, &pe, &bias, self.dropout, ctx)?;
        }
        let out = self.final_norm.forward(&h)?.broadcast_mul(&mask.unsqueeze(2)?)?;
        let n = out.dim(1)?;
        Ok(ContextEmbedding {
            agent_tokens: out.narrow(1, 0, n_a)?,
            map_tokens: out.narrow(1, n_a, n - n_a)?,
            agent_mask: agent_mask.clone(),
            map_mask: map_mask.clone(),
            agent_positions: agent_positions.clone(),
            map_positions: map_positions.clone(),
        })
    }
}
