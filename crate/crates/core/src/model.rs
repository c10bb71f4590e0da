//! The full network: context encoder plus motion decoder over one parameter
//! store.

use crate::batch::Batch;
use crate::decoder::{LayerPrediction, MotionDecoder};
use crate::encoder::{ContextEmbedding, ContextEncoder, ModelConfig};
use crate::error::Result;
use crate::nn::{Builder, Ctx, ParamStore};

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub context: ContextEmbedding,
    pub layers: Vec<LayerPrediction>,
}

impl ModelOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.layers.last().expect("decoder has at least one layer")
    }
}

pub struct MotionTransformer {
    pub config: ModelConfig,
    pub encoder: ContextEncoder,
    pub decoder: MotionDecoder,
    pub params: ParamStore,
}

impl MotionTransformer {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let b = Builder::new(seed);
        let encoder = ContextEncoder::new(&b.pp("encoder"), config)?;
        let decoder = MotionDecoder::new(&b.pp("decoder"), config)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            params: b.finish(),
        })
    }

    pub fn encode(&self, batch: &Batch, ctx: &Ctx) -> Result<ContextEmbedding> {
        let (a0, m0) = self.encoder.encode_polylines(
            &batch.agent_features,
            &batch.agent_step_mask,
            &batch.map_features,
            &batch.map_point_mask,
        )?;
        self.encoder.encode_context(
            &a0,
            &m0,
            &batch.agent_positions,
            &batch.map_positions,
            &batch.agent_mask,
            &batch.map_mask,
            ctx,
        )
    }

    pub fn forward(&self, batch: &Batch, ctx: &Ctx) -> Result<ModelOutput> {
        let context = self.encode(batch, ctx)?;
        let layers = self
            .decoder
            .forward(&context, &batch.intention_points, &batch.host, ctx)?;
        Ok(ModelOutput { context, layers })
    }
}
