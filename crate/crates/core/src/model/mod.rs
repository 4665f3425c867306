//! The component-aware transformer: a ViT-style encoder with body tokens
//! and a high-resolution component decoder for hands and face.

mod config;
pub mod decoder;
pub mod encoder;
mod params;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig};
pub use decoder::{ComponentOutput, DeformWeights, Pathway};
pub use encoder::EncoderOutput;
pub use params::{Ctx, Init, ParamSpec, ParamStore, SpecList, INIT_STD, LN_EPS};

use crate::body::SmplxParams;
use crate::error::Result;
use crate::tensor::{Tensor, Var};

/// Weights plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct CatModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub struct ModelOutput {
    /// Flat `[182]` parameter vector in [`SmplxParams`] layout.
    pub params: Var,
    /// `[3, 4]` left hand, right hand, face boxes.
    pub boxes: Var,
    /// The encoder's body slice `[79]`.
    pub body: Var,
    pub encoder: EncoderOutput,
    /// Left hand, right hand, face; empty when the decoder is disabled.
    pub components: Vec<ComponentOutput>,
}

/// Detached prediction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub params: SmplxParams,
    pub boxes: [[f64; 4]; 3],
}

impl CatModel {
    pub fn specs(config: &ModelConfig) -> SpecList {
        let mut s = SpecList::default();
        encoder::specs(&config.encoder, &mut s);
        decoder::specs(&config.encoder, &config.decoder, &mut s);
        s
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&Self::specs(&config), seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing weights after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = ParamStore::init(&Self::specs(&config), 0)?;
        expected.check_layout(&params)?;
        Ok(Self { config, params })
    }

    pub fn ctx(&self, trainable: bool) -> Ctx<'_> {
        Ctx::new(&self.params, trainable)
    }

    /// Full forward pass on an `[H, W, 3]` image in `[-1, 1]`.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<ModelOutput> {
        let enc_cfg = &self.config.encoder;
        let dec_cfg = &self.config.decoder;
        let enc = encoder::encode(ctx, enc_cfg, image)?;
        let body = encoder::regress_body(ctx, enc.body_tokens)?;
        let boxes = encoder::regress_boxes(ctx, enc.features)?;
        let mut components = Vec::new();
        let rest = if dec_cfg.enabled {
            let base = decoder::feature_map(&mut ctx.tape, enc_cfg, enc.features)?;
            let levels = decoder::upsample_multiscale(ctx, dec_cfg, base)?;
            for (i, (pw, mirror)) in [(Pathway::Hand, true), (Pathway::Hand, false), (Pathway::Face, false)]
                .into_iter()
                .enumerate()
            {
                let b = ctx.tape.narrow(boxes, 0, i, 1)?;
                components.push(decoder::decode_component(ctx, dec_cfg, pw, &levels, b, mirror)?);
            }
            let signs = ctx.tape.constant(decoder::mirror_signs());
            let lhand = ctx.tape.mul(components[0].params, signs)?;
            ctx.tape.concat(&[lhand, components[1].params, components[2].params], 0)?
        } else {
            decoder::regress_fallback(ctx, enc.body_tokens)?
        };
        let params = ctx.tape.concat(&[body, rest], 0)?;
        Ok(ModelOutput {
            params,
            boxes,
            body,
            encoder: enc,
            components,
        })
    }

    /// Inference without gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut ctx = self.ctx(false);
        let img = ctx.tape.constant(image.clone());
        let out = self.forward(&mut ctx, img)?;
        let params = SmplxParams::from_slice(ctx.tape.value(out.params).data())?;
        let b = ctx.tape.value(out.boxes).data();
        let boxes = std::array::from_fn(|i| std::array::from_fn(|j| b[4 * i + j]));
        Ok(Prediction { params, boxes })
    }
}
