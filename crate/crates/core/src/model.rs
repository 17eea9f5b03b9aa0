//! The trainable model: text head and image head sharing one descriptor
//! space.

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image_aggregator::{
    encode_image, Aggregation, AggregatorConfig, AggregatorParams, BoundAggregator, ImageTokenSet,
};
use crate::layers::{join, Parameters};
use crate::numerics::{Matrix, Rng, Tape};
use crate::text_head::{encode_text, BoundTextHead, TextHeadConfig, TextHeadParams, TextTokenSequence};

/// Version tag stored with every set of parameters.
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text: TextHeadConfig,
    pub image: AggregatorConfig,
    /// Multiplier on the `1/sqrt(fan_in)` initialization scale.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text: TextHeadConfig::default(),
            image: AggregatorConfig::default(),
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.image.validate()?;
        if self.text.model_dim != self.image.descriptor_dim() {
            return Err(Error::config(format!(
                "text descriptor width {} differs from image descriptor width {}",
                self.text.model_dim,
                self.image.descriptor_dim()
            )));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::config("init_scale must be positive"));
        }
        Ok(())
    }

    /// Switches the image aggregation and resizes the text output to match.
    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.image.aggregation = aggregation;
        self.text.model_dim = self.image.descriptor_dim();
        self
    }

    /// Sets both token widths, e.g. from a loaded dataset.
    pub fn with_token_dims(mut self, text_dim: usize, image_dim: usize) -> Self {
        self.text.token_dim = text_dim;
        self.image.token_dim = image_dim;
        self.text.model_dim = self.image.descriptor_dim();
        self
    }

    pub fn descriptor_dim(&self) -> usize {
        self.text.model_dim
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub text: TextHeadParams,
    pub image: AggregatorParams,
    pub version: u32,
}

pub struct BoundModel {
    pub text: BoundTextHead,
    pub image: BoundAggregator,
}

impl ModelParams {
    /// Deterministic initialization; the heads draw from separate
    /// substreams of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let text = TextHeadParams::init(config.text, config.init_scale, &mut root.substream(0))?;
        let image =
            AggregatorParams::init(config.image, config.init_scale, &mut root.substream(1))?;
        Ok(Self {
            config,
            text,
            image,
            version: MODEL_VERSION,
        })
    }

    /// Registers every tensor on `tape` in [`Parameters`] visit order.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            text: self.text.bind(tape),
            image: self.image.bind(tape),
        }
    }

    pub fn encode_text(&self, seq: &TextTokenSequence) -> Result<Descriptor> {
        encode_text(seq, &self.text)
    }

    pub fn encode_image(&self, tokens: &ImageTokenSet) -> Result<Descriptor> {
        encode_image(tokens, &self.image)
    }

    /// Checks a dataset's token widths against the heads.
    pub fn check_token_dims(&self, text_dim: usize, image_dim: usize) -> Result<()> {
        if text_dim != self.config.text.token_dim || image_dim != self.config.image.token_dim {
            return Err(Error::config(format!(
                "data has text/image token widths {text_dim}/{image_dim}, model expects {}/{}",
                self.config.text.token_dim, self.config.image.token_dim
            )));
        }
        Ok(())
    }
}

impl Parameters for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.text.visit(&join(prefix, "text"), f);
        self.image.visit(&join(prefix, "image"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.text.visit_mut(&join(prefix, "text"), f);
        self.image.visit_mut(&join(prefix, "image"), f);
    }
}
