//! The trainable model: dual encoder plus cross-modal decoder over one
//! parameter store.

use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::objectives::{CrossModalDecoder, DecoderConfig};
use crate::seeding::{stream_rng, Stream};
use crate::tape::ParamStore;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.width)?;
        if self.decoder.vocab_size != self.encoder.vocab_size {
            return Err(Error::Config(format!(
                "decoder vocabulary {} differs from encoder vocabulary {}",
                self.decoder.vocab_size, self.encoder.vocab_size
            )));
        }
        Ok(())
    }

    /// Sets the vocabulary size of both halves.
    pub fn with_vocab_size(mut self, vocab_size: usize) -> Self {
        self.encoder.vocab_size = vocab_size;
        self.decoder.vocab_size = vocab_size;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: DualEncoder,
    pub decoder: CrossModalDecoder,
}

impl Model {
    /// Fresh weights drawn from the initialization stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let encoder = DualEncoder::new(config.encoder.clone(), &mut params, &mut rng)?;
        let decoder = CrossModalDecoder::new(
            config.decoder.clone(),
            config.encoder.width,
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }
}
