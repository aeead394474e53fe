use ndarray::Array2;

use crate::decoder::{self, DecoderParameters};
use crate::encoder::{self, Activation, EncoderParameters, Representation};
use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub components: usize,
    pub stride: usize,
    pub kernel_len: usize,
    pub dilated_len: usize,
    pub dilation: usize,
    pub square_freq: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            components: 800,
            stride: 256,
            kernel_len: 2048,
            dilated_len: 5,
            dilation: 10,
            square_freq: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components < 2 {
            return Err(Error::InvalidConfig("components must be >= 2".into()));
        }
        if self.stride == 0 || self.kernel_len == 0 || self.dilated_len == 0 || self.dilation == 0 {
            return Err(Error::InvalidConfig(
                "stride, kernel lengths and dilation must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder and decoder trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParameters,
    pub decoder: DecoderParameters,
    pub activation: Activation,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            encoder: encoder::init_encoder(
                cfg.components,
                cfg.kernel_len,
                cfg.dilated_len,
                cfg.stride,
                cfg.dilation,
                seed,
            )?,
            decoder: DecoderParameters::init(cfg.components, cfg.kernel_len, cfg.stride, cfg.square_freq)?,
            activation: Activation::Relu,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            components: self.encoder.components(),
            stride: self.encoder.stride,
            kernel_len: self.encoder.kernel_len(),
            dilated_len: self.encoder.dilated_len(),
            dilation: self.encoder.dilation,
            square_freq: self.decoder.square_freq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.components() != self.decoder.components() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.encoder.components()],
                found: vec![self.decoder.components()],
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Representation {
        encoder::encode(x, &self.encoder, self.activation)
    }

    /// Decodes to exactly `out_len` samples.
    pub fn decode(&self, activations: &Array2<f64>, out_len: usize) -> Result<Vec<f64>> {
        decoder::synthesize(activations, &self.decoder, Some(out_len))
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let rep = self.encode(x);
        self.decode(&rep.activations, x.len())
    }
}
