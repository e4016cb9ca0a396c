//! A small decoder-only transformer over the token vocabulary, trained with
//! hand-written reverse-mode gradients, plus its trainer and checkpoints.

mod checkpoint;
mod train;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use train::{
    learning_rate, train, write_loss_curve, Adam, LossRecord, TrainConfig, TrainedModel,
    WindowSampler,
};
pub use transformer::{ForwardCache, Gradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Value tokens plus the two specials.
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 66,
            context_length: 64,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover two value tokens and the specials".into()));
        }
        if self.context_length < 2 {
            return Err(Error::Config(format!(
                "context_length must be >= 2, got {}",
                self.context_length
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `V*D + M*D + L*(12*D^2 + 13*D) + 2*D + D*V + V`.
    pub fn parameter_count(&self) -> usize {
        let (v, m, d, l) = (
            self.vocab_size,
            self.context_length,
            self.embed_dim,
            self.num_layers,
        );
        v * d + m * d + l * (12 * d * d + 13 * d) + 2 * d + d * v + v
    }
}

/// A rectangular block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub ln1_gain: Slot,
    pub ln1_bias: Slot,
    pub qkv_weight: Slot,
    pub qkv_bias: Slot,
    pub out_weight: Slot,
    pub out_bias: Slot,
    pub ln2_gain: Slot,
    pub ln2_bias: Slot,
    pub fc_weight: Slot,
    pub fc_bias: Slot,
    pub proj_weight: Slot,
    pub proj_bias: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub token_embedding: Slot,
    pub position_embedding: Slot,
    pub layers: Vec<LayerSlots>,
    pub final_gain: Slot,
    pub final_bias: Slot,
    pub head_weight: Slot,
    pub head_bias: Slot,
    pub total: usize,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let mut offset = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let token_embedding = slot(config.vocab_size, d);
        let position_embedding = slot(config.context_length, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerSlots {
                ln1_gain: slot(1, d),
                ln1_bias: slot(1, d),
                qkv_weight: slot(d, 3 * d),
                qkv_bias: slot(1, 3 * d),
                out_weight: slot(d, d),
                out_bias: slot(1, d),
                ln2_gain: slot(1, d),
                ln2_bias: slot(1, d),
                fc_weight: slot(d, 4 * d),
                fc_bias: slot(1, 4 * d),
                proj_weight: slot(4 * d, d),
                proj_bias: slot(1, d),
            })
            .collect();
        let final_gain = slot(1, d);
        let final_bias = slot(1, d);
        let head_weight = slot(d, config.vocab_size);
        let head_bias = slot(1, config.vocab_size);
        Layout {
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            head_weight,
            head_bias,
            total: offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<f64>,
    layout: Layout,
}

impl Model {
    /// Deterministic initialization from `config.seed`: N(0, 0.02) weights,
    /// residual projections shrunk by `1/sqrt(2L)`, zero biases, unit gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let residual = 1.0 / ((2 * config.num_layers) as f64).sqrt();

        let mut fill = |slot: Slot, factor: f64, params: &mut [f64]| {
            for p in &mut params[slot.range()] {
                *p = normal.sample(&mut rng) * factor;
            }
        };
        fill(layout.token_embedding, 1.0, &mut params);
        fill(layout.position_embedding, 1.0, &mut params);
        for layer in &layout.layers {
            params[layer.ln1_gain.range()].fill(1.0);
            params[layer.ln2_gain.range()].fill(1.0);
            fill(layer.qkv_weight, 1.0, &mut params);
            fill(layer.out_weight, residual, &mut params);
            fill(layer.fc_weight, 1.0, &mut params);
            fill(layer.proj_weight, residual, &mut params);
        }
        params[layout.final_gain.range()].fill(1.0);
        fill(layout.head_weight, 1.0, &mut params);

        Ok(Model {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model around an existing parameter vector.
    pub fn from_parameters(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        crate::error::check_finite(&params)?;
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn context_length(&self) -> usize {
        self.config.context_length
    }

    /// Range of the output-head weights and bias inside the parameter vector.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.layout.head_weight.offset..self.layout.head_bias.range().end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_layout() {
        let config = ModelConfig {
            vocab_size: 66,
            context_length: 64,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            seed: 1,
        };
        // Counted tensor by tensor:
        //   embeddings 66*32 + 64*32, per layer 2*(2*32) + (32*96 + 96)
        //   + (32*32 + 32) + (32*128 + 128) + (128*32 + 32), final norm 2*32,
        //   head 32*66 + 66.
        let per_layer = 4 * 32 + (32 * 96 + 96) + (32 * 32 + 32) + (32 * 128 + 128) + (128 * 32 + 32);
        let by_hand = 66 * 32 + 64 * 32 + 2 * per_layer + 2 * 32 + 32 * 66 + 66;
        assert_eq!(by_hand, 31810);
        assert_eq!(config.parameter_count(), by_hand);
        assert_eq!(Model::new(config).unwrap().parameter_count(), by_hand);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let config = ModelConfig::default();
        let a = Model::new(config).unwrap();
        let b = Model::new(config).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = Model::new(ModelConfig { seed: 7, ..config }).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = ModelConfig::default();
        for bad in [
            ModelConfig { context_length: 1, ..base },
            ModelConfig { embed_dim: 30, num_heads: 4, ..base },
            ModelConfig { num_layers: 0, ..base },
            ModelConfig { num_heads: 0, ..base },
            ModelConfig { vocab_size: 2, ..base },
        ] {
            assert!(matches!(Model::new(bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn from_parameters_checks_length() {
        let config = ModelConfig::default();
        assert!(Model::from_parameters(config, vec![0.0; 3]).is_err());
        let model = Model::new(config).unwrap();
        let rebuilt = Model::from_parameters(config, model.parameters().to_vec()).unwrap();
        assert_eq!(rebuilt, model);
    }
}
