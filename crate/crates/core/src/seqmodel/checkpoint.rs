use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::quantizer::GridSpec;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, kept as a decimal string for portability.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Versioned JSON container for a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub grid: GridSpec,
    pub train: Option<TrainConfig>,
    pub rng: Option<RngState>,
    pub parameters: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &Model, grid: GridSpec, train: Option<TrainConfig>, rng: Option<RngState>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: *model.config(),
            grid,
            train,
            rng,
            parameters: model.parameters().to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_parameters(self.model, self.parameters.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Config(format!("cannot serialize checkpoint: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!(
                    "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                    ckpt.version
                ),
            });
        }
        if ckpt.grid.d + 2 != ckpt.model.vocab_size {
            return Err(Error::Config(format!(
                "checkpoint grid has {} value tokens but the model vocabulary is {}",
                ckpt.grid.d, ckpt.model.vocab_size
            )));
        }
        Ok(ckpt)
    }
}
