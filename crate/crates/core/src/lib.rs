//! Tokenized time-series forecasting with an optimal-transport training
//! loss.
//!
//! Series are mean-scaled and quantized onto a uniform grid of value tokens,
//! a small autoregressive transformer is trained on the token sequences with
//! either cross-entropy or the closed-form Wasserstein loss, and forecasts
//! are sampled, decoded and scored with MASE and weighted quantile loss
//! relative to a seasonal-naive baseline.

pub mod data;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod loss;
pub mod metrics;
pub mod quantizer;
pub mod seqmodel;

pub use data::{Dataset, GeneratorKind, GeneratorSpec, SuiteManifest};
pub use error::{Error, Result};
pub use experiment::{CompareOutcome, ExperimentConfig};
pub use forecast::ForecastBundle;
pub use loss::{LossKind, LossOutput, PowerMode, TokenLoss};
pub use metrics::{DeltaTable, Metric, MetricReport};
pub use quantizer::{Grid, GridSpec, TimeSeries, TokenizedSeries};
pub use seqmodel::{Checkpoint, Model, ModelConfig, TrainConfig};
