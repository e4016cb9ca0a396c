//! Sampling-based forecasts: autoregressive token paths, decoding back to
//! the original units, and per-step median and quantile summaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::softmax_unchecked;
use crate::quantizer::{detokenize, encode_with_scale, fit_scale, Grid};
use crate::seqmodel::Model;

pub const DEFAULT_PATHS: usize = 20;

/// The nine evaluation levels 0.1, 0.2, ..., 0.9.
pub fn default_levels() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Draws one value token from `logits`. Logits at or beyond `value_tokens`
/// (the special tokens) are excluded.
pub fn sample_token<R: Rng>(logits: &[f64], value_tokens: usize, temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits[..value_tokens].iter().map(|z| z / temperature).collect();
    let probs = softmax_unchecked(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(value_tokens - 1)
}

/// Seed of path `index` for a run seeded with `seed`.
pub fn path_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Samples `n_paths` independent continuations of `context` of length
/// `horizon`. The model sees at most its context length of trailing tokens.
pub fn sample_paths(
    model: &Model,
    context: &[usize],
    horizon: usize,
    n_paths: usize,
    seed: u64,
    temperature: f64,
) -> Result<Vec<Vec<usize>>> {
    if context.is_empty() {
        return Err(Error::Shape("empty forecast context".into()));
    }
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be >= 1".into()));
    }
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be >= 1".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let value_tokens = model.vocab_size() - 2;
    let m = model.context_length();
    (0..n_paths)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, index));
            let mut tokens = context.to_vec();
            let mut path = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let window = &tokens[tokens.len().saturating_sub(m)..];
                let logits = model.next_token_logits(window)?;
                let next = sample_token(&logits, value_tokens, temperature, &mut rng);
                path.push(next);
                tokens.push(next);
            }
            Ok(path)
        })
        .collect()
}

pub fn decode_paths(token_paths: &[Vec<usize>], grid: &Grid, scale: f64) -> Result<Vec<Vec<f64>>> {
    token_paths
        .iter()
        .map(|path| {
            path.iter()
                .map(|&t| detokenize(t, grid).map(|c| c * scale))
                .collect()
        })
        .collect()
}

/// Empirical quantile of `sorted` with linear interpolation between order
/// statistics: position `q * (n - 1)`.
pub fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Per-step median and quantiles (`levels.len() x horizon`) of the paths.
pub fn summarize(decoded_paths: &[Vec<f64>], levels: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let horizon = match decoded_paths.first() {
        Some(p) => p.len(),
        None => return Err(Error::Shape("no forecast paths to summarize".into())),
    };
    if decoded_paths.iter().any(|p| p.len() != horizon) {
        return Err(Error::Shape("forecast paths have different lengths".into()));
    }
    if let Some(&bad) = levels.iter().find(|&&q| !(0.0..=1.0).contains(&q)) {
        return Err(Error::Config(format!("quantile level {bad} outside [0, 1]")));
    }
    let mut median = Vec::with_capacity(horizon);
    let mut quantiles = vec![Vec::with_capacity(horizon); levels.len()];
    for t in 0..horizon {
        let mut column: Vec<f64> = decoded_paths.iter().map(|p| p[t]).collect();
        column.sort_by(f64::total_cmp);
        median.push(interpolated_quantile(&column, 0.5));
        for (row, &q) in quantiles.iter_mut().zip(levels) {
            row.push(interpolated_quantile(&column, q));
        }
    }
    Ok((median, quantiles))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub token_paths: Vec<Vec<usize>>,
    pub decoded_paths: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    /// One row per level, one column per step.
    pub quantiles: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_paths: DEFAULT_PATHS,
            seed: 0,
            temperature: 1.0,
        }
    }
}

/// Full pipeline for one series: scale on `history`, tokenize its tail,
/// sample, decode and summarize.
pub fn forecast_series(
    model: &Model,
    grid: &Grid,
    history: &[f64],
    horizon: usize,
    sampling: &SamplingConfig,
    levels: &[f64],
) -> Result<ForecastBundle> {
    if grid.vocab_size() != model.vocab_size() {
        return Err(Error::Config(format!(
            "grid vocabulary {} does not match the model vocabulary {}",
            grid.vocab_size(),
            model.vocab_size()
        )));
    }
    let scale = fit_scale(history)?;
    let tail = &history[history.len().saturating_sub(model.context_length())..];
    let context = encode_with_scale(tail, grid, scale)?;
    let token_paths = sample_paths(
        model,
        &context,
        horizon,
        sampling.n_paths,
        sampling.seed,
        sampling.temperature,
    )?;
    let decoded_paths = decode_paths(&token_paths, grid, scale)?;
    let (median, quantiles) = summarize(&decoded_paths, levels)?;
    Ok(ForecastBundle {
        token_paths,
        decoded_paths,
        median,
        quantiles,
        levels: levels.to_vec(),
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::build_grid;
    use crate::seqmodel::ModelConfig;
    use proptest::prelude::*;

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            vocab_size: 7,
            context_length: 4,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            seed: 3,
        })
        .unwrap()
    }

    /// A model whose head puts (numerically) all mass on `token`.
    fn degenerate_model(token: usize) -> Model {
        let mut model = tiny_model();
        let head = model.head_range();
        let vocab = model.vocab_size();
        let params = model.parameters_mut();
        params[head.clone()].fill(0.0);
        params[head.end - vocab + token] = 1000.0;
        model
    }

    #[test]
    fn degenerate_model_repeats_its_token() {
        let model = degenerate_model(3);
        let paths = sample_paths(&model, &[0, 1], 6, 5, 42, 1.0).unwrap();
        assert!(paths.iter().all(|p| p == &vec![3; 6]));
    }

    #[test]
    fn specials_are_never_sampled() {
        // All mass on PAD: sampling must still return a value token.
        let model = degenerate_model(5);
        let paths = sample_paths(&model, &[0], 4, 3, 1, 1.0).unwrap();
        assert!(paths.iter().flatten().all(|&t| t < 5));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let model = tiny_model();
        let a = sample_paths(&model, &[1, 2, 3], 8, 4, 99, 1.0).unwrap();
        let b = sample_paths(&model, &[1, 2, 3], 8, 4, 99, 1.0).unwrap();
        assert_eq!(a, b);
        // Each row only depends on its own derived seed.
        let single = sample_paths(&model, &[1, 2, 3], 8, 1, path_seed(99, 2), 1.0).unwrap();
        assert_eq!(single[0], a[2]);
    }

    #[test]
    fn sampling_errors() {
        let model = tiny_model();
        assert!(sample_paths(&model, &[1], 0, 1, 0, 1.0).is_err());
        assert!(sample_paths(&model, &[], 2, 1, 0, 1.0).is_err());
        assert!(sample_paths(&model, &[1], 2, 0, 0, 1.0).is_err());
        assert!(sample_paths(&model, &[1], 2, 1, 0, 0.0).is_err());
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        let logits = [0.3, -1.2, 1.5, 0.0, -0.4, 9.0, 9.0];
        let probs = softmax_unchecked(&logits[..5]);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed(7, i));
            counts[sample_token(&logits, 5, 1.0, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{c} vs {p}");
        }
    }

    #[test]
    fn decode_examples() {
        let grid = build_grid(5, -2.0, 2.0).unwrap();
        let out = decode_paths(&[vec![2, 4]], &grid, 4.0).unwrap();
        assert_eq!(out, vec![vec![0.0, 8.0]]);
        let out = decode_paths(&[vec![0, 1, 2, 3, 4]], &grid, 1.0).unwrap();
        assert_eq!(out[0], grid.centroids());
        assert!(decode_paths(&[vec![5]], &grid, 1.0).is_err());
    }

    #[test]
    fn summarize_examples() {
        let levels = default_levels();
        let (median, q) = summarize(&vec![vec![3.5, -1.0]; 4], &levels).unwrap();
        assert_eq!(median, vec![3.5, -1.0]);
        assert!(q.iter().all(|row| row == &vec![3.5, -1.0]));

        let paths = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let (median, _) = summarize(&paths, &[0.5]).unwrap();
        assert_eq!(median, vec![2.5]);
        assert!(summarize(&[], &levels).is_err());
    }

    #[test]
    fn forecast_of_degenerate_model_is_constant() {
        let model = degenerate_model(4);
        let grid = build_grid(5, -2.0, 2.0).unwrap();
        let history = [1.0, -3.0, 2.0, 2.0];
        let bundle = forecast_series(&model, &grid, &history, 3, &SamplingConfig::default(), &default_levels()).unwrap();
        assert_eq!(bundle.scale, 2.0);
        assert_eq!(bundle.median, vec![4.0; 3]);
        assert!(bundle.quantiles.iter().all(|row| row == &vec![4.0; 3]));
    }

    proptest! {
        #[test]
        fn quantiles_are_monotone(
            paths in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 5), 1..30)
        ) {
            let levels = default_levels();
            let (median, q) = summarize(&paths, &levels).unwrap();
            for t in 0..5 {
                for w in q.windows(2) {
                    prop_assert!(w[0][t] <= w[1][t]);
                }
                prop_assert_eq!(median[t], q[4][t]);
            }
        }
    }
}
