use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use super::Model;
use crate::error::{Error, Result};
use crate::loss::{LossKind, TokenLoss};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_initial: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr_initial: 1e-3,
            batch_size: 8,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate must be > 0, got {}",
                self.lr_initial
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Linear decay from `lr_initial` at step 0 towards 0 at step `steps`.
pub fn learning_rate(lr_initial: f64, step: usize, steps: usize) -> f64 {
    lr_initial * (1.0 - step as f64 / steps as f64)
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; len],
            second: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Draws teacher-forcing windows uniformly over `(series, end)` pairs. A
/// window ending at `end` feeds up to `context` tokens before `end` and
/// targets the same positions shifted by one.
#[derive(Debug, Clone)]
pub struct WindowSampler<'a> {
    series: &'a [Vec<usize>],
    context: usize,
    /// Cumulative number of windows per series.
    cumulative: Vec<usize>,
}

impl<'a> WindowSampler<'a> {
    pub fn new(series: &'a [Vec<usize>], context: usize) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(series.len());
        let mut total = 0;
        for s in series {
            total += s.len().saturating_sub(1);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::Config(
                "training data has no series with at least two tokens".into(),
            ));
        }
        Ok(WindowSampler {
            series,
            context,
            cumulative,
        })
    }

    pub fn window_count(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    /// Window number `index` in `0..window_count()`.
    pub fn window(&self, index: usize) -> (&'a [usize], &'a [usize]) {
        let which = self.cumulative.partition_point(|&c| c <= index);
        let before = if which == 0 { 0 } else { self.cumulative[which - 1] };
        let end = index - before + 1;
        let start = end.saturating_sub(self.context);
        let s = &self.series[which];
        (&s[start..end], &s[start + 1..end + 1])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (&'a [usize], &'a [usize]) {
        self.window(rng.random_range(0..self.window_count()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<LossRecord>,
    pub rng_state: RngState,
}

/// Runs `tc.steps` Adam steps on windows drawn from `dataset` (token
/// sequences). `r` and `value_tokens` describe the grid the tokens came from.
pub fn train(
    mut model: Model,
    dataset: &[Vec<usize>],
    tc: &TrainConfig,
    r: f64,
    value_tokens: usize,
) -> Result<TrainedModel> {
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    if value_tokens + 2 != model.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match {value_tokens} value tokens plus specials",
            model.vocab_size()
        )));
    }
    let loss = TokenLoss::new(tc.loss, r, value_tokens)?;
    let sampler = WindowSampler::new(dataset, model.context_length())?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(model.parameter_count());
    let mut grad = vec![0.0; model.parameter_count()];
    let mut history = Vec::with_capacity(tc.steps);
    let weight = 1.0 / tc.batch_size as f64;

    for step in 0..tc.steps {
        let lr = learning_rate(tc.lr_initial, step, tc.steps);
        grad.fill(0.0);
        let mut total = 0.0;
        for _ in 0..tc.batch_size {
            let (inputs, targets) = sampler.sample(&mut rng);
            total += model.accumulate_gradient(inputs, targets, &loss, weight, &mut grad)?;
        }
        let value = total * weight;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: value });
        }
        adam.step(model.parameters_mut(), &grad, lr);
        if model.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step, loss: value });
        }
        history.push(LossRecord { step, lr, loss: value });
    }
    Ok(TrainedModel {
        model,
        history,
        rng_state: RngState::capture(&rng),
    })
}

/// Writes `step,lr,loss` rows.
pub fn write_loss_curve(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for rec in history {
        out.push_str(&format!("{},{},{}\n", rec.step, rec.lr, rec.loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::softmax;
    use crate::seqmodel::ModelConfig;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 18,
            context_length: 8,
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            seed,
        }
    }

    #[test]
    fn schedule_is_linear_to_zero() {
        assert_eq!(learning_rate(1e-3, 0, 1000), 1e-3);
        assert_eq!(learning_rate(1e-3, 500, 1000), 5e-4);
        assert!(learning_rate(1e-3, 999, 1000) > 0.0);
    }

    #[test]
    fn zero_steps_rejected() {
        let model = Model::new(small_config(0)).unwrap();
        let tc = TrainConfig { steps: 0, ..TrainConfig::default() };
        let data = vec![vec![1, 2, 3]];
        assert!(matches!(train(model, &data, &tc, 0.1, 16), Err(Error::Config(_))));
    }

    #[test]
    fn windows_cover_every_pair() {
        let data = vec![vec![0, 1, 2, 3, 4], vec![5], vec![6, 7]];
        let sampler = WindowSampler::new(&data, 2).unwrap();
        assert_eq!(sampler.window_count(), 5);
        let windows: Vec<_> = (0..5).map(|i| sampler.window(i)).collect();
        assert_eq!(windows[0], (&[0][..], &[1][..]));
        assert_eq!(windows[1], (&[0, 1][..], &[1, 2][..]));
        assert_eq!(windows[3], (&[2, 3][..], &[3, 4][..]));
        assert_eq!(windows[4], (&[6][..], &[7][..]));
        assert!(WindowSampler::new(&[vec![1]], 4).is_err());
    }

    #[test]
    fn training_is_deterministic_and_records_schedule() {
        let data = vec![vec![3, 4, 5, 6, 7, 8, 9, 8, 7, 6, 5, 4]];
        let tc = TrainConfig {
            steps: 20,
            batch_size: 2,
            loss: LossKind::W2,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(Model::new(small_config(1)).unwrap(), &data, &tc, 0.5, 16).unwrap();
        let b = train(Model::new(small_config(1)).unwrap(), &data, &tc, 0.5, 16).unwrap();
        assert_eq!(a.model.parameters(), b.model.parameters());
        assert_eq!(a.history, b.history);
        for rec in &a.history {
            assert_eq!(rec.lr, 1e-3 * (1.0 - rec.step as f64 / 20.0));
        }
    }

    #[test]
    fn learns_a_constant_series() {
        let data = vec![vec![11; 24]; 3];
        for kind in [LossKind::CrossEntropy, LossKind::W1, LossKind::W2] {
            let tc = TrainConfig {
                steps: 200,
                lr_initial: 1e-2,
                batch_size: 4,
                loss: kind,
                seed: 9,
            };
            let trained = train(Model::new(small_config(2)).unwrap(), &data, &tc, 30.0 / 15.0, 16).unwrap();
            let probs = softmax(&trained.model.next_token_logits(&[11; 8]).unwrap()).unwrap();
            assert!(probs[11] > 0.9, "{kind}: p = {}", probs[11]);
        }
    }
}
