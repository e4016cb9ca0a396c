use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use super::{Model, Slot};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, TokenLoss};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn view(params: &[f64], slot: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((slot.rows, slot.cols), &params[slot.range()]).expect("slot shape")
}

fn row(params: &[f64], slot: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&params[slot.range()])
}

fn view_mut(grad: &mut [f64], slot: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((slot.rows, slot.cols), &mut grad[slot.range()]).expect("slot shape")
}

/// `grad[slot] += a^T b`
fn accumulate_outer(grad: &mut [f64], slot: Slot, a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) {
    let mut dst = view_mut(grad, slot);
    general_mat_mul(1.0, &a.t(), b, 1.0, &mut dst);
}

/// `grad[slot] += column sums of g`
fn accumulate_bias(grad: &mut [f64], slot: Slot, g: &ArrayView2<'_, f64>) {
    let sums = g.sum_axis(Axis(0));
    for (dst, s) in grad[slot.range()].iter_mut().zip(sums.iter()) {
        *dst += s;
    }
}

fn linear(x: &ArrayView2<'_, f64>, params: &[f64], weight: Slot, bias: Slot) -> Array2<f64> {
    let mut out = x.dot(&view(params, weight));
    out += &row(params, bias);
    out
}

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: ArrayView1<'_, f64>, bias: ArrayView1<'_, f64>) -> (Array2<f64>, NormCache) {
    let (t, d) = x.dim();
    let mut normalized = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    for (i, xr) in x.outer_iter().enumerate() {
        let mean = xr.sum() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = rstd;
        for (n, v) in normalized.row_mut(i).iter_mut().zip(xr.iter()) {
            *n = (v - mean) * rstd;
        }
    }
    let out = &normalized * &gain + &bias;
    (out, NormCache { normalized, inv_std })
}

/// Returns d(input); accumulates the gain and bias gradients.
fn layer_norm_backward(
    dout: &Array2<f64>,
    cache: &NormCache,
    gain: ArrayView1<'_, f64>,
    grad: &mut [f64],
    gain_slot: Slot,
    bias_slot: Slot,
) -> Array2<f64> {
    let d = dout.ncols() as f64;
    let dgain = (dout * &cache.normalized).sum_axis(Axis(0));
    for (g, v) in grad[gain_slot.range()].iter_mut().zip(dgain.iter()) {
        *g += v;
    }
    accumulate_bias(grad, bias_slot, &dout.view());

    let dnorm = dout * &gain;
    let mut dx = Array2::zeros(dout.dim());
    for i in 0..dout.nrows() {
        let dn = dnorm.row(i);
        let xn = cache.normalized.row(i);
        let mean_dn = dn.sum() / d;
        let mean_dn_xn = dn.dot(&xn) / d;
        let rstd = cache.inv_std[i];
        for ((dst, a), b) in dx.row_mut(i).iter_mut().zip(dn.iter()).zip(xn.iter()) {
            *dst = rstd * (a - mean_dn - b * mean_dn_xn);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_derivative(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

#[derive(Debug, Clone)]
struct LayerCache {
    norm1: NormCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    /// Causal attention weights, one `T x T` matrix per head.
    attention: Vec<Array2<f64>>,
    context: Array2<f64>,
    norm2: NormCache,
    h2: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
}

/// Intermediate activations kept by [`Model::forward_cached`] for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    final_hidden: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl Model {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::Shape(format!(
                "{} tokens exceed the context length {}",
                tokens.len(),
                self.config.context_length
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits of shape `(tokens.len(), vocab_size)`; row `t` only depends on
    /// `tokens[..=t]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        self.forward_cached(tokens).map(|(logits, _)| logits)
    }

    /// Logits of the final position only.
    pub fn next_token_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let logits = self.forward(tokens)?;
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }

    pub fn forward_cached(&self, tokens: &[usize]) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_tokens(tokens)?;
        let p = &self.params;
        let lay = &self.layout;
        let t_len = tokens.len();
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let tok = view(p, lay.token_embedding);
        let pos = view(p, lay.position_embedding);
        let mut x = Array2::zeros((t_len, d));
        for (t, &token) in tokens.iter().enumerate() {
            let mut xr = x.row_mut(t);
            xr.assign(&tok.row(token));
            xr += &pos.row(t);
        }

        let mut layers = Vec::with_capacity(lay.layers.len());
        for ls in &lay.layers {
            let (h1, norm1) = layer_norm(&x, row(p, ls.ln1_gain), row(p, ls.ln1_bias));
            let qkv = linear(&h1.view(), p, ls.qkv_weight, ls.qkv_bias);
            let mut context = Array2::zeros((t_len, d));
            let mut attention = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = qkv.slice(s![.., h * head_dim..(h + 1) * head_dim]);
                let k = qkv.slice(s![.., d + h * head_dim..d + (h + 1) * head_dim]);
                let v = qkv.slice(s![.., 2 * d + h * head_dim..2 * d + (h + 1) * head_dim]);
                let mut weights = q.dot(&k.t());
                for (i, mut wr) in weights.outer_iter_mut().enumerate() {
                    let max = wr
                        .iter()
                        .take(i + 1)
                        .fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                    let mut total = 0.0;
                    for (j, w) in wr.iter_mut().enumerate() {
                        if j <= i {
                            *w = (*w * scale - max).exp();
                            total += *w;
                        } else {
                            *w = 0.0;
                        }
                    }
                    wr.mapv_inplace(|w| w / total);
                }
                let ctx = weights.dot(&v);
                context
                    .slice_mut(s![.., h * head_dim..(h + 1) * head_dim])
                    .assign(&ctx);
                attention.push(weights);
            }
            x += &linear(&context.view(), p, ls.out_weight, ls.out_bias);

            let (h2, norm2) = layer_norm(&x, row(p, ls.ln2_gain), row(p, ls.ln2_bias));
            let pre_activation = linear(&h2.view(), p, ls.fc_weight, ls.fc_bias);
            let activation = pre_activation.mapv(gelu);
            x += &linear(&activation.view(), p, ls.proj_weight, ls.proj_bias);

            layers.push(LayerCache {
                norm1,
                h1,
                qkv,
                attention,
                context,
                norm2,
                h2,
                pre_activation,
                activation,
            });
        }

        let (final_hidden, final_norm) = layer_norm(&x, row(p, lay.final_gain), row(p, lay.final_bias));
        let logits = linear(&final_hidden.view(), p, lay.head_weight, lay.head_bias);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                layers,
                final_norm,
                final_hidden,
            },
        ))
    }

    /// Accumulates the parameter gradient for upstream logit gradients
    /// `dlogits` into `grad`.
    pub fn backward_from_logits(&self, cache: &ForwardCache, dlogits: &Array2<f64>, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has {} entries, model has {}",
                grad.len(),
                self.params.len()
            )));
        }
        let t_len = cache.tokens.len();
        if dlogits.dim() != (t_len, self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "logit gradient has shape {:?}, expected ({t_len}, {})",
                dlogits.dim(),
                self.config.vocab_size
            )));
        }
        let p = &self.params;
        let lay = &self.layout;
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        accumulate_outer(grad, lay.head_weight, &cache.final_hidden.view(), &dlogits.view());
        accumulate_bias(grad, lay.head_bias, &dlogits.view());
        let dhidden = dlogits.dot(&view(p, lay.head_weight).t());
        let mut dx = layer_norm_backward(
            &dhidden,
            &cache.final_norm,
            row(p, lay.final_gain),
            grad,
            lay.final_gain,
            lay.final_bias,
        );

        for (ls, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP branch: x += gelu(h2 W_fc + b_fc) W_proj + b_proj
            accumulate_outer(grad, ls.proj_weight, &lc.activation.view(), &dx.view());
            accumulate_bias(grad, ls.proj_bias, &dx.view());
            let mut dpre = dx.dot(&view(p, ls.proj_weight).t());
            dpre.zip_mut_with(&lc.pre_activation, |g, &u| *g *= gelu_derivative(u));
            accumulate_outer(grad, ls.fc_weight, &lc.h2.view(), &dpre.view());
            accumulate_bias(grad, ls.fc_bias, &dpre.view());
            let dh2 = dpre.dot(&view(p, ls.fc_weight).t());
            dx += &layer_norm_backward(&dh2, &lc.norm2, row(p, ls.ln2_gain), grad, ls.ln2_gain, ls.ln2_bias);

            // Attention branch: x += context W_o + b_o
            accumulate_outer(grad, ls.out_weight, &lc.context.view(), &dx.view());
            accumulate_bias(grad, ls.out_bias, &dx.view());
            let dcontext = dx.dot(&view(p, ls.out_weight).t());
            let mut dqkv = Array2::zeros((t_len, 3 * d));
            for (h, weights) in lc.attention.iter().enumerate() {
                let cols = h * head_dim..(h + 1) * head_dim;
                let q = lc.qkv.slice(s![.., cols.clone()]);
                let k = lc.qkv.slice(s![.., d + cols.start..d + cols.end]);
                let v = lc.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
                let dctx = dcontext.slice(s![.., cols.clone()]);

                let dweights = dctx.dot(&v.t());
                let dv = weights.t().dot(&dctx);
                // softmax backward, row by row; masked entries have zero weight
                let mut dscores = Array2::zeros((t_len, t_len));
                for i in 0..t_len {
                    let wr = weights.row(i);
                    let gr = dweights.row(i);
                    let inner = wr.dot(&gr);
                    for j in 0..=i {
                        dscores[[i, j]] = wr[j] * (gr[j] - inner) * scale;
                    }
                }
                let dq = dscores.dot(&k);
                let dk = dscores.t().dot(&q);
                dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
                dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dk);
                dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
            }
            accumulate_outer(grad, ls.qkv_weight, &lc.h1.view(), &dqkv.view());
            accumulate_bias(grad, ls.qkv_bias, &dqkv.view());
            let dh1 = dqkv.dot(&view(p, ls.qkv_weight).t());
            dx += &layer_norm_backward(&dh1, &lc.norm1, row(p, ls.ln1_gain), grad, ls.ln1_gain, ls.ln1_bias);
        }

        let vocab_offset = lay.token_embedding.offset;
        let pos_offset = lay.position_embedding.offset;
        for (t, &token) in cache.tokens.iter().enumerate() {
            let dr = dx.row(t);
            let tok = vocab_offset + token * d;
            let pos = pos_offset + t * d;
            for (k, v) in dr.iter().enumerate() {
                grad[tok + k] += v;
                grad[pos + k] += v;
            }
        }
        Ok(())
    }

    /// Mean loss over positions whose target is not PAD, and its gradient
    /// with respect to every parameter.
    pub fn backward(&self, tokens: &[usize], targets: &[usize], loss: &TokenLoss) -> Result<Gradient> {
        let mut grad = vec![0.0; self.params.len()];
        let value = self.accumulate_gradient(tokens, targets, loss, 1.0, &mut grad)?;
        Ok(Gradient { loss: value, grad })
    }

    /// Adds `weight * d(loss)/d(params)` into `grad` and returns the
    /// (unweighted) loss.
    pub fn accumulate_gradient(
        &self,
        tokens: &[usize],
        targets: &[usize],
        loss: &TokenLoss,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        if tokens.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} targets",
                tokens.len(),
                targets.len()
            )));
        }
        let pad = loss.value_tokens;
        let mask: Vec<bool> = targets.iter().map(|&t| t != pad).collect();
        let (logits, cache) = self.forward_cached(tokens)?;
        let out = batch_loss(logits.view(), targets, &mask, loss)?;
        let mut dlogits = out.grad;
        if weight != 1.0 {
            dlogits *= weight;
        }
        self.backward_from_logits(&cache, &dlogits, grad)?;
        Ok(out.value)
    }
}
