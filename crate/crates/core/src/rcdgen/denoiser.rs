//! Noise predictors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_diffuse, standard_normal, LatentPack, NoiseSchedule, LATENT_CHANNELS, PACK_CHANNELS};
use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{validation, RcdError, Result};
use crate::nn::{AdamW, Conv2d, CrossAttention, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::textcond::TextEmbedding;

/// `ε_θ(z_t, t, image, text)`; `None` is the null condition.
pub trait Denoiser<T: Scalar> {
    /// `noisy` is `h×w×5`; `image` is the `h×w×4` pre latent. Output has
    /// the shape of `noisy`.
    fn predict(
        &self,
        noisy: &Tensor<T>,
        t: usize,
        image: Option<&Tensor<T>>,
        text: Option<&TextEmbedding<T>>,
    ) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> Denoiser<T> for F
where
    F: Fn(&Tensor<T>, usize, Option<&Tensor<T>>, Option<&TextEmbedding<T>>) -> Result<Tensor<T>>,
{
    fn predict(
        &self,
        noisy: &Tensor<T>,
        t: usize,
        image: Option<&Tensor<T>>,
        text: Option<&TextEmbedding<T>>,
    ) -> Result<Tensor<T>> {
        self(noisy, t, image, text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub time_dim: usize,
    pub text_width: usize,
    pub heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            time_dim: 16,
            text_width: 64,
            heads: 2,
        }
    }
}

/// `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(−i/(d/2))`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v.push(T::of((t as f64 * f).sin()));
    }
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v.push(T::of((t as f64 * f).cos()));
    }
    v.resize(dim, T::zero());
    Tensor::new(&[1, dim], v).expect("embedding shape")
}

/// Four 3×3 convolutions over `noisy ⊕ image` (9 channels), a timestep
/// embedding added after every layer, and one cross-attention to the text
/// after the second layer.
#[derive(Debug, Clone)]
pub struct TinyDenoiser<T> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
    convs: Vec<Conv2d>,
    time: Vec<Linear>,
    attention: CrossAttention,
}

impl<T: Scalar> TinyDenoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.time_dim < 2 || config.text_width == 0 || config.heads == 0 {
            return Err(validation("denoiser widths must be positive"));
        }
        if !config.hidden.is_multiple_of(config.heads) {
            return Err(validation("denoiser hidden width must be divisible by heads"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let h = config.hidden;
        let widths = [(PACK_CHANNELS + LATENT_CHANNELS, h), (h, h), (h, h), (h, PACK_CHANNELS)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2d::new(&mut ps, &format!("denoiser.conv{}", i + 1), cin, cout, 3, 1, 1, &mut rng))
            .collect();
        let time = widths
            .iter()
            .enumerate()
            .map(|(i, &(_, cout))| Linear::new(&mut ps, &format!("denoiser.time{}", i + 1), config.time_dim, cout, true, &mut rng))
            .collect();
        let attention = CrossAttention::new(&mut ps, "denoiser.xattn", h, config.text_width, config.heads, &mut rng);
        Ok(Self {
            config,
            params: ps,
            convs,
            time,
            attention,
        })
    }

    fn check_inputs(&self, noisy: &Tensor<T>, image: Option<&Tensor<T>>, text: Option<&TextEmbedding<T>>) -> Result<()> {
        let s = noisy.shape();
        if s.len() != 3 || s[2] != PACK_CHANNELS {
            return Err(validation(format!("noisy pack must be h×w×{PACK_CHANNELS}, got {s:?}")));
        }
        if let Some(img) = image {
            if img.shape() != [s[0], s[1], LATENT_CHANNELS] {
                return Err(validation("image condition must match the pack's spatial size"));
            }
        }
        if let Some(txt) = text {
            if txt.width() != self.config.text_width {
                return Err(validation(format!(
                    "text width {} does not match denoiser text width {}",
                    txt.width(),
                    self.config.text_width
                )));
            }
        }
        Ok(())
    }

    /// Prediction as a graph node; parameters are bound from `self.params`.
    pub fn predict_graph<'g>(
        &self,
        g: &'g Graph<T>,
        noisy: &Tensor<T>,
        t: usize,
        image: Option<&Tensor<T>>,
        text: Option<&TextEmbedding<T>>,
    ) -> Result<Var<'g, T>> {
        self.check_inputs(noisy, image, text)?;
        let s = noisy.shape();
        let (h, w) = (s[0], s[1]);
        let ps = &self.params;
        let cond = match image {
            Some(img) => img.clone(),
            None => Tensor::zeros(&[h, w, LATENT_CHANNELS]),
        };
        let context = match text {
            Some(txt) => txt.tokens().clone(),
            None => Tensor::zeros(&[1, self.config.text_width]),
        };
        let context = g.constant(context);
        let temb = g.constant(timestep_embedding(t, self.config.time_dim));
        let mut x = g.constant(noisy.clone()).concat_cols(g.constant(cond));
        for (i, (conv, time)) in self.convs.iter().zip(&self.time).enumerate() {
            let width = conv_width(ps, conv);
            let bias = time.forward(g, ps, temb).reshape(&[width]);
            x = conv.forward(g, ps, x).add_row(bias);
            if i < 3 {
                x = x.silu();
            }
            if i == 1 {
                let tokens = x.reshape(&[h * w, width]);
                x = tokens.add(self.attention.forward(g, ps, tokens, context)).reshape(&[h, w, width]);
            }
        }
        Ok(x)
    }
}

fn conv_width<T: Scalar>(ps: &ParamStore<T>, conv: &Conv2d) -> usize {
    ps.get(conv.bias).len()
}

impl<T: Scalar> Denoiser<T> for TinyDenoiser<T> {
    fn predict(
        &self,
        noisy: &Tensor<T>,
        t: usize,
        image: Option<&Tensor<T>>,
        text: Option<&TextEmbedding<T>>,
    ) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let out = self.predict_graph(&g, noisy, t, image, text)?;
        Ok((*out.value()).clone())
    }
}

/// Training-time condition dropout rates: image only, text only, both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionDropout {
    pub image: f64,
    pub text: f64,
    pub both: f64,
}

impl Default for ConditionDropout {
    fn default() -> Self {
        Self {
            image: 0.05,
            text: 0.05,
            both: 0.05,
        }
    }
}

impl ConditionDropout {
    /// `(keep_image, keep_text)` for one sample.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (bool, bool) {
        let u: f64 = rng.random_range(0.0..1.0);
        if u < self.image {
            (false, true)
        } else if u < self.image + self.text {
            (true, false)
        } else if u < self.image + self.text + self.both {
            (false, false)
        } else {
            (true, true)
        }
    }
}

/// One generator training sample.
#[derive(Debug, Clone)]
pub struct DenoiserItem<'a, T> {
    pub pack: &'a LatentPack<T>,
    pub text: &'a TextEmbedding<T>,
}

/// One optimizer update: random timestep and noise per sample, condition
/// dropout, mean squared noise error. Returns the loss before the update.
pub fn denoiser_training_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut TinyDenoiser<T>,
    optimizer: &mut AdamW<T>,
    batch: &[DenoiserItem<'_, T>],
    sched: &NoiseSchedule,
    dropout: ConditionDropout,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(validation("training batch is empty"));
    }
    let g = Graph::new();
    let mut total: Option<Var<'_, T>> = None;
    for item in batch {
        let t = rng.random_range(1..=sched.steps());
        let (h, w) = item.pack.dims();
        let eps: Tensor<T> = standard_normal(&[h, w, PACK_CHANNELS], rng);
        let z = forward_diffuse(item.pack, t, &eps, sched)?;
        let (keep_image, keep_text) = dropout.draw(rng);
        let image = keep_image.then_some(&item.pack.pre_latent);
        let text = keep_text.then_some(item.text);
        let loss = model.predict_graph(&g, &z, t, image, text)?.mse_mean(&eps);
        total = Some(match total {
            Some(acc) => acc.add(loss),
            None => loss,
        });
    }
    let loss = total.expect("nonempty batch").scale(T::one() / T::of(batch.len() as f64));
    let value = loss.item().to_f64_lossy();
    if !value.is_finite() {
        return Err(RcdError::Numeric(format!(
            "denoiser loss is {value} at step {}",
            optimizer.steps_taken()
        )));
    }
    let grads = g.backward(loss).for_store(&model.params);
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(RcdError::Numeric(format!(
            "non-finite denoiser gradient at step {}",
            optimizer.steps_taken()
        )));
    }
    optimizer.step(&mut model.params, &grads);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_rates() {
        let d = ConditionDropout::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        let n = 40_000;
        for _ in 0..n {
            let idx = match d.draw(&mut rng) {
                (false, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (true, true) => 3,
            };
            counts[idx] += 1;
        }
        for c in &counts[..3] {
            let f = *c as f64 / n as f64;
            assert!((f - 0.05).abs() < 0.005, "{f}");
        }
    }

    #[test]
    fn output_shape_and_null_conditions() {
        let m = TinyDenoiser::<f64>::new(DenoiserConfig::default(), 1).unwrap();
        let z = Tensor::from_fn(&[3, 2, 5], |i| (i as f64 * 0.1).sin());
        let img = Tensor::from_fn(&[3, 2, 4], |i| (i as f64 * 0.3).cos());
        let a = m.predict(&z, 10, None, None).unwrap();
        let b = m.predict(&z, 10, Some(&img), None).unwrap();
        assert_eq!(a.shape(), &[3, 2, 5]);
        assert_ne!(a, b);
        assert!(m.predict(&z, 10, Some(&Tensor::zeros(&[2, 2, 4])), None).is_err());
    }

    #[test]
    fn timestep_embedding_values() {
        let e: Tensor<f64> = timestep_embedding(0, 4);
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
        let e: Tensor<f64> = timestep_embedding(3, 4);
        assert!((e.data()[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
