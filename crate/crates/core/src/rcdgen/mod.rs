//! Synthetic change-pair generation by latent diffusion.
//!
//! A post-change latent and a downsampled change mask are diffused jointly
//! as one 5-channel pack, conditioned on the clean pre-change latent and a
//! text embedding. Sampling uses dual classifier-free guidance with separate
//! image and text strengths.

mod codec;
mod denoiser;
mod record;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use codec::{LatentCodec, LATENT_CHANNELS, LATENT_FACTOR};
pub use denoiser::{
    denoiser_training_step, timestep_embedding, ConditionDropout, Denoiser, DenoiserConfig, DenoiserItem,
    TinyDenoiser,
};
pub use record::SyntheticRecord;

use crate::domain::BinaryChangeMap;
use crate::error::{validation, RcdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::textcond::TextEmbedding;

/// Channels of the diffused pack: the post latent plus one mask channel.
pub const PACK_CHANNELS: usize = LATENT_CHANNELS + 1;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_TIMESTEPS: usize = 1000;

/// Linear-β DDPM schedule; timesteps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps)
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(validation("noise schedule needs at least one step"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(validation("betas must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(validation(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Evenly strided subset `t_k = ceil(k·T/S)`, `k = 1..=S`, ascending.
    pub fn strided_timesteps(&self, sample_steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if sample_steps == 0 || sample_steps > total {
            return Err(validation(format!("sampler steps must lie in 1..={total}, got {sample_steps}")));
        }
        Ok((1..=sample_steps).map(|k| (k * total).div_ceil(sample_steps)).collect())
    }
}

/// Clean latents of one training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPack<T> {
    pub pre_latent: Tensor<T>,
    pub post_latent: Tensor<T>,
    pub mask_latent: Tensor<T>,
}

impl<T: Scalar> LatentPack<T> {
    pub fn new(pre_latent: Tensor<T>, post_latent: Tensor<T>, mask_latent: Tensor<T>) -> Result<Self> {
        let s = pre_latent.shape();
        if s.len() != 3 || s[2] != LATENT_CHANNELS {
            return Err(validation(format!("pre latent must be h×w×{LATENT_CHANNELS}, got {s:?}")));
        }
        if post_latent.shape() != s {
            return Err(validation("pre and post latents differ in shape"));
        }
        if mask_latent.shape() != [s[0], s[1], 1] {
            return Err(validation("mask latent must be h×w×1 at latent resolution"));
        }
        for t in [&pre_latent, &post_latent, &mask_latent] {
            if !t.all_finite() {
                return Err(RcdError::Numeric("latent pack contains non-finite values".into()));
            }
        }
        if mask_latent.data().iter().any(|v| v.abs() > T::one()) {
            return Err(validation("mask latent values must lie in [-1, 1]"));
        }
        Ok(Self { pre_latent, post_latent, mask_latent })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.pre_latent.shape()[0], self.pre_latent.shape()[1])
    }

    /// `E(T2) ⊕ m̃`, the diffused part.
    pub fn target(&self) -> Tensor<T> {
        concat_channels(&self.post_latent, &self.mask_latent)
    }
}

/// Channel-wise concatenation of two `h×w×·` maps.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa[..2], sb[..2], "concat_channels spatial mismatch");
    let (ca, cb) = (sa[2], sb[2]);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor::new(&[sa[0], sa[1], ca + cb], data).expect("concat shape")
}

/// Splits an `h×w×c` map into the first `k` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, k: usize) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let c = s[2];
    assert!(k <= c, "split index beyond channel count");
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for row in x.data().chunks(c) {
        a.extend_from_slice(&row[..k]);
        b.extend_from_slice(&row[k..]);
    }
    (
        Tensor::new(&[s[0], s[1], k], a).expect("split shape"),
        Tensor::new(&[s[0], s[1], c - k], b).expect("split shape"),
    )
}

/// Nearest (top-left) sampling of each `H/h'×W/w'` block, mapped
/// `{0, 1} → {-1, +1}`.
pub fn downsample_mask<T: Scalar>(m: &BinaryChangeMap, h: usize, w: usize) -> Result<Tensor<T>> {
    let (hh, ww) = (m.height(), m.width());
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(validation(format!("cannot downsample {hh}×{ww} mask to {h}×{w}")));
    }
    let (sy, sx) = (hh / h, ww / w);
    Ok(Tensor::from_fn(&[h, w, 1], |i| {
        let (y, x) = (i / w, i % w);
        if m.get(y * sy, x * sx) == 1 { T::one() } else { -T::one() }
    }))
}

/// Bilinear (half-pixel, edge-clamped) resize to `H×W`, then `≥ 0`.
pub fn upsample_mask<T: Scalar>(m: &Tensor<T>, height: usize, width: usize) -> Result<BinaryChangeMap> {
    let s = m.shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(validation(format!("mask latent must be h×w×1, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if height < h || width < w || h == 0 || w == 0 {
        return Err(validation(format!("cannot upsample {h}×{w} mask to {height}×{width}")));
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let v = |y: usize, x: usize| m.data()[y * w + x].to_f64_lossy();
    let mut mask = Vec::with_capacity(height * width);
    for oy in 0..height {
        let (y0, y1, fy) = coord(oy, h, height);
        for ox in 0..width {
            let (x0, x1, fx) = coord(ox, w, width);
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            mask.push(u8::from(top * (1.0 - fy) + bottom * fy >= 0.0));
        }
    }
    BinaryChangeMap::new(height, width, mask)
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an arbitrary retention coefficient.
pub fn diffuse_at<T: Scalar>(clean: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if clean.shape() != eps.shape() {
        return Err(validation(format!(
            "noise shape {:?} does not match clean shape {:?}",
            eps.shape(),
            clean.shape()
        )));
    }
    let (a, b) = (T::of(alpha_bar.sqrt()), T::of((1.0 - alpha_bar).sqrt()));
    Ok(clean.zip_map(eps, |x, e| a * x + b * e))
}

/// Noised `E(T2) ⊕ m̃` at timestep `t`; the pre latent is not touched.
pub fn forward_diffuse<T: Scalar>(
    pack: &LatentPack<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let (h, w) = pack.dims();
    if eps.shape() != [h, w, PACK_CHANNELS] {
        return Err(validation(format!("noise must be {h}×{w}×{PACK_CHANNELS}, got {:?}", eps.shape())));
    }
    diffuse_at(&pack.target(), sched.alpha_bar(t), eps)
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Mean squared error between `eps` and the prediction at the noised pack.
pub fn diffusion_loss<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    pack: &LatentPack<T>,
    t: usize,
    text: Option<&TextEmbedding<T>>,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let z = forward_diffuse(pack, t, eps, sched)?;
    let pred = denoiser.predict(&z, t, Some(&pack.pre_latent), text)?;
    if pred.shape() != eps.shape() {
        return Err(validation("denoiser output shape differs from the noise shape"));
    }
    let n = eps.len() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| (*p - *e).to_f64_lossy().powi(2))
        .sum::<f64>()
        / n;
    if !loss.is_finite() {
        return Err(RcdError::Numeric(format!("diffusion loss is {loss} at t={t}")));
    }
    Ok(loss)
}

/// Image and text guidance strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub s_i: f64,
    pub s_t: f64,
}

impl Default for Guidance {
    fn default() -> Self {
        Self { s_i: 1.5, s_t: 7.0 }
    }
}

/// Dual classifier-free guidance:
///
/// `e(∅,∅) + s_I·(e(I,∅) − e(∅,∅)) + s_T·(e(I,c) − e(I,∅))`,
///
/// evaluated as `(1−s_I)·e(∅,∅) + (s_I−s_T)·e(I,∅) + s_T·e(I,c)` so that
/// unit and zero strengths return the corresponding call bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn cfg_estimate<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    z: &Tensor<T>,
    t: usize,
    image: Option<&Tensor<T>>,
    text: Option<&TextEmbedding<T>>,
    guidance: Guidance,
) -> Result<Tensor<T>> {
    let uncond = denoiser.predict(z, t, None, None)?;
    let image_only = denoiser.predict(z, t, image, None)?;
    let full = denoiser.predict(z, t, image, text)?;
    for e in [&uncond, &image_only, &full] {
        if e.shape() != z.shape() {
            return Err(validation("denoiser output shape differs from its input"));
        }
    }
    let w0 = T::of(1.0 - guidance.s_i);
    let w1 = T::of(guidance.s_i - guidance.s_t);
    let w2 = T::of(guidance.s_t);
    let data = uncond
        .data()
        .iter()
        .zip(image_only.data())
        .zip(full.data())
        .map(|((&a, &b), &c)| w0 * a + w1 * b + w2 * c)
        .collect();
    Tensor::new(z.shape(), data)
}

/// Result of one reverse-diffusion run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<T> {
    pub post_latent: Tensor<T>,
    pub mask_latent: Tensor<T>,
    pub state: Tensor<T>,
}

/// Ancestral DDPM over an evenly strided subset of timesteps, with guided
/// noise estimates, starting from standard normal noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_postchange<T: Scalar, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    pre_latent: &Tensor<T>,
    text: Option<&TextEmbedding<T>>,
    guidance: Guidance,
    steps: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<SampleOutput<T>> {
    let s = pre_latent.shape();
    if s.len() != 3 || s[2] != LATENT_CHANNELS {
        return Err(validation(format!("pre latent must be h×w×{LATENT_CHANNELS}, got {s:?}")));
    }
    let shape = [s[0], s[1], PACK_CHANNELS];
    let times = sched.strided_timesteps(steps)?;
    let mut x: Tensor<T> = standard_normal(&shape, rng);
    for k in (0..times.len()).rev() {
        let t = times[k];
        let prev = if k == 0 { 0 } else { times[k - 1] };
        let eps = cfg_estimate(denoiser, &x, t, Some(pre_latent), text, guidance)?;
        let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let (ra, rb) = (T::of(ab_t.sqrt()), T::of((1.0 - ab_t).sqrt()));
        let (c_x0, c_xt) = (T::of(c_x0), T::of(c_xt));
        let mut next = x.zip_map(&eps, |xt, e| {
            let x0 = (xt - rb * e) / ra;
            c_x0 * x0 + c_xt * xt
        });
        if prev > 0 {
            let sigma = T::of(((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt());
            let z: Tensor<T> = standard_normal(&shape, rng);
            next = next.zip_map(&z, |m, n| m + sigma * n);
        }
        if !next.all_finite() {
            return Err(RcdError::Sampling {
                step: times.len() - k,
                t,
                detail: "non-finite state".into(),
            });
        }
        x = next;
    }
    let (post_latent, mask_latent) = split_channels(&x, LATENT_CHANNELS);
    Ok(SampleOutput { post_latent, mask_latent, state: x })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_timesteps_cover_the_schedule() {
        let s = make_schedule(1000).unwrap();
        assert_eq!(s.strided_timesteps(1).unwrap(), vec![1000]);
        assert_eq!(s.strided_timesteps(4).unwrap(), vec![250, 500, 750, 1000]);
        let t = s.strided_timesteps(3).unwrap();
        assert_eq!(t, vec![334, 667, 1000]);
        assert_eq!(s.strided_timesteps(1000).unwrap(), (1..=1000).collect::<Vec<_>>());
        assert!(s.strided_timesteps(0).is_err());
        assert!(s.strided_timesteps(1001).is_err());
    }

    #[test]
    fn schedule_edges() {
        assert!(make_schedule(0).is_err());
        let one = make_schedule(1).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - BETA_START);
        assert_eq!(one.alpha_bar(0), 1.0);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 1], |i| -(i as f64));
        let (x, y) = split_channels(&concat_channels(&a, &b), 4);
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn pack_validation() {
        let z = |c| Tensor::<f64>::zeros(&[2, 2, c]);
        assert!(LatentPack::new(z(4), z(4), z(1)).is_ok());
        assert!(LatentPack::new(z(3), z(3), z(1)).is_err());
        assert!(LatentPack::new(z(4), z(4), Tensor::full(&[2, 2, 1], 2.0)).is_err());
    }
}
