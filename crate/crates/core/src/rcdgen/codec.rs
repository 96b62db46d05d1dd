//! Desk-scale image codec: 8× average pooling with a linear channel map.

use crate::domain::RasterImage;
use crate::error::{validation, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LATENT_FACTOR: usize = 8;
pub const LATENT_CHANNELS: usize = 4;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Pixels are mapped to `[-1, 1]`, pooled over `8×8` blocks and projected
/// `3 → 4` (RGB plus luminance at initialization); decoding projects
/// `4 → 3`, undoes the affine map and repeats each latent cell over its
/// block.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec<T> {
    /// `[3, 4]`.
    pub encoder: Tensor<T>,
    /// `[4, 3]`.
    pub decoder: Tensor<T>,
}

impl<T: Scalar> Default for LatentCodec<T> {
    fn default() -> Self {
        let encoder = Tensor::from_fn(&[3, LATENT_CHANNELS], |i| {
            let (r, c) = (i / LATENT_CHANNELS, i % LATENT_CHANNELS);
            T::of(if c == 3 { LUMA[r] } else if r == c { 1.0 } else { 0.0 })
        });
        let decoder = Tensor::from_fn(&[LATENT_CHANNELS, 3], |i| {
            let (r, c) = (i / 3, i % 3);
            T::of(if r == c { 1.0 } else { 0.0 })
        });
        Self { encoder, decoder }
    }
}

impl<T: Scalar> LatentCodec<T> {
    pub fn new(encoder: Tensor<T>, decoder: Tensor<T>) -> Result<Self> {
        if encoder.shape() != [3, LATENT_CHANNELS] || decoder.shape() != [LATENT_CHANNELS, 3] {
            return Err(validation("codec channel maps must be 3×4 and 4×3"));
        }
        Ok(Self { encoder, decoder })
    }

    /// `H×W×3 → (H/8)×(W/8)×4`.
    pub fn encode(&self, image: &RasterImage) -> Result<Tensor<T>> {
        let (hh, ww) = (image.height(), image.width());
        if hh % LATENT_FACTOR != 0 || ww % LATENT_FACTOR != 0 {
            return Err(validation(format!(
                "image size {hh}×{ww} is not divisible by {LATENT_FACTOR}"
            )));
        }
        let (h, w) = (hh / LATENT_FACTOR, ww / LATENT_FACTOR);
        let px = image.pixels();
        let area = (LATENT_FACTOR * LATENT_FACTOR) as f64;
        let enc = self.encoder.data();
        let mut out = Vec::with_capacity(h * w * LATENT_CHANNELS);
        for by in 0..h {
            for bx in 0..w {
                let mut mean = [0.0f64; 3];
                for y in by * LATENT_FACTOR..(by + 1) * LATENT_FACTOR {
                    for x in bx * LATENT_FACTOR..(bx + 1) * LATENT_FACTOR {
                        for (c, m) in mean.iter_mut().enumerate() {
                            *m += f64::from(px[(y * ww + x) * 3 + c]);
                        }
                    }
                }
                let v = mean.map(|m| 2.0 * m / area - 1.0);
                for j in 0..LATENT_CHANNELS {
                    out.push(T::of((0..3).map(|c| v[c] * enc[c * LATENT_CHANNELS + j].to_f64_lossy()).sum()));
                }
            }
        }
        Tensor::new(&[h, w, LATENT_CHANNELS], out)
    }

    /// `h×w×4 → (8h)×(8w)` image, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor<T>) -> Result<RasterImage> {
        let s = latent.shape();
        if s.len() != 3 || s[2] != LATENT_CHANNELS {
            return Err(validation(format!("latent must be h×w×{LATENT_CHANNELS}, got {s:?}")));
        }
        if !latent.all_finite() {
            return Err(crate::error::RcdError::Numeric("latent contains non-finite values".into()));
        }
        let (h, w) = (s[0], s[1]);
        let dec = self.decoder.data();
        let cells: Vec<[f32; 3]> = latent
            .data()
            .chunks(LATENT_CHANNELS)
            .map(|z| {
                std::array::from_fn(|c| {
                    let v: f64 = (0..LATENT_CHANNELS).map(|j| z[j].to_f64_lossy() * dec[j * 3 + c].to_f64_lossy()).sum();
                    (((v + 1.0) / 2.0).clamp(0.0, 1.0)) as f32
                })
            })
            .collect();
        let (hh, ww) = (h * LATENT_FACTOR, w * LATENT_FACTOR);
        let mut pixels = Vec::with_capacity(hh * ww * 3);
        for y in 0..hh {
            for x in 0..ww {
                pixels.extend_from_slice(&cells[(y / LATENT_FACTOR) * w + x / LATENT_FACTOR]);
            }
        }
        RasterImage::new(hh, ww, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_sizes() {
        let img = RasterImage::filled(12, 16, [0.5; 3]).unwrap();
        assert!(LatentCodec::<f64>::default().encode(&img).is_err());
    }

    #[test]
    fn luminance_channel() {
        let img = RasterImage::filled(8, 8, [1.0, 0.0, 0.0]).unwrap();
        let z = LatentCodec::<f64>::default().encode(&img).unwrap();
        let want = [1.0, -1.0, -1.0, 0.299 - 0.587 - 0.114];
        for (a, b) in z.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
