//! The referring change-detection network.
//!
//! A Siamese selective-scan encoder produces four stages of features for
//! both images; a per-stage fusion module mixes the two branches with a
//! concat-and-scan; a text-conditioned mask decoder walks the fused stages
//! deepest-first and emits one full-resolution logit channel.

mod blocks;
pub mod ssm;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{DecoderStage, Encoder, FusionStage, VssBlock};
pub use ssm::{css_fuse, ss2d, traversal_orders, SsmLayer};
pub use train::{sample_target_class, training_step, TrainItem};

use crate::autograd::{Graph, ParamStore, Var};
use crate::domain::{check_model_geometry, LogitMap, RasterImage, RasterPair};
use crate::error::{validation, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::textcond::TextEmbedding;

/// Channel-wise normalization applied to `[0, 1]` pixels at the model input.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcdNetConfig {
    pub base_channels: usize,
    pub depths: [usize; 4],
    pub state_dim: usize,
    pub text_width: usize,
    pub heads: usize,
    pub threshold: f64,
}

impl Default for RcdNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depths: [1, 1, 2, 1],
            state_dim: 8,
            text_width: 64,
            heads: 2,
            threshold: 0.5,
        }
    }
}

impl RcdNetConfig {
    /// Full-scale VMamba-small geometry.
    pub fn vmamba_small() -> Self {
        Self {
            base_channels: 96,
            depths: [2, 2, 27, 2],
            state_dim: 16,
            text_width: 512,
            heads: 8,
            threshold: 0.5,
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.state_dim == 0 || self.text_width == 0 || self.heads == 0 {
            return Err(validation("model widths must be positive"));
        }
        if self.depths.contains(&0) {
            return Err(validation("every stage needs at least one block"));
        }
        if !self.base_channels.is_multiple_of(self.heads) {
            return Err(validation(format!(
                "base channels {} not divisible by {} heads",
                self.base_channels, self.heads
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(validation("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Four per-stage `h×w×c` maps; stage `k` (1-based) is at `1/2^(k+1)` of the
/// input resolution with `c·2^(k-1)` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures<T> {
    pub maps: [Tensor<T>; 4],
}

impl<T: Scalar> StageFeatures<T> {
    pub fn shapes(&self) -> [Vec<usize>; 4] {
        std::array::from_fn(|k| self.maps[k].shape().to_vec())
    }
}

/// Fused maps, one per stage with the encoder stage shapes.
pub type FusedFeatures<T> = StageFeatures<T>;

fn stage_vars<T: Scalar>(vars: &[Var<'_, T>; 4]) -> StageFeatures<T> {
    StageFeatures {
        maps: std::array::from_fn(|k| (*vars[k].value()).clone()),
    }
}

/// Parameters and structure of the detector.
#[derive(Debug, Clone)]
pub struct RcdNet<T> {
    pub config: RcdNetConfig,
    pub params: ParamStore<T>,
    encoder: Encoder,
    fusion: Vec<FusionStage>,
    decoder: Vec<DecoderStage>,
    /// Stage `k+1 → k` channel reductions after upsampling.
    lateral: Vec<Linear>,
    head: Linear,
}

impl<T: Scalar> RcdNet<T> {
    pub fn new(config: RcdNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let encoder = Encoder::new(&mut ps, &config, &mut rng);
        let fusion = (0..4)
            .map(|k| {
                FusionStage::new(&mut ps, &format!("fusion.stage{}", k + 1), config.stage_channels(k), config.state_dim, &mut rng)
            })
            .collect();
        let decoder = (0..4)
            .map(|k| {
                DecoderStage::new(
                    &mut ps,
                    &format!("decoder.stage{}", k + 1),
                    config.stage_channels(k),
                    config.text_width,
                    config.heads,
                    &mut rng,
                )
            })
            .collect();
        let lateral = (0..3)
            .map(|k| {
                Linear::new(
                    &mut ps,
                    &format!("decoder.lateral{}", k + 1),
                    config.stage_channels(k + 1),
                    config.stage_channels(k),
                    true,
                    &mut rng,
                )
            })
            .collect();
        let head = Linear::new(&mut ps, "decoder.head", config.base_channels, 1, true, &mut rng);
        Ok(Self {
            config,
            params: ps,
            encoder,
            fusion,
            decoder,
            lateral,
            head,
        })
    }

    /// Standardized `H×W×3` input tensor.
    pub fn image_tensor(image: &RasterImage) -> Tensor<T> {
        Tensor::new(
            &[image.height(), image.width(), 3],
            image
                .pixels()
                .iter()
                .enumerate()
                .map(|(i, &v)| T::of((f64::from(v) - PIXEL_MEAN[i % 3]) / PIXEL_STD[i % 3]))
                .collect(),
        )
        .expect("image tensor shape")
    }

    /// Both encoder branches with the same weights.
    pub fn seb_forward_graph<'g>(
        &self,
        g: &'g Graph<T>,
        pair: &RasterPair,
    ) -> Result<([Var<'g, T>; 4], [Var<'g, T>; 4])> {
        check_model_geometry(pair.height(), pair.width())?;
        let pre = g.constant(Self::image_tensor(pair.pre()));
        let post = g.constant(Self::image_tensor(pair.post()));
        Ok((
            self.encoder.forward(g, &self.params, pre),
            self.encoder.forward(g, &self.params, post),
        ))
    }

    pub fn fusion_forward_graph<'g>(
        &self,
        g: &'g Graph<T>,
        a: &[Var<'g, T>; 4],
        b: &[Var<'g, T>; 4],
    ) -> Result<[Var<'g, T>; 4]> {
        for k in 0..4 {
            if a[k].shape() != b[k].shape() {
                return Err(validation(format!(
                    "stage {} shapes {:?} and {:?} differ",
                    k + 1,
                    a[k].shape(),
                    b[k].shape()
                )));
            }
        }
        Ok(std::array::from_fn(|k| self.fusion[k].forward(g, &self.params, a[k], b[k])))
    }

    /// Text-conditioned decoding to an `H×W×1` logit map.
    pub fn mdb_forward_graph<'g>(
        &self,
        g: &'g Graph<T>,
        fused: &[Var<'g, T>; 4],
        text: &TextEmbedding<T>,
    ) -> Result<Var<'g, T>> {
        if text.width() != self.config.text_width {
            return Err(validation(format!(
                "text width {} does not match model text width {}",
                text.width(),
                self.config.text_width
            )));
        }
        let ps = &self.params;
        let context = g.constant(text.tokens().clone());
        let mut x = self.decoder[3].forward(g, ps, fused[3], context);
        for k in (0..3).rev() {
            let up = self.lateral[k].forward(g, ps, x.upsample_bilinear(2));
            x = self.decoder[k].forward(g, ps, up.add(fused[k]), context);
        }
        Ok(self.head.forward(g, ps, x).upsample_bilinear(4))
    }

    pub fn forward_graph<'g>(
        &self,
        g: &'g Graph<T>,
        pair: &RasterPair,
        text: &TextEmbedding<T>,
    ) -> Result<Var<'g, T>> {
        let (a, b) = self.seb_forward_graph(g, pair)?;
        let fused = self.fusion_forward_graph(g, &a, &b)?;
        self.mdb_forward_graph(g, &fused, text)
    }

    /// `M = f(I_pre, I_post, C)` as pre-sigmoid logits.
    pub fn forward(&self, pair: &RasterPair, text: &TextEmbedding<T>) -> Result<LogitMap<T>> {
        let g = Graph::inference();
        let out = self.forward_graph(&g, pair, text)?;
        LogitMap::new(pair.height(), pair.width(), (*out.value()).clone().into_data())
    }

    pub fn seb_forward(&self, pair: &RasterPair) -> Result<(StageFeatures<T>, StageFeatures<T>)> {
        let g = Graph::inference();
        let (a, b) = self.seb_forward_graph(&g, pair)?;
        Ok((stage_vars(&a), stage_vars(&b)))
    }

    pub fn fusion_forward(&self, a: &StageFeatures<T>, b: &StageFeatures<T>) -> Result<FusedFeatures<T>> {
        let g = Graph::inference();
        let av = a.maps.clone().map(|t| g.constant(t));
        let bv = b.maps.clone().map(|t| g.constant(t));
        Ok(stage_vars(&self.fusion_forward_graph(&g, &av, &bv)?))
    }

    pub fn mdb_forward(&self, fused: &FusedFeatures<T>, text: &TextEmbedding<T>) -> Result<LogitMap<T>> {
        let g = Graph::inference();
        let fv = fused.maps.clone().map(|t| g.constant(t));
        let out = self.mdb_forward_graph(&g, &fv, text)?;
        let s = out.shape();
        LogitMap::new(s[0], s[1], (*out.value()).clone().into_data())
    }

    /// Zeroes the output projection of every decoder cross-attention, which
    /// makes the logits independent of the text.
    pub fn zero_cross_attention_output(&mut self) {
        for d in &self.decoder {
            d.attention.out.zero(&mut self.params);
        }
    }

    /// Zeroes the final linear of every fusion stage.
    pub fn zero_fusion_output(&mut self) {
        for f in &self.fusion {
            f.out.zero(&mut self.params);
        }
    }

    /// Bias vectors of the final fusion linears, per stage.
    pub fn fusion_output_bias(&self, stage: usize) -> &Tensor<T> {
        self.params.get(self.fusion[stage].out.bias.expect("fusion output bias"))
    }

    /// Casts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> RcdNet<U> {
        let mut params = ParamStore::new();
        for (_, name, t) in self.params.iter() {
            params.add(name, t.cast());
        }
        RcdNet {
            config: self.config.clone(),
            params,
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            lateral: self.lateral.clone(),
            head: self.head.clone(),
        }
    }
}
