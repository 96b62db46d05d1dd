use rand::Rng;

use super::ssm::{css_fuse, ss2d, SsmLayer};
use super::RcdNetConfig;
use crate::autograd::{Graph, ParamStore, Var};
use crate::nn::{Conv2d, CrossAttention, DepthwiseConv, FeedForward, LayerNorm, Linear};
use crate::scalar::Scalar;

/// Visual state-space block:
/// `x + out(norm(ss2d(silu(dwconv(in_x(norm(x)))))) * silu(in_z(norm(x))))`.
#[derive(Debug, Clone)]
pub struct VssBlock {
    norm: LayerNorm,
    in_proj: Linear,
    dwconv: DepthwiseConv,
    ssm: SsmLayer,
    out_norm: LayerNorm,
    out_proj: Linear,
    channels: usize,
}

impl VssBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), channels),
            in_proj: Linear::new(ps, &format!("{name}.in_proj"), channels, 2 * channels, true, rng),
            dwconv: DepthwiseConv::new(ps, &format!("{name}.dwconv"), channels, 3, rng),
            ssm: SsmLayer::new(ps, &format!("{name}.ssm"), channels, state_dim, rng),
            out_norm: LayerNorm::new(ps, &format!("{name}.out_norm"), channels),
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), channels, channels, true, rng),
            channels,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let c = self.channels;
        let xz = self.in_proj.forward(g, ps, self.norm.forward(g, ps, x));
        let xi = self.dwconv.forward(g, ps, xz.slice_cols(0, c)).silu();
        let z = xz.slice_cols(c, c).silu();
        let y = self.out_norm.forward(g, ps, ss2d(g, ps, &self.ssm, xi)).mul(z);
        x.add(self.out_proj.forward(g, ps, y))
    }
}

/// One Siamese encoder branch: stride-4 patch embedding, then four stages
/// of VSS blocks separated by stride-2 downsampling convolutions that double
/// the channel count.
#[derive(Debug, Clone)]
pub struct Encoder {
    patch_embed: Conv2d,
    patch_norm: LayerNorm,
    stages: Vec<Vec<VssBlock>>,
    stage_norms: Vec<LayerNorm>,
    downsample: Vec<(Conv2d, LayerNorm)>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &RcdNetConfig, rng: &mut R) -> Self {
        let c = cfg.base_channels;
        let patch_embed = Conv2d::new(ps, "encoder.patch_embed", 3, c, 4, 4, 0, rng);
        let patch_norm = LayerNorm::new(ps, "encoder.patch_norm", c);
        let mut stages = Vec::new();
        let mut stage_norms = Vec::new();
        let mut downsample = Vec::new();
        for k in 0..4 {
            let ck = cfg.stage_channels(k);
            stages.push(
                (0..cfg.depths[k])
                    .map(|b| VssBlock::new(ps, &format!("encoder.stage{}.block{b}", k + 1), ck, cfg.state_dim, rng))
                    .collect(),
            );
            stage_norms.push(LayerNorm::new(ps, &format!("encoder.stage{}.norm", k + 1), ck));
            if k < 3 {
                downsample.push((
                    Conv2d::new(ps, &format!("encoder.down{}", k + 1), ck, 2 * ck, 2, 2, 0, rng),
                    LayerNorm::new(ps, &format!("encoder.down{}.norm", k + 1), 2 * ck),
                ));
            }
        }
        Self {
            patch_embed,
            patch_norm,
            stages,
            stage_norms,
            downsample,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, image: Var<'g, T>) -> [Var<'g, T>; 4] {
        let mut x = self.patch_norm.forward(g, ps, self.patch_embed.forward(g, ps, image));
        let mut outs = Vec::with_capacity(4);
        for k in 0..4 {
            if k > 0 {
                let (conv, norm) = &self.downsample[k - 1];
                x = norm.forward(g, ps, conv.forward(g, ps, x));
            }
            for block in &self.stages[k] {
                x = block.forward(g, ps, x);
            }
            outs.push(self.stage_norms[k].forward(g, ps, x));
        }
        outs.try_into().expect("four stages")
    }
}

/// Per-stage fusion: per-branch linear, depthwise conv and SiLU, then
/// concat-and-scan and a final linear.
#[derive(Debug, Clone)]
pub struct FusionStage {
    in_a: Linear,
    in_b: Linear,
    dw_a: DepthwiseConv,
    dw_b: DepthwiseConv,
    ssm: SsmLayer,
    css_proj: Linear,
    pub(crate) out: Linear,
}

impl FusionStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            in_a: Linear::new(ps, &format!("{name}.in_a"), channels, channels, true, rng),
            in_b: Linear::new(ps, &format!("{name}.in_b"), channels, channels, true, rng),
            dw_a: DepthwiseConv::new(ps, &format!("{name}.dw_a"), channels, 3, rng),
            dw_b: DepthwiseConv::new(ps, &format!("{name}.dw_b"), channels, 3, rng),
            ssm: SsmLayer::new(ps, &format!("{name}.css"), channels, state_dim, rng),
            css_proj: Linear::new(ps, &format!("{name}.css_proj"), channels, channels, true, rng),
            out: Linear::new(ps, &format!("{name}.out"), channels, channels, true, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        a: Var<'g, T>,
        b: Var<'g, T>,
    ) -> Var<'g, T> {
        let a = self.dw_a.forward(g, ps, self.in_a.forward(g, ps, a)).silu();
        let b = self.dw_b.forward(g, ps, self.in_b.forward(g, ps, b)).silu();
        let fused = css_fuse(g, ps, &self.ssm, &self.css_proj, a, b);
        self.out.forward(g, ps, fused)
    }
}

/// Mask decoder stage: channel attention from average- and max-pooled
/// descriptors, then a cross-attention transformer layer whose keys and
/// values are the text tokens.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    gate_down: Linear,
    gate_up: Linear,
    pub(crate) attention: CrossAttention,
    ffn: FeedForward,
}

impl DecoderStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        text_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            gate_down: Linear::new(ps, &format!("{name}.gate_down"), channels, hidden, true, rng),
            gate_up: Linear::new(ps, &format!("{name}.gate_up"), hidden, channels, true, rng),
            attention: CrossAttention::new(ps, &format!("{name}.xattn"), channels, text_width, heads, rng),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), channels, 2 * channels, rng),
        }
    }

    fn gate_mlp<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, v: Var<'g, T>) -> Var<'g, T> {
        let c = v.shape()[0];
        let h = self.gate_down.forward(g, ps, v.reshape(&[1, c])).silu();
        self.gate_up.forward(g, ps, h).reshape(&[c])
    }

    /// `x` is an `h×w×c` map; `context` the `n×d` text tokens.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x: Var<'g, T>,
        context: Var<'g, T>,
    ) -> Var<'g, T> {
        let shape = x.shape();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let tokens = x.reshape(&[h * w, c]);
        let gate = self
            .gate_mlp(g, ps, tokens.mean_rows())
            .add(self.gate_mlp(g, ps, tokens.max_rows()))
            .sigmoid();
        let t = tokens.mul_row(gate);
        let t = t.add(self.attention.forward(g, ps, t, context));
        let t = t.add(self.ffn.forward(g, ps, t));
        t.reshape(&[h, w, c])
    }
}
