//! Parameterized layers over the autodiff tape, plus AdamW with polynomial
//! learning-rate decay.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.matmul(g.param(ps, self.weight));
        match self.bias {
            Some(b) => y.add_row(g.param(ps, b)),
            None => y,
        }
    }

    /// Zeroes weight and bias.
    pub fn zero<T: Scalar>(&self, ps: &mut ParamStore<T>) {
        ps.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.bias {
            ps.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Row-wise layer norm with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[width], T::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm_rows(LN_EPS)
            .mul_row(g.param(ps, self.gamma))
            .add_row(g.param(ps, self.beta))
    }
}

/// Dense convolution over `H×W×C` maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = (3.0 / fan_in as f64).sqrt();
        Self {
            weight: ps.add(
                format!("{name}.weight"),
                uniform(rng, &[kernel, kernel, cin, cout], bound),
            ),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(g.param(ps, self.weight), self.stride, self.pad)
            .add_row(g.param(ps, self.bias))
    }
}

/// Depthwise `k×k` convolution with same padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (3.0 / (kernel * kernel) as f64).sqrt();
        Self {
            weight: ps.add(
                format!("{name}.weight"),
                uniform(rng, &[kernel, kernel, channels], bound),
            ),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.depthwise_conv2d(g.param(ps, self.weight))
            .add_row(g.param(ps, self.bias))
    }
}

/// Multi-head attention of visual queries over text keys/values, with a
/// pre-norm on the queries.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        width: usize,
        context_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), width),
            q: Linear::new(ps, &format!("{name}.q"), width, width, false, rng),
            k: Linear::new(ps, &format!("{name}.k"), context_width, width, false, rng),
            v: Linear::new(ps, &format!("{name}.v"), context_width, width, true, rng),
            out: Linear::new(ps, &format!("{name}.out"), width, width, true, rng),
            heads,
        }
    }

    /// Returns only the attention branch; callers add the residual.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x: Var<'g, T>,
        context: Var<'g, T>,
    ) -> Var<'g, T> {
        let q = self.q.forward(g, ps, self.norm.forward(g, ps, x));
        let k = self.k.forward(g, ps, context);
        let v = self.v.forward(g, ps, context);
        let width = self.q.fan_out;
        let dh = width / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut merged: Option<Var<'g, T>> = None;
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let att = qh.matmul(kh.transpose()).scale(scale).softmax_rows();
            let oh = att.matmul(vh);
            merged = Some(match merged {
                Some(m) => m.concat_cols(oh),
                None => oh,
            });
        }
        self.out.forward(g, ps, merged.expect("at least one head"))
    }
}

/// Pre-norm two-layer GELU feed-forward block (branch only).
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), width),
            up: Linear::new(ps, &format!("{name}.up"), width, hidden, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, width, true, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.up.forward(g, ps, self.norm.forward(g, ps, x)).gelu();
        self.down.forward(g, ps, h)
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            weight_decay: 0.01,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `lr · (1 - step / total)^power`.
pub fn poly_lr(base: f64, power: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * (1.0 - frac).powf(power)
}

/// Adam with decoupled weight decay. Decay applies to matrices and kernels
/// only; vectors (biases, norm scales) are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    pub total_steps: usize,
    step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig, total_steps: usize, ps: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = ps.ids().map(|id| Tensor::zeros(ps.get(id).shape())).collect();
        Self {
            config,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        poly_lr(self.config.lr, self.config.poly_power, self.step, self.total_steps)
    }

    /// Applies one update; `grads` is ordered like the store.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        let c = self.config;
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let ids: Vec<ParamId> = ps.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = ps.get(id).shape().len() >= 2;
            let p = ps.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j].to_f64_lossy() / bc1;
                let vhat = v[j].to_f64_lossy() / bc2;
                let mut pv = p[j].to_f64_lossy();
                if decay {
                    pv -= lr * c.weight_decay * pv;
                }
                pv -= lr * mhat / (vhat.sqrt() + c.eps);
                p[j] = T::of(pv);
            }
        }
    }
}
