//! Selective-scan layers: the four-direction 2-D scan (SS2D) used inside the
//! encoder blocks and the concat-and-scan (CSS) fusion of two branches.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Projections producing the input-dependent `Δ_t, B_t, C_t` of a scan,
/// plus the learned `A = -exp(a_log)` and skip `D`.
#[derive(Debug, Clone)]
pub struct SsmLayer {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub channels: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
}

/// Bound scan parameters for one input sequence.
pub struct BoundScan<'g, T: Scalar> {
    pub delta: Var<'g, T>,
    pub a: Var<'g, T>,
    pub b: Var<'g, T>,
    pub c: Var<'g, T>,
    pub d: Var<'g, T>,
}

impl SsmLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        let dt_rank = channels.div_ceil(16).max(1);
        let x_proj = Linear::new(
            ps,
            &format!("{name}.x_proj"),
            channels,
            dt_rank + 2 * state_dim,
            false,
            rng,
        );
        let dt_proj = Linear::new(ps, &format!("{name}.dt_proj"), dt_rank, channels, true, rng);
        // softplus(bias) spread log-uniformly over [1e-3, 1e-1]
        let bias: Vec<T> = (0..channels)
            .map(|_| {
                let dt: f64 = (rng.random_range(0.0..1.0) * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp();
                T::of(dt.exp_m1().ln())
            })
            .collect();
        ps.set(dt_proj.bias.expect("dt bias"), Tensor::new(&[channels], bias).expect("shape"))
            .expect("dt bias shape");
        let a_log = ps.add(
            format!("{name}.a_log"),
            Tensor::from_fn(&[channels, state_dim], |i| T::of((((i % state_dim) + 1) as f64).ln())),
        );
        let d_skip = ps.add(format!("{name}.d"), Tensor::full(&[channels], T::one()));
        Self {
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            channels,
            state_dim,
            dt_rank,
        }
    }

    /// Input-dependent parameters for an `[L, C]` sequence.
    pub fn bind<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, seq: Var<'g, T>) -> BoundScan<'g, T> {
        let proj = self.x_proj.forward(g, ps, seq);
        let (r, n) = (self.dt_rank, self.state_dim);
        let dt = proj.slice_cols(0, r);
        let b = proj.slice_cols(r, n);
        let c = proj.slice_cols(r + n, n);
        let delta = self.dt_proj.forward(g, ps, dt).softplus();
        let a = g.param(ps, self.a_log).exp().neg();
        BoundScan {
            delta,
            a,
            b,
            c,
            d: g.param(ps, self.d_skip),
        }
    }

    /// Scan over an `[L, C]` sequence.
    pub fn scan<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, seq: Var<'g, T>) -> Var<'g, T> {
        let p = self.bind(g, ps, seq);
        seq.selective_scan(p.delta, p.a, p.b, p.c, p.d)
    }
}

/// The four SS2D traversals of an `h×w` grid, as row-major token indices:
/// row-major forward, row-major backward, column-major forward,
/// column-major backward.
pub fn traversal_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    let rev = |v: &Vec<usize>| v.iter().rev().copied().collect::<Vec<_>>();
    let (row_rev, col_rev) = (rev(&row), rev(&col));
    [row, row_rev, col, col_rev]
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &idx) in order.iter().enumerate() {
        inv[idx] = pos;
    }
    inv
}

/// Four-direction scan of an `h×w×c` map; the directional outputs are mapped
/// back to grid order and summed.
pub fn ss2d<'g, T: Scalar>(
    g: &'g Graph<T>,
    ps: &ParamStore<T>,
    layer: &SsmLayer,
    feature: Var<'g, T>,
) -> Var<'g, T> {
    let shape = feature.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let tokens = feature.reshape(&[h * w, c]);
    let mut total: Option<Var<'g, T>> = None;
    for order in traversal_orders(h, w) {
        let inv: Rc<[usize]> = inverse_permutation(&order).into();
        let seq = tokens.gather_rows(order.into());
        let y = layer.scan(g, ps, seq).gather_rows(inv);
        total = Some(match total {
            Some(t) => t.add(y),
            None => y,
        });
    }
    total.expect("four traversals").reshape(&[h, w, c])
}

/// Concat-and-scan fusion of two equally shaped `h×w×c` maps.
///
/// The flattened maps are concatenated along the sequence axis, scanned
/// forward and on the reversed concatenation, the two directions summed,
/// split back into halves, and the halves summed and projected.
pub fn css_fuse<'g, T: Scalar>(
    g: &'g Graph<T>,
    ps: &ParamStore<T>,
    layer: &SsmLayer,
    proj: &Linear,
    f1: Var<'g, T>,
    f2: Var<'g, T>,
) -> Var<'g, T> {
    let shape = f1.shape();
    assert_eq!(shape, f2.shape(), "css_fuse needs equal shapes");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let seq = f1.reshape(&[n, c]).concat_rows(f2.reshape(&[n, c]));
    let rev: Rc<[usize]> = (0..2 * n).rev().collect::<Vec<_>>().into();
    let forward = layer.scan(g, ps, seq);
    let backward = layer.scan(g, ps, seq.gather_rows(rev.clone())).gather_rows(rev);
    let both = forward.add(backward);
    let halves = both.slice_rows(0, n).add(both.slice_rows(n, n));
    proj.forward(g, ps, halves).reshape(&[h, w, c])
}
