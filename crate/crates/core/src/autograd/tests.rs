use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Central-difference check of `f` (leaves → scalar) at `inputs`.
fn check(inputs: Vec<Tensor<f64>>, f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>) {
    let g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &leaves);
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(&inputs)
        .map(|(l, t)| grads.get(*l).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |inputs: &[Tensor<f64>]| {
        let g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        f(&g, &leaves).item()
    };
    let eps = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {k}[{i}]: analytic {a} vs numeric {numeric}");
        }
    }
}

/// Projects an output onto fixed random weights so every element matters.
fn project<'g>(g: &'g Graph<f64>, v: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &v.shape(), -1.0, 1.0);
    v.mul(g.constant(w)).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    check(vec![a.clone(), b.clone()], |g, v| {
        let x = v[0].mul(v[1]).add(v[0].sigmoid()).sub(v[1].silu());
        let y = x.gelu().add(v[0].softplus()).add(v[1].scale(0.3).exp()).square();
        project(g, y.add_scalar(0.5), 1)
    });
}

#[test]
fn row_broadcast_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let r = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    check(vec![a, r], |g, v| {
        let x = v[0].add_row(v[1]).mul_row(v[1]);
        let m = x.mean_rows().add(x.max_rows());
        project(g, m, 2).add(x.softmax_rows().mean())
    });
}

#[test]
fn matmul_transpose_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    check(vec![a, b], |g, v| {
        let att = v[0].matmul(v[1].transpose()).softmax_rows();
        project(g, att.matmul(v[1]), 3)
    });
}

#[test]
fn layer_norm_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
    check(vec![a], |g, v| project(g, v[0].layer_norm_rows(1e-5), 4));
}

#[test]
fn gather_concat_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let idx: Rc<[usize]> = vec![2, 0, 0, 3].into();
    check(vec![a, b], move |g, v| {
        let c = v[0].gather_rows(idx.clone()).concat_rows(v[1]);
        let d = c.slice_rows(1, 5).concat_cols(c.slice_rows(2, 5).slice_cols(1, 1));
        project(g, d.reshape(&[15]), 5)
    });
}

#[test]
fn convolutions_and_upsampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[6, 4, 2], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0);
    let dk = rand_tensor(&mut rng, &[3, 3, 2], -1.0, 1.0);
    check(vec![x.clone(), k], |g, v| project(g, v[0].conv2d(v[1], 2, 1), 6));
    check(vec![x.clone(), dk], |g, v| project(g, v[0].depthwise_conv2d(v[1]), 7));
    check(vec![x], |g, v| project(g, v[0].upsample_bilinear(2), 8));
}

#[test]
fn selective_scan_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (l, d, n) = (20, 3, 4);
    let x = rand_tensor(&mut rng, &[l, d], -1.0, 1.0);
    let delta = rand_tensor(&mut rng, &[l, d], 0.05, 0.6);
    let a = rand_tensor(&mut rng, &[d, n], -2.0, -0.1);
    let b = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
    let c = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
    let dd = rand_tensor(&mut rng, &[d], -1.0, 1.0);
    check(vec![x, delta, a, b, c, dd], |g, v| {
        project(g, v[0].selective_scan(v[1], v[2], v[3], v[4], v[5]), 9)
    });
}

#[test]
fn bce_closed_forms() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[7]));
    let loss = x.bce_with_logits_mean(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
    let big = g.leaf(Tensor::full(&[3], 40.0));
    assert!(big.bce_with_logits_mean(&[1.0; 3]).item() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = rand_tensor(&mut rng, &[6], -3.0, 3.0);
    let target: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    check(vec![logits], move |_, v| v[0].bce_with_logits_mean(&target));
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut ps = ParamStore::<f64>::new();
    let id = ps.add("w", Tensor::full(&[2], 2.0));
    let g = Graph::inference();
    let w = g.param(&ps, id);
    let y = w.square().sum();
    assert_eq!(y.item(), 8.0);
    assert!(g.backward(y).param(id).is_none());
}
