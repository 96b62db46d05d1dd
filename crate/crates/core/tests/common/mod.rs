//! Shared fixtures and oracles for the integration suites.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcd_core::autograd::ParamStore;
use rcd_core::{ClassVocabulary, RasterImage, RasterPair, SemanticLabelMap, Tensor};

/// Fixture colors painted into the post image for class 1 and class 2.
pub const CLASS_COLORS: [[f32; 3]; 2] = [[0.9, 0.2, 0.15], [0.1, 0.3, 0.9]];

/// A bitemporal pair on a `size×size` grid: a smooth random background, and
/// in the post image two disjoint 8×8-aligned rectangles recolored as class
/// 1 and class 2.
pub fn toy_sample(seed: u64, size: usize, vocab: &Arc<ClassVocabulary>) -> (RasterPair, SemanticLabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = size / 8;
    let base: [f32; 3] = [rng.random_range(0.3..0.6), rng.random_range(0.4..0.7), rng.random_range(0.2..0.5)];
    let mut pre = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            for (c, b) in base.iter().enumerate() {
                let wave = 0.08 * (((x + 2 * c) as f32 * 0.4).sin() + ((y + c) as f32 * 0.3).cos());
                pre.push((b + wave + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0));
            }
        }
    }
    let mut labels = vec![0u16; size * size];
    // class 1 occupies a block rectangle on the left half, class 2 on the right
    let rect = |rng: &mut ChaCha8Rng, x_lo: usize, x_hi: usize| {
        let bx = rng.random_range(x_lo..x_hi);
        let by = rng.random_range(0..blocks);
        let bw = rng.random_range(1..=(x_hi - bx).max(1));
        let bh = rng.random_range(1..=(blocks - by).min(2));
        (bx, by, bw, bh)
    };
    let half = blocks / 2;
    let rects = [rect(&mut rng, 0, half), rect(&mut rng, half, blocks)];
    let mut post = pre.clone();
    for (k, &(bx, by, bw, bh)) in rects.iter().enumerate() {
        for y in by * 8..(by + bh) * 8 {
            for x in bx * 8..(bx + bw).min(blocks) * 8 {
                labels[y * size + x] = (k + 1) as u16;
                for c in 0..3 {
                    post[(y * size + x) * 3 + c] = CLASS_COLORS[k][c];
                }
            }
        }
    }
    let pair = RasterPair::new(
        format!("toy{seed}"),
        RasterImage::new(size, size, pre).unwrap(),
        RasterImage::new(size, size, post).unwrap(),
    )
    .unwrap();
    let map = SemanticLabelMap::new(size, size, labels, vocab.clone()).unwrap();
    (pair, map)
}

pub fn toy_vocab() -> Arc<ClassVocabulary> {
    Arc::new(ClassVocabulary::new(["building", "water"]).unwrap())
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub worst: f64,
    pub worst_name: String,
    pub checked: usize,
    pub groups: usize,
}

/// Relative error with a small absolute floor so vanishing gradients do not
/// divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central differences of `loss` on up to `per_tensor` randomly chosen
/// entries of every parameter tensor, plus one random direction through all
/// parameters at once.
pub fn finite_difference_check(
    params: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    eps: f64,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    let ids: Vec<_> = params.ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        let len = params.get(id).len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        report.groups += 1;
        for i in picks {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss(params);
            params.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_name = format!("{}[{i}] analytic {a:e} numeric {numeric:e}", params.name(id));
            }
        }
    }
    // directional derivative through every parameter
    let dirs: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| Tensor::from_fn(params.get(id).shape(), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let shift = |params: &mut ParamStore<f64>, s: f64| {
        for (k, &id) in ids.iter().enumerate() {
            for (p, d) in params.get_mut(id).data_mut().iter_mut().zip(dirs[k].data()) {
                *p += s * d;
            }
        }
    };
    shift(params, eps);
    let up = loss(params);
    shift(params, -2.0 * eps);
    let down = loss(params);
    shift(params, eps);
    let numeric = (up - down) / (2.0 * eps);
    let a: f64 = analytic
        .iter()
        .zip(&dirs)
        .map(|(g, d)| g.data().iter().zip(d.data()).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    let err = rel_err(a, numeric);
    report.checked += 1;
    if err > report.worst {
        report.worst = err;
        report.worst_name = format!("directional analytic {a:e} numeric {numeric:e}");
    }
    report
}

pub mod ssm_oracle {
    //! Loop-level re-derivations of the selective-scan layers.

    use rcd_core::autograd::ParamStore;
    use rcd_core::rcdnet::SsmLayer;
    use rcd_core::scan::{selective_scan_sequential, SsmParams};
    use rcd_core::{Scalar, Tensor};

    fn softplus(v: f64) -> f64 {
        if v > 20.0 { v } else { v.exp().ln_1p() }
    }

    /// `Δ, A, B, C, D` for an `[L, C]` sequence, computed with scalar loops.
    pub fn bind<T: Scalar>(ps: &ParamStore<T>, layer: &SsmLayer, seq: &[Vec<f64>]) -> SsmParams<T> {
        let (c, n, r) = (layer.channels, layer.state_dim, layer.dt_rank);
        let wx = ps.get(layer.x_proj.weight).data();
        let wdt = ps.get(layer.dt_proj.weight).data();
        let bdt = ps.get(layer.dt_proj.bias.unwrap()).data();
        let cols = r + 2 * n;
        let l = seq.len();
        let (mut delta, mut b, mut cc) = (Vec::new(), Vec::new(), Vec::new());
        for x in seq {
            let proj: Vec<f64> = (0..cols)
                .map(|j| (0..c).map(|i| x[i] * wx[i * cols + j].to_f64_lossy()).sum())
                .collect();
            for d in 0..c {
                let pre: f64 = bdt[d].to_f64_lossy() + (0..r).map(|k| proj[k] * wdt[k * c + d].to_f64_lossy()).sum::<f64>();
                delta.push(T::of(softplus(pre)));
            }
            b.extend(proj[r..r + n].iter().map(|&v| T::of(v)));
            cc.extend(proj[r + n..].iter().map(|&v| T::of(v)));
        }
        let a = ps.get(layer.a_log).data().iter().map(|v| T::of(-v.to_f64_lossy().exp())).collect();
        SsmParams {
            delta: Tensor::new(&[l, c], delta).unwrap(),
            a: Tensor::new(&[c, n], a).unwrap(),
            b: Tensor::new(&[l, n], b).unwrap(),
            c: Tensor::new(&[l, n], cc).unwrap(),
            d: ps.get(layer.d_skip).clone(),
        }
    }

    /// Sequential scan of an explicit token list, returned as rows.
    pub fn scan<T: Scalar>(ps: &ParamStore<T>, layer: &SsmLayer, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let p = bind(ps, layer, seq);
        let c = layer.channels;
        let x = Tensor::new(&[seq.len(), c], seq.iter().flatten().map(|&v| T::of(v)).collect()).unwrap();
        let y = selective_scan_sequential(&x, &p).unwrap();
        y.data().chunks(c).map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect()
    }

    /// Four traversals written out with explicit index arithmetic.
    pub fn ss2d<T: Scalar>(ps: &ParamStore<T>, layer: &SsmLayer, feat: &Tensor<T>) -> Vec<f64> {
        let s = feat.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let px = |y: usize, x: usize| -> Vec<f64> {
            (0..c).map(|k| feat.data()[(y * w + x) * c + k].to_f64_lossy()).collect()
        };
        // position p in each traversal -> (y, x)
        let coords: [Box<dyn Fn(usize) -> (usize, usize)>; 4] = [
            Box::new(move |p| (p / w, p % w)),
            Box::new(move |p| ((h * w - 1 - p) / w, (h * w - 1 - p) % w)),
            Box::new(move |p| (p % h, p / h)),
            Box::new(move |p| ((h * w - 1 - p) % h, (h * w - 1 - p) / h)),
        ];
        let mut out = vec![0.0; h * w * c];
        for f in &coords {
            let seq: Vec<Vec<f64>> = (0..h * w).map(|p| { let (y, x) = f(p); px(y, x) }).collect();
            let ys = scan(ps, layer, &seq);
            for (p, row) in ys.iter().enumerate() {
                let (y, x) = f(p);
                for k in 0..c {
                    out[(y * w + x) * c + k] += row[k];
                }
            }
        }
        out
    }

    /// Concat, scan both ways, sum, split, add halves, project.
    pub fn css<T: Scalar>(
        ps: &ParamStore<T>,
        layer: &SsmLayer,
        proj: &rcd_core::nn::Linear,
        f1: &Tensor<T>,
        f2: &Tensor<T>,
    ) -> Vec<f64> {
        let c = f1.shape()[2];
        let rows = |t: &Tensor<T>| -> Vec<Vec<f64>> {
            t.data().chunks(c).map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect()
        };
        let mut seq = rows(f1);
        let n = seq.len();
        seq.extend(rows(f2));
        let fwd = scan(ps, layer, &seq);
        let rev_seq: Vec<Vec<f64>> = seq.iter().rev().cloned().collect();
        let mut bwd = scan(ps, layer, &rev_seq);
        bwd.reverse();
        let w = ps.get(proj.weight).data();
        let b = ps.get(proj.bias.unwrap()).data();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let mixed: Vec<f64> = (0..c).map(|k| fwd[i][k] + bwd[i][k] + fwd[n + i][k] + bwd[n + i][k]).collect();
            for j in 0..c {
                out.push(b[j].to_f64_lossy() + (0..c).map(|k| mixed[k] * w[k * c + j].to_f64_lossy()).sum::<f64>());
            }
        }
        out
    }
}

/// `max|a − b| / max|b|`, the max-norm relative error.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);
    diff / scale
}

/// Writes `ids.len()` toy samples in the semantic pair layout under `root`
/// (`im1`, `im2`, `label1`, `label2`) plus `train.txt` and `test.txt` split
/// files listing every id. Pre labels are all zero.
pub fn write_scd_fixture(root: &std::path::Path, vocab: &Arc<ClassVocabulary>, seeds: &[u64], size: usize) {
    use rcd_core::data::{write_label_png, write_rgb_png};
    for d in ["im1", "im2", "label1", "label2"] {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
    let mut ids = String::new();
    for &s in seeds {
        let (pair, label) = toy_sample(s, size, vocab);
        let id = pair.id.clone();
        let file = |d: &str| root.join(d).join(format!("{id}.png"));
        write_rgb_png(&file("im1"), pair.pre()).unwrap();
        write_rgb_png(&file("im2"), pair.post()).unwrap();
        let zeros = SemanticLabelMap::new(size, size, vec![0; size * size], vocab.clone()).unwrap();
        write_label_png(&file("label1"), &zeros).unwrap();
        write_label_png(&file("label2"), &label).unwrap();
        ids.push_str(&id);
        ids.push('\n');
    }
    std::fs::write(root.join("train.txt"), &ids).unwrap();
    std::fs::write(root.join("test.txt"), &ids).unwrap();
}

/// Config text registering a semantic fixture dataset under `name`.
pub fn dataset_keys(name: &str, root: &std::path::Path, classes: &[&str]) -> String {
    format!(
        "data.{name}.root = {}\ndata.{name}.layout = scd_pairs\ndata.{name}.classes = {}\n\
         data.{name}.split.train = train.txt\ndata.{name}.split.test = test.txt\n",
        root.display(),
        classes.join(", ")
    )
}
