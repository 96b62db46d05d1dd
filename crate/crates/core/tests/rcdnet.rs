mod common;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcd_core::autograd::{Graph, ParamStore};
use rcd_core::nn::Linear;
use rcd_core::rcdnet::{css_fuse, sample_target_class, ss2d, RcdNet, RcdNetConfig, SsmLayer};
use rcd_core::textcond::{StubEmbedder, TextEmbedder};
use rcd_core::{ClassVocabulary, RasterImage, RasterPair, RcdError, SemanticLabelMap, Tensor};

use common::{norm_rel_err, ssm_oracle};

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> RasterImage {
    RasterImage::new(size, size, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_pair(seed: u64, size: usize) -> RasterPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pre = random_image(&mut rng, size);
    let post = random_image(&mut rng, size);
    RasterPair::new("r", pre, post).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn embed(prompt: &str) -> rcd_core::TextEmbedding<f64> {
    StubEmbedder::new(4, 64, 0).unwrap().embed(prompt).unwrap()
}

#[test]
fn stage_shapes_at_64() {
    let model = RcdNet::<f64>::new(RcdNetConfig::default(), 3).unwrap();
    let (a, b) = model.seb_forward(&random_pair(1, 64)).unwrap();
    let want = [vec![16, 16, 16], vec![8, 8, 32], vec![4, 4, 64], vec![2, 2, 128]];
    assert_eq!(a.shapes(), want);
    assert_eq!(b.shapes(), want);
    let fused = model.fusion_forward(&a, &b).unwrap();
    assert_eq!(fused.shapes(), want);
    let logits = model.forward(&random_pair(1, 64), &embed("building")).unwrap();
    assert_eq!((logits.height(), logits.width()), (64, 64));
}

#[test]
fn rejects_bad_geometry_and_text_width() {
    let model = RcdNet::<f64>::new(RcdNetConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pre = RasterImage::new(48, 48, (0..48 * 48 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let pair = RasterPair::new("odd", pre.clone(), pre).unwrap();
    assert!(matches!(model.seb_forward(&pair), Err(RcdError::Validation(_))));
    let narrow: rcd_core::TextEmbedding<f64> = StubEmbedder::new(4, 32, 0).unwrap().embed("building").unwrap();
    assert!(matches!(model.forward(&random_pair(2, 32), &narrow), Err(RcdError::Validation(_))));
}

#[test]
fn siamese_branches_share_weights() {
    let model = RcdNet::<f64>::new(RcdNetConfig::default(), 4).unwrap();
    let pair = random_pair(5, 32);
    let same = RasterPair::new("same", pair.pre().clone(), pair.pre().clone()).unwrap();
    let (a, b) = model.seb_forward(&same).unwrap();
    assert_eq!(a, b);
    let (x, y) = model.seb_forward(&pair).unwrap();
    let (sx, sy) = model.seb_forward(&pair.swapped()).unwrap();
    assert_eq!(x, sy);
    assert_eq!(y, sx);
}

#[test]
fn zeroed_fusion_output_gives_bias_map() {
    let mut model = RcdNet::<f64>::new(RcdNetConfig::default(), 6).unwrap();
    model.zero_fusion_output();
    let pair = random_pair(7, 32);
    let same = RasterPair::new("same", pair.pre().clone(), pair.pre().clone()).unwrap();
    let (a, b) = model.seb_forward(&same).unwrap();
    let fused = model.fusion_forward(&a, &b).unwrap();
    for k in 0..4 {
        assert!(fused.maps[k].data().iter().all(|&v| v == 0.0));
    }
    // a nonzero bias shows up broadcast over every pixel
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..4 {
        let c = model.config.stage_channels(k);
        let bias = random_tensor(&mut rng, &[c]);
        let id = model.params.find(&format!("fusion.stage{}.out.bias", k + 1)).unwrap();
        model.params.set(id, bias).unwrap();
    }
    let fused = model.fusion_forward(&a, &b).unwrap();
    for k in 0..4 {
        let bias = model.fusion_output_bias(k).data().to_vec();
        for px in fused.maps[k].data().chunks(bias.len()) {
            assert_eq!(px, &bias[..]);
        }
    }
}

#[test]
fn zeroed_attention_output_ignores_text() {
    let mut model = RcdNet::<f64>::new(RcdNetConfig::default(), 9).unwrap();
    let pair = random_pair(10, 32);
    let l1 = model.forward(&pair, &embed("building")).unwrap();
    let l2 = model.forward(&pair, &embed("water")).unwrap();
    assert_ne!(l1, l2);
    model.zero_cross_attention_output();
    let l1 = model.forward(&pair, &embed("building")).unwrap();
    let l2 = model.forward(&pair, &embed("water")).unwrap();
    assert_eq!(l1, l2);
}

#[test]
fn forward_is_deterministic() {
    let a = RcdNet::<f32>::new(RcdNetConfig::default(), 11).unwrap();
    let b = RcdNet::<f32>::new(RcdNetConfig::default(), 11).unwrap();
    let pair = random_pair(12, 32);
    let text = StubEmbedder::new(4, 64, 0).unwrap().embed("tree").unwrap();
    let l1 = a.forward(&pair, &text).unwrap();
    let l2 = b.forward(&pair, &text).unwrap();
    let l3 = a.forward(&pair, &text).unwrap();
    let bits = |l: &rcd_core::LogitMap<f32>| l.logits().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&l1), bits(&l2));
    assert_eq!(bits(&l1), bits(&l3));
}

#[test]
fn config_validation() {
    let bad = RcdNetConfig { heads: 3, ..RcdNetConfig::default() };
    assert!(bad.validate().is_err());
    let bad = RcdNetConfig { depths: [1, 0, 1, 1], ..RcdNetConfig::default() };
    assert!(bad.validate().is_err());
    assert!(RcdNetConfig::vmamba_small().validate().is_ok());
}

fn layer(seed: u64, c: usize, n: usize) -> (ParamStore<f64>, SsmLayer, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let layer = SsmLayer::new(&mut ps, "t", c, n, &mut rng);
    (ps, layer, rng)
}

fn run_ss2d(ps: &ParamStore<f64>, layer: &SsmLayer, f: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::inference();
    (*ss2d(&g, ps, layer, g.constant(f.clone())).value()).clone()
}

#[test]
fn ss2d_single_pixel_is_four_single_steps() {
    let (ps, layer, mut rng) = layer(13, 3, 4);
    let f = random_tensor(&mut rng, &[1, 1, 3]);
    let out = run_ss2d(&ps, &layer, &f);
    let single = ssm_oracle::scan(&ps, &layer, &[f.data().to_vec()]);
    for k in 0..3 {
        assert!((out.data()[k] - 4.0 * single[0][k]).abs() < 1e-12);
    }
}

#[test]
fn ss2d_constant_input_with_unit_decay_is_rotation_symmetric() {
    let (mut ps, layer, _) = layer(14, 2, 4);
    // a_log = -1000 makes A = -exp(-1000) = -0, so exp(ΔA) = 1
    let a = Tensor::full(&[2, 4], -1000.0);
    ps.set(layer.a_log, a).unwrap();
    let (h, w, c) = (4, 5, 2);
    let f = Tensor::from_fn(&[h, w, c], |i| [0.7, -0.3][i % 2]);
    let out = run_ss2d(&ps, &layer, &f);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let p = out.data()[(y * w + x) * c + k];
                let q = out.data()[((h - 1 - y) * w + (w - 1 - x)) * c + k];
                assert!((p - q).abs() < 1e-12 * p.abs().max(1.0), "{p} vs {q}");
            }
        }
    }
}

#[test]
fn ss2d_matches_index_bookkeeping_oracle() {
    let (ps, layer, mut rng) = layer(15, 2, 4);
    let f = random_tensor(&mut rng, &[4, 4, 2]);
    let out = run_ss2d(&ps, &layer, &f);
    let want = ssm_oracle::ss2d(&ps, &layer, &f);
    assert!(norm_rel_err(out.data(), &want) < 1e-10);
    let f = random_tensor(&mut rng, &[3, 5, 2]);
    let out = run_ss2d(&ps, &layer, &f);
    assert!(norm_rel_err(out.data(), &ssm_oracle::ss2d(&ps, &layer, &f)) < 1e-10);
}

fn css_setup(seed: u64, c: usize) -> (ParamStore<f64>, SsmLayer, Linear, ChaCha8Rng) {
    let (mut ps, layer, mut rng) = layer(seed, c, 4);
    let proj = Linear::new(&mut ps, "proj", c, c, true, &mut rng);
    let bias = random_tensor(&mut rng, &[c]);
    ps.set(proj.bias.unwrap(), bias).unwrap();
    (ps, layer, proj, rng)
}

fn run_css(ps: &ParamStore<f64>, layer: &SsmLayer, proj: &Linear, f1: &Tensor<f64>, f2: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::inference();
    let out = css_fuse(&g, ps, layer, proj, g.constant(f1.clone()), g.constant(f2.clone()));
    (*out.value()).clone()
}

#[test]
fn css_matches_explicit_concatenation() {
    let (ps, layer, proj, mut rng) = css_setup(16, 3);
    let f1 = random_tensor(&mut rng, &[3, 4, 3]);
    let f2 = random_tensor(&mut rng, &[3, 4, 3]);
    let out = run_css(&ps, &layer, &proj, &f1, &f2);
    assert!(norm_rel_err(out.data(), &ssm_oracle::css(&ps, &layer, &proj, &f1, &f2)) < 1e-10);
}

#[test]
fn css_zero_input_is_bias_image() {
    let (ps, layer, proj, _) = css_setup(17, 3);
    let z = Tensor::zeros(&[2, 2, 3]);
    let out = run_css(&ps, &layer, &proj, &z, &z);
    let bias = ps.get(proj.bias.unwrap()).data().to_vec();
    for px in out.data().chunks(3) {
        assert_eq!(px, &bias[..]);
    }
}

/// Raw bidirectional outputs of the concatenation, split in halves.
fn css_halves(ps: &ParamStore<f64>, layer: &SsmLayer, f: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let c = f.shape()[2];
    let rows: Vec<Vec<f64>> = f.data().chunks(c).map(|r| r.to_vec()).collect();
    let n = rows.len();
    let mut seq = rows.clone();
    seq.extend(rows);
    let fwd = ssm_oracle::scan(ps, layer, &seq);
    let rev: Vec<Vec<f64>> = seq.iter().rev().cloned().collect();
    let mut bwd = ssm_oracle::scan(ps, layer, &rev);
    bwd.reverse();
    let both: Vec<Vec<f64>> = fwd.iter().zip(&bwd).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    (both[..n].concat(), both[n..].concat())
}

#[test]
fn css_equal_branches_give_equal_halves_without_decay() {
    let (mut ps, layer, _, mut rng) = css_setup(18, 3);
    ps.set(layer.a_log, Tensor::full(&[3, 4], -1000.0)).unwrap();
    let f = random_tensor(&mut rng, &[2, 3, 3]);
    let (first, second) = css_halves(&ps, &layer, &f);
    assert!(norm_rel_err(&first, &second) < 1e-12);
}

#[test]
fn css_equal_branches_with_decay_can_differ() {
    let (ps, layer, _, mut rng) = css_setup(19, 3);
    let f = random_tensor(&mut rng, &[2, 3, 3]);
    let (first, second) = css_halves(&ps, &layer, &f);
    assert!(norm_rel_err(&first, &second) > 1e-6);
}

#[test]
#[should_panic(expected = "equal shapes")]
fn css_rejects_shape_mismatch() {
    let (ps, layer, proj, _) = css_setup(20, 2);
    run_css(&ps, &layer, &proj, &Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[2, 3, 2]));
}

fn vocab3() -> Arc<ClassVocabulary> {
    Arc::new(ClassVocabulary::new(["a", "b", "c", "d", "e"]).unwrap())
}

#[test]
fn target_class_sampling_frequencies() {
    let v = vocab3();
    let map = SemanticLabelMap::new(2, 2, vec![0, 2, 5, 2], v.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut twos = 0usize;
    for _ in 0..10_000 {
        match sample_target_class(&map, &v, &mut rng).unwrap() {
            2 => twos += 1,
            5 => {}
            other => panic!("sampled absent class {other}"),
        }
    }
    let freq = twos as f64 / 10_000.0;
    assert!((freq - 0.5).abs() < 0.05, "{freq}");

    let small = Arc::new(ClassVocabulary::new(["x", "y", "z"]).unwrap());
    let empty = SemanticLabelMap::new(2, 2, vec![0; 4], small.clone()).unwrap();
    for _ in 0..100 {
        let c = sample_target_class(&empty, &small, &mut rng).unwrap();
        assert!((1..=3).contains(&c));
    }
    let only3 = SemanticLabelMap::new(1, 2, vec![3, 0], small.clone()).unwrap();
    for _ in 0..100 {
        assert_eq!(sample_target_class(&only3, &small, &mut rng).unwrap(), 3);
    }
}
