//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use prunekit::data::Samples;
use prunekit::graph::{
    build_resnet, build_tiny_cnn, infer_shapes, Head, ModelGraph, ResNetConfig, ShortcutKind, StemConfig,
    TinyCnnConfig,
};
use prunekit::ops::{ConvGeometry, LayerParams};
use prunekit::Tensor4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod checks;
#[allow(unused_imports)]
pub use checks::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f32, hi: f32) -> Tensor4 {
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by at least `gap`.
pub fn away_from_zero(rng: &mut ChaCha8Rng, dims: [usize; 4], gap: f32) -> Tensor4 {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor4::from_vec(dims, data).unwrap()
}

/// Pairwise distinct values spaced `step` apart, in random positions.
pub fn distinct(rng: &mut ChaCha8Rng, dims: [usize; 4], step: f32) -> Tensor4 {
    let n: usize = dims.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let data = idx.iter().map(|&i| (i as f32 - n as f32 / 2.0) * step).collect();
    Tensor4::from_vec(dims, data).unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> LayerParams {
    let w = uniform(rng, dims, -1.0, 1.0);
    let b = (0..dims[0]).map(|_| rng.random_range(-0.5..0.5)).collect();
    LayerParams::new(w, b).unwrap()
}

/// `sum(r * y)` accumulated in f64.
pub fn dot(r: &Tensor4, y: &Tensor4) -> f64 {
    assert_eq!(r.dims(), y.dims());
    r.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central-difference derivative of `f` at every entry of `values`.
pub fn numeric_grad(values: &[f32], h: f32, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut v = values.to_vec();
    (0..v.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + h;
            let up = f(&v);
            v[i] = orig - h;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * h as f64)
        })
        .collect()
}

/// Agreement rule used throughout: `|a - n| <= tol * max(|a|, |n|, 1)`.
pub fn assert_grad_close(what: &str, analytic: &[f32], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        let scale = a.abs().max(n.abs()).max(1.0);
        assert!((a - n).abs() <= tol * scale, "{what}[{i}]: analytic {a} vs numeric {n}");
    }
}

/// Textbook nested-loop cross-correlation, accumulated in f64.
pub fn naive_conv(x: &Tensor4, p: &LayerParams, g: ConvGeometry) -> Tensor4 {
    let [b, c_in, h, w] = x.dims();
    let [c_out, _, k, _] = p.weights.dims();
    let oh = (h + 2 * g.pad - k) / g.stride + 1;
    let ow = (w + 2 * g.pad - k) / g.stride + 1;
    let mut y = Tensor4::zeros([b, c_out, oh, ow]);
    for n in 0..b {
        for o in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = p.bias[o] as f64;
                    for c in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (i * g.stride + ki) as isize - g.pad as isize;
                                let ix = (j * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += p.weights.at(o, c, ki, kj) as f64 * x.at(n, c, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    y.set(n, o, i, j, acc as f32);
                }
            }
        }
    }
    y
}

/// Largest elementwise difference relative to the largest magnitude.
pub fn relative_gap(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff = diff.max((x as f64 - y as f64).abs());
        scale = scale.max((x as f64).abs()).max((y as f64).abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Gives every batch-norm layer non-trivial statistics so masking errors show
/// up in the logits.
pub fn randomize_bn(graph: &mut ModelGraph, seed: u64) {
    let mut r = rng(seed);
    for layer in graph.layers_mut() {
        if let Some(bn) = layer.bn_params_mut() {
            for j in 0..bn.gamma.len() {
                bn.gamma[j] = r.random_range(0.5..1.5);
                bn.beta[j] = r.random_range(-0.5..0.5);
                bn.running_mean[j] = r.random_range(-0.3..0.3);
                bn.running_var[j] = r.random_range(0.5..2.0);
            }
        }
    }
}

pub fn samples(input: [usize; 3], n: usize, classes: usize, seed: u64) -> Samples {
    let mut r = rng(seed);
    let images = uniform(&mut r, [n, input[0], input[1], input[2]], -1.0, 1.0);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Samples::new(images, labels).unwrap()
}

fn tiny(channels: Vec<usize>, pool_after: Vec<bool>, batch_norm: bool, head: Head) -> TinyCnnConfig {
    TinyCnnConfig {
        input: [3, 8, 8],
        classes: 5,
        channels,
        pool_after,
        batch_norm,
        head,
    }
}

fn small_resnet(shortcut: ShortcutKind, stem: usize, pool: bool, blocks: Vec<usize>, widths: Vec<usize>) -> ResNetConfig {
    ResNetConfig {
        name: "small-resnet".into(),
        input: [3, 8, 8],
        classes: 5,
        stem: StemConfig {
            channels: stem,
            kernel: 3,
            stride: 1,
            pad: 1,
            pool,
        },
        stage_blocks: blocks,
        widths,
        shortcut,
    }
}

pub fn chain_fixtures(seed: u64) -> Vec<(&'static str, ModelGraph)> {
    let configs = [
        ("chain-flatten", tiny(vec![6, 8, 8], vec![true, true, false], true, Head::Flatten)),
        ("chain-gap", tiny(vec![5, 7, 9, 6], vec![true, false, true, false], true, Head::GlobalAvgPool)),
        ("chain-no-bn", tiny(vec![4, 6, 5], vec![false, true, false], false, Head::Flatten)),
    ];
    configs
        .into_iter()
        .map(|(name, c)| (name, infer_shapes(&build_tiny_cnn(&c, seed).unwrap()).unwrap()))
        .collect()
}

pub fn pad_resnet_fixtures(seed: u64) -> Vec<(&'static str, ModelGraph)> {
    let configs = [
        ("pad-121", small_resnet(ShortcutKind::IdentityPad, 4, false, vec![1, 2, 1], vec![4, 8, 12])),
        ("pad-widen", small_resnet(ShortcutKind::IdentityPad, 4, false, vec![2, 2], vec![6, 8])),
    ];
    configs
        .into_iter()
        .map(|(name, c)| (name, infer_shapes(&build_resnet(&c, seed).unwrap()).unwrap()))
        .collect()
}

pub fn projection_resnet_fixtures(seed: u64) -> Vec<(&'static str, ModelGraph)> {
    let configs = [
        ("proj-121", small_resnet(ShortcutKind::Projection, 4, false, vec![1, 2, 1], vec![4, 8, 12])),
        ("proj-pool-widen", small_resnet(ShortcutKind::Projection, 4, true, vec![2, 1, 2], vec![6, 6, 8])),
        ("proj-222", small_resnet(ShortcutKind::Projection, 5, false, vec![2, 2, 2], vec![5, 7, 9])),
    ];
    configs
        .into_iter()
        .map(|(name, c)| (name, infer_shapes(&build_resnet(&c, seed).unwrap()).unwrap()))
        .collect()
}

pub fn all_fixtures(seed: u64) -> Vec<(&'static str, ModelGraph)> {
    let mut all = chain_fixtures(seed);
    all.extend(pad_resnet_fixtures(seed));
    all.extend(projection_resnet_fixtures(seed));
    all
}

/// Logit agreement rule: `|a - b| <= tol * max(|a|, |b|, 1)` elementwise.
pub fn assert_logits_close(what: &str, a: &Tensor4, b: &Tensor4, tol: f64) {
    assert_eq!(a.dims(), b.dims(), "{what}: dims");
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let (x, y) = (x as f64, y as f64);
        let scale = x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol * scale, "{what}[{i}]: {x} vs {y}");
    }
}

/// VGG-16 (CIFAR-10) reference costs per layer: `(id, flops, params)`, as
/// published to two significant figures.
pub const VGG16_TABLE: [(&str, f64, f64); 15] = [
    ("conv_1", 1.8e6, 1.7e3),
    ("conv_2", 3.8e7, 3.7e4),
    ("conv_3", 1.9e7, 7.4e4),
    ("conv_4", 3.8e7, 1.5e5),
    ("conv_5", 1.9e7, 2.9e5),
    ("conv_6", 3.8e7, 5.9e5),
    ("conv_7", 3.8e7, 5.9e5),
    ("conv_8", 1.9e7, 1.2e6),
    ("conv_9", 3.8e7, 2.4e6),
    ("conv_10", 3.8e7, 2.4e6),
    ("conv_11", 9.4e6, 2.4e6),
    ("conv_12", 9.4e6, 2.4e6),
    ("conv_13", 9.4e6, 2.4e6),
    ("linear_1", 2.6e5, 2.6e5),
    ("linear_2", 5.1e3, 5.1e3),
];
pub const VGG16_TOTAL: (f64, f64) = (3.1e8, 1.5e7);

/// `v` rounded to two significant figures.
pub fn two_sig(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let e = v.abs().log10().floor() as i32 - 1;
    let unit = 10f64.powi(e);
    (v / unit).round() * unit
}

pub fn same_to_two_sig(a: f64, b: f64) -> bool {
    (two_sig(a) - two_sig(b)).abs() <= 1e-9 * b.abs()
}
