//! Checks shared by the per-crate integration tests and the acceptance run.

use std::collections::BTreeSet;

use prunekit::graph::{count_flops, infer_shapes, Layer, LayerOp, ModelGraph, Shortcut};
use prunekit::ops::*;
use prunekit::pruning::{apply_plan, build_plan, mask_equivalent, Criterion, LayerRatios, PrunePlan, PruneStrategy};
use prunekit::runtime::forward;
use prunekit::Tensor4;
use rand::Rng;

use super::*;

// Finite-difference gradient checks, one randomized instance per seed.

pub const GRAD_H: f32 = 1e-2;
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_INSTANCES: u64 = 20;

fn with_data(t: &Tensor4, v: &[f32]) -> Tensor4 {
    Tensor4::from_vec(t.dims(), v.to_vec()).unwrap()
}

pub fn grad_conv(seed: u64) {
    let mut r = rng(seed);
    let (b, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = [1, 3][r.random_range(0..2)];
    let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
    let (h, w) = (r.random_range(k..7), r.random_range(k..7));
    let g = ConvGeometry::new(k, stride, pad);
    let x = uniform(&mut r, [b, ci, h, w], -1.0, 1.0);
    let p = random_params(&mut r, [co, ci, k, k]);
    let y = conv2d_forward(&x, &p, g).unwrap();
    let rr = uniform(&mut r, y.dims(), -1.0, 1.0);
    let grads = conv2d_backward(&rr, &x, &p, g).unwrap();

    let n = numeric_grad(x.data(), GRAD_H, |v| dot(&rr, &conv2d_forward(&with_data(&x, v), &p, g).unwrap()));
    assert_grad_close(&format!("conv input #{seed}"), grads.grad_input.data(), &n, GRAD_TOL);
    let n = numeric_grad(p.weights.data(), GRAD_H, |v| {
        let q = LayerParams::new(with_data(&p.weights, v), p.bias.clone()).unwrap();
        dot(&rr, &conv2d_forward(&x, &q, g).unwrap())
    });
    assert_grad_close(&format!("conv weights #{seed}"), grads.grad_weights.data(), &n, GRAD_TOL);
    let n = numeric_grad(&p.bias, GRAD_H, |v| {
        let q = LayerParams::new(p.weights.clone(), v.to_vec()).unwrap();
        dot(&rr, &conv2d_forward(&x, &q, g).unwrap())
    });
    assert_grad_close(&format!("conv bias #{seed}"), &grads.grad_bias, &n, GRAD_TOL);
}

pub fn grad_linear(seed: u64) {
    let mut r = rng(100 + seed);
    let (b, c, s, out) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..3), r.random_range(1..5));
    let x = uniform(&mut r, [b, c, s, s], -1.0, 1.0);
    let p = random_params(&mut r, [out, c * s * s, 1, 1]);
    let y = linear_forward(&x, &p).unwrap();
    let rr = uniform(&mut r, y.dims(), -1.0, 1.0);
    let grads = linear_backward(&rr, &x, &p).unwrap();
    let n = numeric_grad(x.data(), GRAD_H, |v| dot(&rr, &linear_forward(&with_data(&x, v), &p).unwrap()));
    assert_grad_close(&format!("linear input #{seed}"), grads.grad_input.data(), &n, GRAD_TOL);
    let n = numeric_grad(p.weights.data(), GRAD_H, |v| {
        let q = LayerParams::new(with_data(&p.weights, v), p.bias.clone()).unwrap();
        dot(&rr, &linear_forward(&x, &q).unwrap())
    });
    assert_grad_close(&format!("linear weights #{seed}"), grads.grad_weights.data(), &n, GRAD_TOL);
    let n = numeric_grad(&p.bias, GRAD_H, |v| {
        let q = LayerParams::new(p.weights.clone(), v.to_vec()).unwrap();
        dot(&rr, &linear_forward(&x, &q).unwrap())
    });
    assert_grad_close(&format!("linear bias #{seed}"), &grads.grad_bias, &n, GRAD_TOL);
}

pub fn grad_batchnorm(seed: u64) {
    let mut r = rng(200 + seed);
    let (b, c, s) = (r.random_range(2..4), r.random_range(1..4), r.random_range(2..4));
    let x = uniform(&mut r, [b, c, s, s], -2.0, 2.0);
    let mut p = BatchNormParams::identity(c);
    for j in 0..c {
        p.gamma[j] = r.random_range(0.5..1.5);
        p.beta[j] = r.random_range(-0.5..0.5);
    }
    let eval = |x: &Tensor4, p: &BatchNormParams| {
        let mut q = p.clone();
        batchnorm_forward_train(x, &mut q, BN_EPSILON, BN_MOMENTUM).unwrap()
    };
    let (y, cache) = eval(&x, &p);
    let rr = uniform(&mut r, y.dims(), -1.0, 1.0);
    let grads = batchnorm_backward(&rr, &cache, &p).unwrap();
    let n = numeric_grad(x.data(), GRAD_H, |v| dot(&rr, &eval(&with_data(&x, v), &p).0));
    assert_grad_close(&format!("bn input #{seed}"), grads.grad_input.data(), &n, GRAD_TOL);
    let n = numeric_grad(&p.gamma, GRAD_H, |v| {
        let mut q = p.clone();
        q.gamma = v.to_vec();
        dot(&rr, &eval(&x, &q).0)
    });
    assert_grad_close(&format!("bn gamma #{seed}"), &grads.grad_gamma, &n, GRAD_TOL);
    let n = numeric_grad(&p.beta, GRAD_H, |v| {
        let mut q = p.clone();
        q.beta = v.to_vec();
        dot(&rr, &eval(&x, &q).0)
    });
    assert_grad_close(&format!("bn beta #{seed}"), &grads.grad_beta, &n, GRAD_TOL);
}

pub fn grad_relu(seed: u64) {
    let mut r = rng(300 + seed);
    let dims = [r.random_range(1..3), r.random_range(1..4), 3, 3];
    let x = away_from_zero(&mut r, dims, 4.0 * GRAD_H);
    let rr = uniform(&mut r, dims, -1.0, 1.0);
    let g = relu_backward(&rr, &x).unwrap();
    let n = numeric_grad(x.data(), GRAD_H, |v| dot(&rr, &relu_forward(&with_data(&x, v))));
    assert_grad_close(&format!("relu #{seed}"), g.data(), &n, GRAD_TOL);
}

pub fn grad_maxpool(seed: u64) {
    let mut r = rng(400 + seed);
    let dims = [r.random_range(1..3), r.random_range(1..3), r.random_range(2..6), r.random_range(2..6)];
    let x = distinct(&mut r, dims, 10.0 * GRAD_H);
    let (y, arg) = maxpool2x2_forward(&x).unwrap();
    let rr = uniform(&mut r, y.dims(), -1.0, 1.0);
    let g = maxpool2x2_backward(&rr, &arg, x.dims()).unwrap();
    let n = numeric_grad(x.data(), GRAD_H, |v| dot(&rr, &maxpool2x2_forward(&with_data(&x, v)).unwrap().0));
    assert_grad_close(&format!("maxpool #{seed}"), g.data(), &n, GRAD_TOL);
}

pub fn grad_avgpool(seed: u64) {
    let mut r = rng(500 + seed);
    let dims = [r.random_range(1..3), r.random_range(1..4), r.random_range(1..5), r.random_range(1..5)];
    let x = uniform(&mut r, dims, -1.0, 1.0);
    let y = avgpool_global_forward(&x);
    let rr = uniform(&mut r, y.dims(), -1.0, 1.0);
    let g = avgpool_global_backward(&rr, x.dims()).unwrap();
    let n = numeric_grad(x.data(), GRAD_H, |v| dot(&rr, &avgpool_global_forward(&with_data(&x, v))));
    assert_grad_close(&format!("avgpool #{seed}"), g.data(), &n, GRAD_TOL);
}

pub fn grad_softmax_cross_entropy(seed: u64) {
    let mut r = rng(600 + seed);
    let (b, k) = (r.random_range(1..5), r.random_range(2..8));
    let x = uniform(&mut r, [b, k, 1, 1], -3.0, 3.0);
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
    let (_, g) = softmax_cross_entropy(&x, &labels).unwrap();
    let n = numeric_grad(x.data(), GRAD_H, |v| softmax_cross_entropy(&with_data(&x, v), &labels).unwrap().0);
    assert_grad_close(&format!("cross-entropy #{seed}"), g.data(), &n, GRAD_TOL);
}

pub const GRAD_OPS: [(&str, fn(u64)); 7] = [
    ("conv", grad_conv),
    ("linear", grad_linear),
    ("batchnorm", grad_batchnorm),
    ("relu", grad_relu),
    ("maxpool", grad_maxpool),
    ("avgpool", grad_avgpool),
    ("softmax_cross_entropy", grad_softmax_cross_entropy),
];

// Pruned versus masked models.

pub const MASK_CRITERIA: [&str; 6] = ["l1", "l2", "largest", "random", "act_mean_l1", "act_var_l2"];

/// One of the eight fixtures, with randomized batch-norm statistics.
pub fn fixture(index: usize, seed: u64) -> (&'static str, ModelGraph) {
    let mut all = all_fixtures(seed);
    let (name, mut g) = all.swap_remove(index % all.len());
    randomize_bn(&mut g, seed ^ 0x5eed);
    (name, g)
}

fn random_ratios(g: &ModelGraph, seed: u64) -> LayerRatios {
    let mut r = rng(seed);
    g.conv_ids()
        .into_iter()
        .filter_map(|id| r.random_bool(0.7).then(|| (id, r.random_range(0.1..0.8))))
        .collect()
}

/// Random plan on fixture `index`; the pruned and masked models must agree
/// on the logits of 10 inputs. Returns the fixture name.
pub fn masked_case(index: usize, seed: u64, criterion: usize, greedy: bool) -> &'static str {
    let (name, g) = fixture(index, seed);
    let criterion = Criterion::from_name(MASK_CRITERIA[criterion % MASK_CRITERIA.len()], seed, 16).unwrap();
    let strategy = if greedy { PruneStrategy::Greedy } else { PruneStrategy::Independent };
    let data = samples(g.input_shape, 16, g.class_count, seed + 1);
    let ratios = random_ratios(&g, seed + 2);
    let plan = build_plan(&g, &ratios, criterion, strategy, Some(&data)).unwrap();
    let pruned = apply_plan(&g, &plan).unwrap();
    let masked = mask_equivalent(&g, &plan).unwrap();
    let before = count_flops(&g).unwrap().total_flops;
    let after = count_flops(&pruned).unwrap().total_flops;
    assert_eq!(plan.is_empty(), before == after, "{name}: flops must drop exactly when filters go");
    let inputs = samples(g.input_shape, 10, g.class_count, seed + 3);
    let a = forward(&pruned, &inputs.images).unwrap();
    let b = forward(&masked, &inputs.images).unwrap();
    assert_logits_close(&format!("{name} {criterion} {strategy:?}"), &a, &b, 1e-5);
    name
}

// Residual coupling.

pub const COUPLING_CRITERIA: [Criterion; 4] =
    [Criterion::L1, Criterion::L2, Criterion::Largest, Criterion::Random { seed: 3 }];

/// Every conv, second convs and shortcuts included, gets the same ratio.
pub fn everything(g: &ModelGraph, ratio: f64) -> LayerRatios {
    g.layers().iter().filter(|l| l.is_conv()).map(|l| (l.id.clone(), ratio)).collect()
}

pub fn removed(plan: &PrunePlan, id: &str) -> BTreeSet<usize> {
    plan.removed(id).cloned().unwrap_or_default()
}

pub fn plan_for(g: &ModelGraph, ratio: f64, criterion: Criterion, strategy: PruneStrategy) -> PrunePlan {
    build_plan(g, &everything(g, ratio), criterion, strategy, None).unwrap()
}

pub fn check_projection(g: &ModelGraph, plan: &PrunePlan) {
    for b in g.blocks() {
        let second = removed(plan, &b.second_conv().unwrap().id);
        match &b.shortcut {
            Shortcut::Projection { conv, .. } => {
                assert_eq!(second, removed(plan, &conv.id), "{}: second conv vs shortcut", b.id);
            }
            // An identity block after a projection inherits its channels, so
            // its second conv drops exactly what arrives on the skip path.
            Shortcut::Identity => {
                let arriving = plan.couplings.get(&b.id).cloned().unwrap_or_default();
                assert_eq!(second, arriving, "{}: identity block must stay aligned", b.id);
            }
            Shortcut::IdentityPad { .. } => unreachable!("projection fixture"),
        }
    }
    apply_plan(g, plan).unwrap();
}

pub fn check_pad(g: &ModelGraph, plan: &PrunePlan) {
    for b in g.blocks() {
        let second = &b.second_conv().unwrap().id;
        assert!(plan.removed(second).is_none(), "{}: second conv {second} was pruned", b.id);
        assert!(!plan.couplings.contains_key(&b.id), "{}: residual channels changed", b.id);
    }
    assert!(plan.removed("conv_1").is_none(), "stem feeds an identity shortcut");
    apply_plan(g, plan).unwrap();
}

// FLOP arithmetic.

pub fn constant_conv(id: &str, inp: usize, out: usize, g: ConvGeometry) -> Layer {
    let weights = Tensor4::filled([out, inp, g.kernel, g.kernel], 0.1);
    Layer::new(
        id,
        0,
        LayerOp::Conv {
            geometry: g,
            params: LayerParams::new(weights, vec![0.0; out]).unwrap(),
        },
    )
}

/// `c0 -> n -> c2` convs; pruning conv_1 touches exactly these two layers.
pub fn two_conv_chain(c0: usize, n: usize, c2: usize, size: usize) -> ModelGraph {
    let mut g = ModelGraph::new("two-conv", [c0, size, size], 3);
    g.push_layer(constant_conv("conv_1", c0, n, ConvGeometry::new(3, 1, 1)));
    g.push_layer(Layer::new("relu_1", 0, LayerOp::Relu));
    g.push_layer(constant_conv("conv_2", n, c2, ConvGeometry::new(3, 1, 1)));
    g.push_layer(Layer::new("avgpool", 0, LayerOp::AvgPool));
    g.push_layer(Layer::new(
        "linear",
        0,
        LayerOp::Linear {
            params: LayerParams::new(Tensor4::filled([3, c2, 1, 1], 0.1), vec![0.0; 3]).unwrap(),
        },
    ));
    infer_shapes(&g).unwrap()
}

fn pair_flops(g: &ModelGraph) -> u64 {
    count_flops(g).unwrap().rows.iter().filter(|r| r.layer == "conv_1" || r.layer == "conv_2").map(|r| r.flops).sum()
}

/// Every `m < n`: pruning m of conv_1's n filters removes exactly m/n of the
/// pair's FLOPs, compared as integers.
pub fn m_of_n_case(n: usize) {
    let g = two_conv_chain(3, n, 5, 6);
    let base = pair_flops(&g);
    for m in 0..n {
        // Ratio m/n selects exactly m filters; the removed set is arbitrary.
        let ratios: LayerRatios = [("conv_1".to_string(), m as f64 / n as f64)].into();
        let plan = build_plan(&g, &ratios, Criterion::L1, PruneStrategy::Independent, None).unwrap();
        assert_eq!(plan.m.get("conv_1").copied().unwrap_or(0), m, "n={n} m={m}");
        let pruned = pair_flops(&apply_plan(&g, &plan).unwrap());
        assert_eq!((base - pruned) * n as u64, base * m as u64, "n={n} m={m}");
    }
}
