mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use prunekit::data::{synthetic, SyntheticSpec};
use prunekit::graph::{build_tiny_cnn, infer_shapes, Layer, LayerOp, ModelGraph, TinyCnnConfig};
use prunekit::ops::{ConvGeometry, LayerParams};
use prunekit::pruning::{build_plan, score_filters, Criterion, LayerRatios, PruneStrategy};
use prunekit::runtime::forward_observed;
use prunekit::train::{train, TrainConfig};
use prunekit::{Error, Tensor4};

fn conv(id: &str, weights: Tensor4) -> Layer {
    let out = weights.dims()[0];
    let k = weights.dims()[2];
    Layer::new(
        id,
        0,
        LayerOp::Conv {
            geometry: ConvGeometry::new(k, 1, k / 2),
            params: LayerParams::new(weights, vec![0.25; out]).unwrap(),
        },
    )
}

fn linear(id: &str, inp: usize, out: usize) -> Layer {
    Layer::new(
        id,
        0,
        LayerOp::Linear {
            params: LayerParams::new(Tensor4::filled([out, inp, 1, 1], 0.1), vec![0.0; out]).unwrap(),
        },
    )
}

/// `conv_1 -> conv_2 -> avgpool -> linear` with caller-provided conv weights.
fn chain(w1: Tensor4, w2: Tensor4) -> ModelGraph {
    let c_in = w1.dims()[1];
    let out = w2.dims()[0];
    let mut g = ModelGraph::new("hand", [c_in, 3, 3], 2);
    g.push_layer(conv("conv_1", w1));
    g.push_layer(conv("conv_2", w2));
    g.push_layer(Layer::new("avgpool", 0, LayerOp::AvgPool));
    g.push_layer(linear("linear", out, 2));
    infer_shapes(&g).unwrap()
}

#[test]
fn constant_filter_l1_and_l2() {
    let g = chain(Tensor4::filled([4, 3, 3, 3], 0.5), Tensor4::filled([2, 4, 3, 3], 1.0));
    let l1 = score_filters(&g, "conv_1", Criterion::L1, None).unwrap();
    let l2 = score_filters(&g, "conv_1", Criterion::L2, None).unwrap();
    for j in 0..4 {
        // 3 kernels of 9 weights at 0.5; the bias of 0.25 is not counted.
        assert!((l1.scores[j] - 13.5).abs() < 1e-12);
        assert!((l2.scores[j] - 6.75f64.sqrt()).abs() < 1e-12);
    }
    assert_eq!(l1.order, vec![0, 1, 2, 3], "ties go by ascending index");
}

#[test]
fn largest_reverses_l1_and_keeps_index_ties() {
    let w = Tensor4::from_vec([4, 1, 1, 1], vec![3.0, -1.0, 3.0, 2.0]).unwrap();
    let g = chain(w, Tensor4::filled([2, 4, 1, 1], 1.0));
    let l1 = score_filters(&g, "conv_1", Criterion::L1, None).unwrap();
    let big = score_filters(&g, "conv_1", Criterion::Largest, None).unwrap();
    assert_eq!(l1.order, vec![1, 3, 0, 2]);
    assert_eq!(big.order, vec![0, 2, 3, 1]);
}

#[test]
fn random_scores_are_seeded_permutations() {
    let (_, g) = chain_fixtures(0).remove(0);
    let a = score_filters(&g, "conv_2", Criterion::Random { seed: 9 }, None).unwrap();
    let b = score_filters(&g, "conv_2", Criterion::Random { seed: 9 }, None).unwrap();
    let c = score_filters(&g, "conv_2", Criterion::Random { seed: 10 }, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.order, c.order);
    let mut sorted = a.order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..a.order.len()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn norm_rankings_ignore_positive_scale(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut r = rng(seed);
        let w = uniform(&mut r, [6, 3, 3, 3], -1.0, 1.0);
        let scaled = Tensor4::from_vec(w.dims(), w.data().iter().map(|v| v * scale).collect()).unwrap();
        let flipped = Tensor4::from_vec(w.dims(), w.data().iter().map(|v| -v).collect()).unwrap();
        let w2 = uniform(&mut r, [2, 6, 3, 3], -1.0, 1.0);
        let g = chain(w.clone(), w2.clone());
        let gs = chain(scaled, w2.clone());
        let gf = chain(flipped, w2);
        for c in [Criterion::L1, Criterion::L2, Criterion::Largest] {
            let base = score_filters(&g, "conv_1", c, None).unwrap();
            prop_assert_eq!(&base.order, &score_filters(&gs, "conv_1", c, None).unwrap().order);
            prop_assert_eq!(&base.scores, &score_filters(&gf, "conv_1", c, None).unwrap().scores);
        }
    }

    #[test]
    fn duplicated_filters_break_ties_by_index(seed in any::<u64>()) {
        let mut r = rng(seed);
        let one = uniform(&mut r, [1, 2, 3, 3], -1.0, 1.0);
        let data: Vec<f32> = (0..5).flat_map(|_| one.data().to_vec()).collect();
        let g = chain(Tensor4::from_vec([5, 2, 3, 3], data).unwrap(), Tensor4::filled([2, 5, 3, 3], 1.0));
        for c in [Criterion::L1, Criterion::L2, Criterion::Largest] {
            prop_assert_eq!(score_filters(&g, "conv_1", c, None).unwrap().order, vec![0, 1, 2, 3, 4]);
        }
    }
}

/// conv_1 drops filter 0; conv_2 then ranks differently depending on
/// whether its kernels on channel 0 still count.
fn greedy_fixture() -> ModelGraph {
    let w1 = Tensor4::from_vec([2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
    #[rustfmt::skip]
    let w2 = Tensor4::from_vec([3, 2, 1, 1], vec![
        5.0, 0.1, // independent l1 5.1, greedy 0.1
        1.0, 1.0, // 2.0, 1.0
        0.2, 1.5, // 1.7, 1.5
    ]).unwrap();
    chain(w1, w2)
}

#[test]
fn greedy_ignores_kernels_on_removed_channels() {
    let g = greedy_fixture();
    let ratios: LayerRatios = [("conv_1".to_string(), 0.5), ("conv_2".to_string(), 0.34)].into();
    let indep = build_plan(&g, &ratios, Criterion::L1, PruneStrategy::Independent, None).unwrap();
    let greedy = build_plan(&g, &ratios, Criterion::L1, PruneStrategy::Greedy, None).unwrap();
    let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
    assert_eq!(indep.removed("conv_1"), Some(&set(&[0])));
    assert_eq!(greedy.removed("conv_1"), Some(&set(&[0])));
    assert_eq!(indep.removed("conv_2"), Some(&set(&[2])));
    assert_eq!(greedy.removed("conv_2"), Some(&set(&[0])));
    assert_eq!(greedy.induced_inputs.get("conv_2"), Some(&set(&[0])));
}

#[test]
fn random_criterion_is_strategy_agnostic() {
    for (name, g) in all_fixtures(2) {
        let ratios: LayerRatios = g.conv_ids().into_iter().map(|id| (id, 0.5)).collect();
        let c = Criterion::Random { seed: 4 };
        let a = build_plan(&g, &ratios, c, PruneStrategy::Independent, None).unwrap();
        let b = build_plan(&g, &ratios, c, PruneStrategy::Greedy, None).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn first_layer_choice_does_not_depend_on_strategy() {
    for (name, g) in chain_fixtures(5) {
        let ratios: LayerRatios = g.conv_ids().into_iter().map(|id| (id, 0.5)).collect();
        let a = build_plan(&g, &ratios, Criterion::L1, PruneStrategy::Independent, None).unwrap();
        let b = build_plan(&g, &ratios, Criterion::L1, PruneStrategy::Greedy, None).unwrap();
        assert_eq!(a.removed("conv_1"), b.removed("conv_1"), "{name}");
    }
}

/// Per-sample, per-map statistics straight from a nested-loop conv.
fn naive_maps(x: &Tensor4, layer: &Layer) -> Vec<Vec<Vec<f64>>> {
    let LayerOp::Conv { geometry, params } = &layer.op else { panic!("not a conv") };
    let y = naive_conv(x, params, *geometry);
    let [b, c, h, w] = y.dims();
    (0..b)
        .map(|n| {
            (0..c)
                .map(|j| {
                    let mut v = Vec::with_capacity(h * w);
                    for i in 0..h {
                        for k in 0..w {
                            v.push(y.at(n, j, i, k) as f64);
                        }
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn naive_statistic(maps: &[Vec<Vec<f64>>], criterion: Criterion) -> Vec<f64> {
    let n = maps.len() as f64;
    let channels = maps[0].len();
    (0..channels)
        .map(|j| {
            let per_sample: Vec<f64> = maps
                .iter()
                .map(|s| {
                    let m = &s[j];
                    let mean = m.iter().sum::<f64>() / m.len() as f64;
                    match criterion {
                        Criterion::ActMeanMean { .. } => mean,
                        Criterion::ActMeanStd { .. } => {
                            (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64).sqrt()
                        }
                        Criterion::ActMeanL1 { .. } => m.iter().map(|v| v.abs()).sum(),
                        _ => m.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    }
                })
                .collect();
            let mean = per_sample.iter().sum::<f64>() / n;
            match criterion {
                Criterion::ActVarL2 { .. } => per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n,
                _ => mean,
            }
        })
        .collect()
}

#[test]
fn activation_scores_match_a_naive_oracle_on_a_trained_net() {
    let data = synthetic(&SyntheticSpec {
        size: 8,
        train_count: 200,
        test_count: 50,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TinyCnnConfig {
        input: [3, 8, 8],
        channels: vec![6, 8],
        pool_after: vec![true, false],
        ..TinyCnnConfig::default()
    };
    let mut g = infer_shapes(&build_tiny_cnn(&cfg, 3).unwrap()).unwrap();
    train(&mut g, &data, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
    let n = 60;
    let (x, _) = data.train.gather(&(0..n).collect::<Vec<_>>());
    // The input of conv_2 is the output of the pool before it.
    let mut before_conv2 = None;
    forward_observed(&g, &x, &mut |layer, out| {
        if layer.id == "pool_1" {
            before_conv2 = Some(out.clone());
        }
    })
    .unwrap();
    let inputs = [("conv_1", x.clone()), ("conv_2", before_conv2.unwrap())];
    for name in ["act_mean_mean", "act_mean_std", "act_mean_l1", "act_mean_l2", "act_var_l2"] {
        let c = Criterion::from_name(name, 0, n).unwrap();
        for (id, input) in &inputs {
            let oracle = naive_statistic(&naive_maps(input, g.layer(id).unwrap()), c);
            let got = score_filters(&g, id, c, Some(&data.train)).unwrap();
            for (j, (&a, &b)) in got.scores.iter().zip(&oracle).enumerate() {
                let tol = 1e-4 * a.abs().max(b.abs()).max(1e-3);
                assert!((a - b).abs() <= tol, "{name} {id}[{j}]: {a} vs oracle {b}");
            }
        }
    }
}

#[test]
fn activation_criteria_only_look_at_the_first_samples() {
    let (_, g) = chain_fixtures(1).remove(0);
    let data = samples(g.input_shape, 40, g.class_count, 1);
    let head = data.head(10);
    let c = Criterion::ActMeanL2 { samples: 10 };
    assert_eq!(
        score_filters(&g, "conv_2", c, Some(&data)).unwrap(),
        score_filters(&g, "conv_2", c, Some(&head)).unwrap()
    );
}

#[test]
fn misuse_is_reported() {
    let (_, g) = chain_fixtures(1).remove(0);
    let ratios: LayerRatios = [("conv_1".to_string(), 0.5)].into();
    let act = Criterion::ActMeanL1 { samples: 10 };
    assert!(matches!(build_plan(&g, &ratios, act, PruneStrategy::Independent, None), Err(Error::Config(_))));
    let few = samples(g.input_shape, 5, g.class_count, 0);
    assert!(matches!(score_filters(&g, "conv_1", act, Some(&few)), Err(Error::Config(_))));
    let full: LayerRatios = [("conv_1".to_string(), 1.0)].into();
    assert!(matches!(build_plan(&g, &full, Criterion::L1, PruneStrategy::Independent, None), Err(Error::Validation(_))));
    let bn: LayerRatios = [("bn_1".to_string(), 0.5)].into();
    assert!(matches!(build_plan(&g, &bn, Criterion::L1, PruneStrategy::Independent, None), Err(Error::Validation(_))));
    assert!(matches!(score_filters(&g, "nope", Criterion::L1, None), Err(Error::Validation(_))));
    assert!(matches!("bogus".parse::<Criterion>(), Err(Error::Config(_))));
}
