use prunekit::graph::{build_vgg16_cifar, count_flops, flop_reduction, infer_shapes};
use prunekit::pruning::{apply_plan, build_plan, Criterion, LayerRatios, PruneStrategy};

fn pruned_a_ratios() -> LayerRatios {
    let mut r = LayerRatios::new();
    r.insert("conv_1".into(), 0.5);
    for i in 8..=13 {
        r.insert(format!("conv_{i}"), 0.5);
    }
    r
}

#[test]
fn vgg_pruned_a_reduction() {
    let g = infer_shapes(&build_vgg16_cifar(3)).unwrap();
    let plan = build_plan(&g, &pruned_a_ratios(), Criterion::L1, PruneStrategy::Independent, None).unwrap();
    let p = apply_plan(&g, &plan).unwrap();
    let red = flop_reduction(&count_flops(&g).unwrap(), &count_flops(&p).unwrap()).unwrap();
    println!("{} {}", red.total_flops_reduction, red.total_params_reduction);
    assert!((red.total_flops_reduction - 0.342).abs() < 0.005);
    assert!((red.total_params_reduction - 0.640).abs() < 0.01);
}
