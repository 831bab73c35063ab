mod common;

use std::time::Instant;

use common::*;
use proptest::prelude::*;
use prunekit::graph::{build_vgg16_cifar, count_flops, infer_shapes, Layer, LayerOp, ModelGraph};
use prunekit::ops::{ConvGeometry, LayerParams};
use prunekit::Tensor4;

#[test]
fn vgg16_matches_the_reference_table() {
    let t = Instant::now();
    let report = count_flops(&infer_shapes(&build_vgg16_cifar(0)).unwrap()).unwrap();
    assert_eq!(report.rows.len(), VGG16_TABLE.len());
    for (row, &(id, flops, params)) in report.rows.iter().zip(&VGG16_TABLE) {
        assert_eq!(row.layer, id);
        assert!(same_to_two_sig(row.flops as f64, flops), "{id}: {} flops", row.flops);
        assert!(same_to_two_sig(row.params as f64, params), "{id}: {} params", row.params);
    }
    assert!(same_to_two_sig(report.total_flops as f64, VGG16_TOTAL.0));
    assert!(same_to_two_sig(report.total_params as f64, VGG16_TOTAL.1));
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn m_of_n_filters_remove_m_over_n_of_both_layers() {
    for n in 2..=16usize {
        m_of_n_case(n);
    }
}

/// Counts multiply-accumulates by walking every output position and kernel
/// tap, padding included.
fn brute_conv_macs(c_in: usize, c_out: usize, h: usize, w: usize, g: ConvGeometry) -> (u64, usize, usize) {
    let positions = |len: usize| (0..).take_while(|&i| i * g.stride + g.kernel <= len + 2 * g.pad).count();
    let (oh, ow) = (positions(h), positions(w));
    let mut macs = 0u64;
    for _o in 0..c_out {
        for _y in 0..oh {
            for _x in 0..ow {
                for _c in 0..c_in {
                    for _ky in 0..g.kernel {
                        for _kx in 0..g.kernel {
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    (macs, oh, ow)
}

proptest! {
    #[test]
    fn conv_flops_match_a_brute_force_count(
        c_in in 1usize..5, c_out in 1usize..6, size in 3usize..12,
        kernel in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(size + 2 * pad >= kernel);
        let geo = ConvGeometry::new(kernel, stride, pad);
        let mut g = ModelGraph::new("one-conv", [c_in, size, size], c_out);
        g.push_layer(constant_conv("conv_1", c_in, c_out, geo));
        g.push_layer(Layer::new("avgpool", 0, LayerOp::AvgPool));
        g.push_layer(Layer::new(
            "linear",
            0,
            LayerOp::Linear { params: LayerParams::new(Tensor4::filled([c_out, c_out, 1, 1], 0.1), vec![0.0; c_out]).unwrap() },
        ));
        let g = infer_shapes(&g).unwrap();
        let rows = count_flops(&g).unwrap().rows;
        let (macs, oh, ow) = brute_conv_macs(c_in, c_out, size, size, geo);
        prop_assert_eq!(rows[0].out_spatial, (oh, ow));
        prop_assert_eq!(rows[0].flops, macs);
        prop_assert_eq!(rows[0].params, (c_out * c_in * kernel * kernel) as u64);
        prop_assert_eq!(rows[1].flops, (c_out * c_out) as u64);
    }
}
