mod common;

use common::*;
use lightseg::models::LayerKind;
use lightseg::profiler::{layer_cio, layer_macs};
use lightseg::tensor::naive::{conv2d_counted, transpose_conv2x2_counted};
use lightseg::tensor::{conv2d, global_avg_pool, maxpool2x2, transpose_conv2x2, ConvParams};
use lightseg::{Shape, Tensor};
use rand::Rng;

const CASES: usize = 25;

struct ConvCase {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    bias: bool,
}

fn conv_case(r: &mut rand_chacha::ChaCha8Rng) -> ConvCase {
    let k = [1, 3, 5][r.random_range(0..3)];
    let groups = [1, 1, 2, 4][r.random_range(0..4)];
    let depthwise = r.random_bool(0.25);
    let (cin, cout, groups) = if depthwise {
        let c = r.random_range(1..=6);
        (c, c, c)
    } else {
        (groups * r.random_range(1..=3), groups * r.random_range(1..=3), groups)
    };
    ConvCase {
        n: r.random_range(1..=2),
        cin,
        cout,
        h: r.random_range(k..=8),
        w: r.random_range(k..=8),
        k,
        stride: r.random_range(1..=2),
        pad: r.random_range(0..=k / 2),
        groups,
        bias: r.random_bool(0.5),
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng(1);
    for _ in 0..CASES {
        let c = conv_case(&mut r);
        let x = random_vec(&mut r, c.n * c.cin * c.h * c.w);
        let wt = random_vec(&mut r, c.cout * (c.cin / c.groups) * c.k * c.k);
        let b = random_vec(&mut r, c.cout);
        let bias = c.bias.then_some(&b[..]);
        let (want, (_, _, oh, ow), _) =
            conv2d_oracle(&x, (c.n, c.cin, c.h, c.w), &wt, c.cout, c.k, c.stride, c.pad, c.groups, bias);

        let p = ConvParams::new(c.k, c.stride, c.pad, c.groups);
        let xt = Tensor::from_vec(Shape::new(c.n, c.cin, c.h, c.w), x.iter().map(|&v| v as f32).collect()).unwrap();
        let wtt = Tensor::from_vec(
            Shape::new(c.cout, c.cin / c.groups, c.k, c.k),
            wt.iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let got = conv2d(&xt, &wtt, c.bias.then_some(&bf[..]), p).unwrap();
        assert_eq!(got.shape(), Shape::new(c.n, c.cout, oh, ow));
        let got: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
        let err = max_abs_diff(&got, &want);
        assert!(err < 1e-5, "k={} s={} p={} g={}: {err}", c.k, c.stride, c.pad, c.groups);
    }
}

#[test]
fn transpose_conv_matches_gather_loops() {
    let mut r = rng(2);
    for _ in 0..CASES {
        let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=5), r.random_range(1..=5));
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let x = random_vec(&mut r, n * cin * h * w);
        let wt = random_vec(&mut r, cin * cout * 4);
        let b = random_vec(&mut r, cout);
        let (want, _) = tconv_oracle(&x, (n, cin, h, w), &wt, cout, Some(&b));
        let xt = Tensor::<f64>::from_vec(Shape::new(n, cin, h, w), x).unwrap();
        let wtt = Tensor::from_vec(Shape::new(cin, cout, 2, 2), wt).unwrap();
        let got = transpose_conv2x2(&xt, &wtt, Some(&b)).unwrap();
        assert_eq!(got.shape(), Shape::new(n, cout, 2 * h, 2 * w));
        assert!(max_abs_diff(got.data(), &want) < 1e-5);
    }
}

#[test]
fn pooling_matches_direct_loops() {
    let mut r = rng(3);
    for _ in 0..CASES {
        let (n, c) = (r.random_range(1..=3), r.random_range(1..=4));
        let (h, w) = (2 * r.random_range(1..=5), 2 * r.random_range(1..=5));
        let x = random_vec(&mut r, n * c * h * w);
        let t = Tensor::<f64>::from_vec(Shape::new(n, c, h, w), x.clone()).unwrap();
        let mp = maxpool2x2(&t).unwrap();
        assert!(max_abs_diff(mp.output.data(), &maxpool_oracle(&x, (n, c, h, w))) < 1e-5);
        let g = global_avg_pool(&t).unwrap();
        assert_eq!(g.shape(), Shape::new(n, c, 1, 1));
        assert!(max_abs_diff(g.data(), &gap_oracle(&x, (n, c, h, w))) < 1e-5);
    }
}

#[test]
fn profiler_macs_equal_executed_iterations() {
    let mut r = rng(4);
    for _ in 0..CASES {
        let c = conv_case(&mut r);
        let x = random_vec(&mut r, c.cin * c.h * c.w);
        let wt = random_vec(&mut r, c.cout * (c.cin / c.groups) * c.k * c.k);
        let (_, _, executed) = conv2d_oracle(&x, (1, c.cin, c.h, c.w), &wt, c.cout, c.k, c.stride, c.pad, c.groups, None);
        let p = ConvParams::new(c.k, c.stride, c.pad, c.groups);
        let kind = LayerKind::Conv2d {
            in_channels: c.cin,
            out_channels: c.cout,
            params: p,
            bias: c.bias,
        };
        let input = Shape::new(1, c.cin, c.h, c.w);
        assert_eq!(layer_macs(&kind, input).unwrap(), executed);

        // The library's own counting kernels agree with the oracle loops.
        let xt = Tensor::<f64>::from_vec(input, x).unwrap();
        let wtt = Tensor::from_vec(Shape::new(c.cout, c.cin / c.groups, c.k, c.k), wt).unwrap();
        assert_eq!(conv2d_counted(&xt, &wtt, None, p).unwrap().macs, executed);

        let (oh, ow) = ((c.h + 2 * c.pad - c.k) / c.stride + 1, (c.w + 2 * c.pad - c.k) / c.stride + 1);
        assert_eq!(
            layer_cio(&kind, input).unwrap(),
            (c.cin * c.h * c.w + c.cout * oh * ow) as u64
        );
    }
    for _ in 0..CASES {
        let (cin, cout) = (r.random_range(1..=6), r.random_range(1..=6));
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let x = random_vec(&mut r, cin * h * w);
        let wt = random_vec(&mut r, cin * cout * 4);
        let (_, executed) = tconv_oracle(&x, (1, cin, h, w), &wt, cout, None);
        let kind = LayerKind::TransposeConv2x2 {
            in_channels: cin,
            out_channels: cout,
            bias: true,
        };
        assert_eq!(layer_macs(&kind, Shape::new(1, cin, h, w)).unwrap(), executed);
        let xt = Tensor::<f64>::from_vec(Shape::new(1, cin, h, w), x).unwrap();
        let wtt = Tensor::from_vec(Shape::new(cin, cout, 2, 2), wt).unwrap();
        assert_eq!(transpose_conv2x2_counted(&xt, &wtt, None).unwrap().macs, executed);
    }
}

#[test]
fn non_convolution_layers_cost_nothing() {
    let x = Shape::new(1, 8, 8, 8);
    for kind in [LayerKind::BatchNorm { channels: 8 }, LayerKind::MaxPool2x2, LayerKind::GlobalAvgPool] {
        assert_eq!(layer_macs(&kind, x).unwrap(), 0);
        assert_eq!(layer_cio(&kind, x).unwrap(), 0);
    }
}
