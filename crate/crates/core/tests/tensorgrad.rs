use proptest::prelude::*;
use vesselforge::tensor::{Activation, Array, Graph, Padding};
use vesselforge::verify::{check_op, OPS};
use vesselforge::Error;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Direct sliding-window correlation with zero padding.
fn sliding_window(img: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in 0..kh as isize {
                for dx in 0..kw as isize {
                    let iy = y + dy - kh as isize / 2;
                    let ix = x + dx - kw as isize / 2;
                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                        acc += img[(iy * w as isize + ix) as usize] * k[(dy * kw as isize + dx) as usize];
                    }
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

#[test]
fn conv2d_scaling_kernel() {
    let mut g = Graph::new();
    let x = g.input(Array::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let k = g.input(arr(&[1, 1, 1, 1], &[2.0])).unwrap();
    let b = g.input(arr(&[1], &[0.0])).unwrap();
    let y = g.conv2d(x, k, Some(b), Padding::Same).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[2.0; 9]);
}

#[test]
fn conv2d_zero_kernel_gives_bias() {
    let mut g = Graph::new();
    let x = g.input(Array::from_fn(&[2, 2, 5, 4], |i| (i as f64).sin())).unwrap();
    let k = g.input(Array::zeros(&[3, 2, 3, 3])).unwrap();
    let b = g.input(arr(&[3], &[0.5, -1.0, 2.0])).unwrap();
    let y = g.conv2d(x, k, Some(b), Padding::Same).unwrap();
    let v = g.value(y).unwrap();
    assert_eq!(v.shape(), &[2, 3, 5, 4]);
    for (i, &val) in v.data().iter().enumerate() {
        let f = (i / 20) % 3;
        assert_eq!(val, [0.5, -1.0, 2.0][f]);
    }
}

#[test]
fn conv2d_matches_sliding_window() {
    let img: Vec<f64> = (0..25).map(|i| (i % 5) as f64 + 0.5 * (i / 5) as f64).collect();
    let k = [1.0 / 9.0; 9];
    let expected = sliding_window(&img, 5, 5, &k, 3, 3);
    let mut g = Graph::new();
    let x = g.input(arr(&[1, 1, 5, 5], &img)).unwrap();
    let kt = g.input(arr(&[1, 1, 3, 3], &k)).unwrap();
    let y = g.conv2d(x, kt, None, Padding::Same).unwrap();
    let got = g.value(y).unwrap().data();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv2d_reports_offending_dimension() {
    let mut g = Graph::new();
    let x = g.input(Array::zeros(&[1, 2, 5, 5])).unwrap();
    let k = g.input(Array::zeros(&[1, 3, 3, 3])).unwrap();
    let err = g.conv2d(x, k, None, Padding::Same).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
    let k = g.input(Array::zeros(&[1, 2, 2, 3])).unwrap();
    let err = g.conv2d(x, k, None, Padding::Same).unwrap_err();
    assert!(err.to_string().contains("odd"), "{err}");
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.input(arr(&[3], &[-1.0, 2.0, 0.0])).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(&g.value(r).unwrap().data()[..2], &[0.0, 2.0]);
    let s = g.activation(x, Activation::Sigmoid).unwrap();
    assert_eq!(g.value(s).unwrap().data()[2], 0.5);
    let x2 = g.input(arr(&[1], &[-2.0])).unwrap();
    let l = g.activation(x2, Activation::LeakyRelu(0.1)).unwrap();
    assert!((g.value(l).unwrap().data()[0] + 0.2).abs() < 1e-15);
}

#[test]
fn pool_and_upsample() {
    let mut g = Graph::new();
    let x = g.input(arr(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let p = g.pool_down(x).unwrap();
    assert_eq!(g.value(p).unwrap().data(), &[4.0]);

    let c = g.input(Array::full(&[1, 1, 4, 6], 0.7)).unwrap();
    let u = g.upsample(c).unwrap();
    let mut ident = vec![0.0; 9];
    ident[4] = 1.0;
    let k = g.input(arr(&[1, 1, 3, 3], &ident)).unwrap();
    let conv = g.conv2d(u, k, None, Padding::Same).unwrap();
    let back = g.pool_down(conv).unwrap();
    assert!(g.value(back).unwrap().data().iter().all(|&v| v == 0.7));

    let odd = g.input(Array::zeros(&[1, 1, 3, 4])).unwrap();
    let err = g.pool_down(odd).unwrap_err();
    assert!(err.to_string().contains("pad"), "{err}");
}

#[test]
fn pool_gradient_routes_to_argmax() {
    let mut g = Graph::new();
    let x = g.param(arr(&[1, 1, 2, 2], &[0.1, 0.9, 0.3, 0.2])).unwrap();
    let p = g.pool_down(x).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn concat_round_trip_and_gradient() {
    let mut g = Graph::new();
    let a = g.param(Array::from_fn(&[2, 1, 3, 3], |i| i as f64)).unwrap();
    let b = g.param(Array::from_fn(&[2, 2, 3, 3], |i| -(i as f64))).unwrap();
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(c).unwrap().shape(), &[2, 3, 3, 3]);
    let a2 = g.slice_channels(c, 0, 1).unwrap();
    let b2 = g.slice_channels(c, 1, 2).unwrap();
    assert_eq!(g.value(a2).unwrap(), g.value(a).unwrap());
    assert_eq!(g.value(b2).unwrap(), g.value(b).unwrap());
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let a = g.input(Array::zeros(&[1, 1, 3, 3])).unwrap();
    let b = g.input(Array::zeros(&[1, 1, 3, 4])).unwrap();
    assert!(matches!(g.concat_channels(a, b), Err(Error::Shape { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Array::from_fn(&[4], |i| i as f64)).unwrap();
    let s = g.sum(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 4]);

    let mut g = Graph::new();
    let x = g.param(Array::scalar(3.0)).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.param(Array::zeros(&[3])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));

    let mut g = Graph::new();
    let x = g.param(Array::zeros(&[3])).unwrap();
    let c = g.input(Array::zeros(&[3])).unwrap();
    let y = g.add(x, c).unwrap();
    let s = g.sum(y).unwrap();
    let mut other = Graph::new();
    let foreign = other.param(Array::zeros(&[1])).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(matches!(grads.get(foreign), Err(Error::ForeignTensor)));
    assert!(matches!(grads.get(c), Err(Error::NoGradient(_))));
    assert!(grads.get(x).is_ok());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    let x = g.input(Array::scalar(1000.0)).unwrap();
    assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    assert!(g.input(Array::scalar(f64::NAN)).is_err());
}

#[test]
fn every_op_passes_finite_differences() {
    for &op in OPS {
        for seed in 0..3 {
            let check = check_op(op, seed).unwrap();
            assert!(check.passed(), "{op} seed {seed}: {:?}", check.report);
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(Array::from_fn(&[2, 3, 8, 8], |i| ((i * 31) % 17) as f64 / 7.0)).unwrap();
        let k = g.param(Array::from_fn(&[4, 3, 3, 3], |i| ((i * 7) % 5) as f64 / 3.0 - 0.5)).unwrap();
        let y = g.conv2d(x, k, None, Padding::Same).unwrap();
        let y = g.activation(y, Activation::LeakyRelu(0.1)).unwrap();
        let s = g.sum_squares(y).unwrap();
        let out = g.value(s).unwrap().clone();
        let grads = g.backward(s).unwrap();
        (out, grads.get(x).unwrap().clone(), grads.get(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv2d_is_linear(
        xs in prop::collection::vec(-1.0f64..1.0, 2 * 36),
        ys in prop::collection::vec(-1.0f64..1.0, 2 * 36),
        ks in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let conv = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input(Array::new(vec![1, 2, 6, 6], data).unwrap()).unwrap();
            let k = g.input(Array::new(vec![3, 2, 3, 3], ks.clone()).unwrap()).unwrap();
            let y = g.conv2d(x, k, None, Padding::Same).unwrap();
            g.value(y).unwrap().clone()
        };
        let mixed: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
        let lhs = conv(mixed);
        let (cx, cy) = (conv(xs.clone()), conv(ys.clone()));
        for ((l, x), y) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * x + b * y)).abs() <= 1e-12);
        }
    }
}
