use vesselforge::params::Bound;
use vesselforge::phantom;
use vesselforge::raster::Image2D;
use vesselforge::tensor::{Array, Graph, Precision};
use vesselforge::unet::{self, UNetParams, LAYERS, PARAM_COUNT};
use vesselforge::verify::{grad_check, weighted_sum, CheckMode};

fn forward(params: &UNetParams, h: usize, w: usize, data: Vec<f64>) -> vesselforge::Result<Array> {
    let mut g = Graph::inference(Precision::Double);
    let bound = params.store().bind(&mut g)?;
    let x = g.input(Array::new(vec![1, 1, h, w], data)?)?;
    let y = unet::unet_forward(&mut g, x, &bound)?;
    Ok(g.value(y)?.clone())
}

#[test]
fn parameter_count_is_pinned() {
    assert_eq!(UNetParams::he_uniform(0).count(), PARAM_COUNT);
    assert_eq!(PARAM_COUNT, 129_553);
    assert_eq!(LAYERS[0].2, 16);
    assert_eq!(LAYERS.iter().map(|l| l.2).max(), Some(64));
}

#[test]
fn zero_output_layer_gives_zero() {
    let p = UNetParams::he_uniform(3).with_zero_output();
    let out = forward(&p, 16, 20, phantom::random_phantom(1, 16, 20)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_shape_matches_input() {
    let p = UNetParams::he_uniform(1);
    for side in [168, 500] {
        let out = forward(&p, side, side, vec![0.1; side * side]).unwrap();
        assert_eq!(out.shape(), &[1, 1, side, side]);
    }
}

#[test]
fn output_strictly_inside_unit_interval() {
    let p = UNetParams::he_uniform(5);
    let data: Vec<f64> = phantom::random_phantom(2, 32, 32).iter().map(|v| 40.0 * v).collect();
    let out = forward(&p, 32, 32, data).unwrap();
    assert!(out.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn indivisible_size_names_the_padding() {
    let p = UNetParams::he_uniform(0);
    let err = forward(&p, 10, 13, vec![0.0; 130]).unwrap_err().to_string();
    assert!(err.contains("multiples of 4"), "{err}");
    assert!(err.contains("pad by 2 rows and 3 columns"), "{err}");
}

#[test]
fn identity_configuration_passes_positive_images() {
    let p = UNetParams::identity();
    let data: Vec<f64> = (0..24 * 28).map(|i| 0.05 + (i % 17) as f64 * 0.05).collect();
    let out = forward(&p, 24, 28, data.clone()).unwrap();
    for (o, x) in out.data().iter().zip(&data) {
        assert!((o - x.tanh()).abs() < 1e-15);
    }
}

#[test]
fn pad_and_forward_drive_size() {
    let (w, h) = (565, 584);
    assert_eq!(unet::padding_for(h, w), (0, 3));
    let img = Image2D::filled(w, h, 0.3);
    let out = unet::pad_and_forward(&img, &UNetParams::identity(), Precision::Double).unwrap();
    assert_eq!((out.width, out.height), (w, h));
    assert!(out.data.iter().all(|&v| (v - 0.3f64.tanh()).abs() < 1e-15));
}

#[test]
fn pad_and_forward_crops_exactly() {
    let (w, h) = (21, 14);
    let data: Vec<f64> = (0..w * h).map(|i| 0.01 * (i % 31) as f64 + 0.02).collect();
    let img = Image2D::new(w, h, data.clone()).unwrap();
    let out = unet::pad_and_forward(&img, &UNetParams::identity(), Precision::Double).unwrap();
    assert_eq!((out.width, out.height), (w, h));
    for (o, x) in out.data.iter().zip(&data) {
        assert!((o - x.tanh()).abs() < 1e-15);
    }
}

#[test]
fn single_precision_inference_is_close() {
    let p = UNetParams::he_uniform(9);
    let img = Image2D::new(20, 20, phantom::random_phantom(4, 20, 20)).unwrap();
    let a = unet::pad_and_forward(&img, &p, Precision::Double).unwrap();
    let b = unet::pad_and_forward(&img, &p, Precision::Single).unwrap();
    let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "{diff}");
    assert!(diff > 0.0);
}

#[test]
fn store_round_trip_and_mismatch() {
    let p = UNetParams::he_uniform(2);
    assert_eq!(UNetParams::from_store(p.store().clone()).unwrap(), p);
    let mut bad = p.store().clone();
    bad.insert("dec1.conv2.weight", Array::zeros(&[8, 16, 3, 3]));
    let err = UNetParams::from_store(bad).unwrap_err().to_string();
    assert!(err.contains("dec1.conv2.weight"), "{err}");
    assert!(err.contains("[8, 16, 3, 3]"), "{err}");
}

#[test]
fn gradients_match_finite_differences() {
    let p = UNetParams::he_uniform(11);
    let names: Vec<String> = p.store().iter().map(|(n, _)| n.to_string()).collect();
    for seed in 0..3u64 {
        let mut inputs: Vec<Array> = p.store().iter().map(|(_, a)| a.clone()).collect();
        // non-zero biases so every bias gradient path is exercised
        for (n, a) in names.iter().zip(inputs.iter_mut()) {
            if n.ends_with(".bias") {
                let k = a.len();
                *a = Array::from_fn(&[k], |i| 0.05 * ((i as f64 + seed as f64) * 0.7).sin());
            }
        }
        inputs.push(Array::new(vec![1, 1, 8, 8], phantom::random_phantom(seed, 8, 8)).unwrap());
        let report = grad_check(&inputs, CheckMode::Directional { seed }, |g, ts| {
            let (params, img) = ts.split_at(ts.len() - 1);
            let bound = Bound::from_pairs(names.iter().cloned().zip(params.iter().copied()));
            let y = unet::unet_forward(g, img[0], &bound)?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "seed {seed}: {report:?}");
    }
}
