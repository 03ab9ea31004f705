//! Per-op gradient suite over random small tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, random_array, weighted_sum, CheckMode, GradReport};
use crate::error::Result;
use crate::tensor::{Activation, Array, ClassWeights, FocalTarget, Graph, Padding, Tensor};

/// Per-op relative-error bound.
pub const OP_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub seed: u64,
    pub report: GradReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < OP_TOLERANCE
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Tensor]) -> Result<Tensor>>;

/// Distinct values (spacing well above the finite-difference step) in random order.
fn distinct_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Array::new(shape.to_vec(), vals).expect("shape")
}

fn case(name: &'static str, seed: u64) -> (Vec<Array>, Builder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ name.len() as u64);
    let r = &mut rng;
    match name {
        "conv2d_same" | "conv2d_valid" => {
            let pad = if name == "conv2d_same" {
                Padding::Same
            } else {
                Padding::Valid
            };
            let inputs = vec![
                random_array(r, &[2, 2, 6, 5], 1.0, 0.0),
                random_array(r, &[3, 2, 3, 3], 1.0, 0.0),
                random_array(r, &[3], 1.0, 0.0),
            ];
            let b: Builder = Box::new(move |g, t| {
                let y = g.conv2d(t[0], t[1], Some(t[2]), pad)?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "pad_reflect" => {
            let inputs = vec![random_array(r, &[1, 2, 4, 5], 1.0, 0.0)];
            let b: Builder = Box::new(move |g, t| {
                let y = g.pad_reflect(t[0], 3)?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "relu" | "leaky_relu" | "sigmoid" | "tanh" => {
            let kind = match name {
                "relu" => Activation::Relu,
                "leaky_relu" => Activation::LeakyRelu(0.1),
                "sigmoid" => Activation::Sigmoid,
                _ => Activation::Tanh,
            };
            let inputs = vec![random_array(r, &[1, 2, 4, 4], 2.0, 1e-4)];
            let b: Builder = Box::new(move |g, t| {
                let y = g.activation(t[0], kind)?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "pool_down" => {
            let inputs = vec![distinct_array(r, &[2, 2, 4, 6])];
            let b: Builder = Box::new(move |g, t| {
                let y = g.pool_down(t[0])?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "upsample" => {
            let inputs = vec![random_array(r, &[1, 2, 3, 4], 1.0, 0.0)];
            let b: Builder = Box::new(move |g, t| {
                let y = g.upsample(t[0])?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "concat_channels" => {
            let inputs = vec![
                random_array(r, &[2, 1, 3, 3], 1.0, 0.0),
                random_array(r, &[2, 2, 3, 3], 1.0, 0.0),
            ];
            let b: Builder = Box::new(move |g, t| {
                let y = g.concat_channels(t[0], t[1])?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "slice_channels" => {
            let inputs = vec![random_array(r, &[2, 3, 3, 3], 1.0, 0.0)];
            let b: Builder = Box::new(move |g, t| {
                let y = g.slice_channels(t[0], 1, 2)?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "add" | "sub" | "mul" => {
            let inputs = vec![
                random_array(r, &[1, 2, 3, 3], 1.0, 0.0),
                random_array(r, &[1, 2, 3, 3], 1.0, 0.0),
            ];
            let b: Builder = Box::new(move |g, t| {
                let y = match name {
                    "add" => g.add(t[0], t[1])?,
                    "sub" => g.sub(t[0], t[1])?,
                    _ => g.mul(t[0], t[1])?,
                };
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "scale" | "exp" => {
            let inputs = vec![random_array(r, &[1, 1, 4, 4], 1.0, 0.0)];
            let b: Builder = Box::new(move |g, t| {
                let y = if name == "scale" {
                    g.scale(t[0], -0.37)?
                } else {
                    g.exp(t[0])?
                };
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "sum" | "mean" | "sum_squares" => {
            let inputs = vec![random_array(r, &[1, 2, 3, 3], 1.0, 0.0)];
            let b: Builder = Box::new(move |g, t| match name {
                "sum" => g.sum(t[0]),
                "mean" => g.mean(t[0]),
                _ => g.sum_squares(t[0]),
            });
            (inputs, b)
        }
        "max_of" => {
            let all = distinct_array(r, &[3, 1, 1, 4, 4]);
            let parts: Vec<Array> = all
                .data()
                .chunks(16)
                .map(|c| Array::new(vec![1, 1, 4, 4], c.to_vec()).expect("shape"))
                .collect();
            let b: Builder = Box::new(move |g, t| {
                let y = g.max_of(t)?;
                weighted_sum(g, y, seed)
            });
            (parts, b)
        }
        "softmax" => {
            let inputs = vec![random_array(r, &[2, 2, 3, 3], 2.0, 0.0)];
            let b: Builder = Box::new(move |g, t| {
                let y = g.softmax_channels(t[0])?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "eig2x2" => {
            let inputs = (0..3)
                .map(|_| random_array(r, &[1, 1, 4, 4], 1.0, 0.0))
                .collect();
            let b: Builder = Box::new(move |g, t| {
                let y = g.eig2x2(t[0], t[1], t[2])?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "vesselness" => {
            let inputs = vec![
                random_array(r, &[1, 2, 4, 4], 1.0, 1e-3),
                Array::scalar(r.random_range(0.3..1.0)),
                Array::scalar(r.random_range(0.3..1.0)),
            ];
            let b: Builder = Box::new(move |g, t| {
                let y = g.vesselness(t[0], t[1], t[2])?;
                weighted_sum(g, y, seed)
            });
            (inputs, b)
        }
        "focal_loss" => {
            let shape = [2, 1, 4, 4];
            let label = Array::from_fn(&shape, |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
            let weight = Array::from_fn(&shape, |_| r.random_range(1.0..8.0));
            let mask = Array::from_fn(&shape, |_| if r.random_bool(0.8) { 1.0 } else { 0.0 });
            let weights = ClassWeights::balanced(label.data(), mask.data());
            let gamma = 2.0;
            let inputs = vec![random_array(r, &[2, 2, 4, 4], 2.0, 0.0)];
            let target = FocalTarget {
                label,
                weight,
                mask,
            };
            let b: Builder = Box::new(move |g, t| {
                let p = g.softmax_channels(t[0])?;
                g.focal_loss(p, target.clone(), gamma, weights, 32.0)
            });
            (inputs, b)
        }
        other => unreachable!("unknown op case {other}"),
    }
}

pub const OPS: &[&str] = &[
    "conv2d_same",
    "conv2d_valid",
    "pad_reflect",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "pool_down",
    "upsample",
    "concat_channels",
    "slice_channels",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "sum",
    "mean",
    "sum_squares",
    "max_of",
    "softmax",
    "eig2x2",
    "vesselness",
    "focal_loss",
];

/// Element-wise finite-difference check of one op for one seed.
pub fn check_op(op: &'static str, seed: u64) -> Result<OpCheck> {
    let (inputs, build) = case(op, seed);
    let report = grad_check(&inputs, CheckMode::Elementwise, build)?;
    Ok(OpCheck { op, seed, report })
}

/// Every op in [`OPS`] for seeds `0..seeds`.
pub fn op_gradient_suite(seeds: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(OPS.len() * seeds as usize);
    for &op in OPS {
        for seed in 0..seeds {
            out.push(check_op(op, seed)?);
        }
    }
    Ok(out)
}

/// Largest absolute difference between the network's fused vesselness at
/// classical initialization and the independent classical filter on an
/// `h x w` image.
pub fn oracle_max_diff(img: &[f64], h: usize, w: usize) -> Result<f64> {
    let params = crate::frangi::FrangiNetParams::default();
    let (beta, c) = (params.scales[0].beta(), params.scales[0].c());
    let mut g = Graph::inference(crate::tensor::Precision::Double);
    let bound = params.to_store().bind(&mut g)?;
    let x = g.input(Array::new(vec![1, 1, h, w], img.to_vec())?)?;
    let v = crate::frangi::fused_vesselness(&mut g, x, &bound)?;
    let oracle = super::classical_frangi(img, h, w, &crate::frangi::SIGMAS, beta, c);
    Ok(g.value(v)?
        .data()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
