//! Differentiable multi-scale Frangi vesselness network.
//!
//! Each scale estimates the Hessian with three trainable second-derivative
//! kernels (initialized from a Gaussian of width `sigma` and multiplied by
//! `sigma^2`), takes the closed-form eigenvalues of the 2x2 symmetric
//! Hessian, and evaluates the dark-ridge vesselness
//!
//! ```text
//! V = exp(-(l1/l2)^2 / (2 beta^2)) * (1 - exp(-(l1^2 + l2^2) / (2 c^2)))   if l2 > 0
//! ```
//!
//! with `|l1| <= |l2|`. Scales are fused by a pixelwise maximum, then a 1x1
//! convolution maps the fused response to two class scores and a channel
//! softmax yields the vessel probability in channel 1.

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Array, Graph, Padding, Tensor};

/// Fixed scale ladder in pixels.
pub const SIGMAS: [f64; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_C: f64 = 0.15;

/// Kernel radius `ceil(3 sigma)`; the side length is `2 * radius + 1`.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// One-dimensional Gaussian factors sampled on `-r..=r`: the smoothing
/// kernel `g` (sums to 1), the first derivative `d1` (`sum d1(i) i = 1`) and
/// the second derivative `d2` (`sum d2 = 0`, `sum d2(i) i^2 = 2`). The
/// moment corrections make the discrete kernels differentiate quadratics
/// exactly despite sampling and truncation.
pub fn gaussian_factors(sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = kernel_radius(sigma) as isize;
    let s2 = sigma * sigma;
    let xs: Vec<f64> = (-r..=r).map(|i| i as f64).collect();
    let mut g: Vec<f64> = xs.iter().map(|x| (-x * x / (2.0 * s2)).exp()).collect();
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);

    let mut d1: Vec<f64> = xs.iter().zip(&g).map(|(x, gv)| x / s2 * gv).collect();
    let m1: f64 = d1.iter().zip(&xs).map(|(d, x)| d * x).sum();
    d1.iter_mut().for_each(|v| *v /= m1);

    let mut d2: Vec<f64> = xs
        .iter()
        .zip(&g)
        .map(|(x, gv)| (x * x / (s2 * s2) - 1.0 / s2) * gv)
        .collect();
    // remove the mean along g, then fix the second moment
    let mean: f64 = d2.iter().sum();
    d2.iter_mut().zip(&g).for_each(|(v, gv)| *v -= mean * gv);
    let m2: f64 = d2.iter().zip(&xs).map(|(d, x)| d * x * x).sum();
    d2.iter_mut().for_each(|v| *v *= 2.0 / m2);
    (g, d1, d2)
}

/// Scale-normalized Hessian kernels `(kxx, kxy, kyy)`, each `[1, 1, k, k]`,
/// laid out as `[row = y][col = x]`.
pub fn hessian_kernels(sigma: f64) -> [Array; 3] {
    let (g, d1, d2) = gaussian_factors(sigma);
    let k = g.len();
    let s2 = sigma * sigma;
    let outer = |row: &[f64], col: &[f64]| {
        Array::from_fn(&[1, 1, k, k], |i| s2 * (row[i / k] * col[i % k]))
    };
    [outer(&g, &d2), outer(&d1, &d1), outer(&d2, &g)]
}

/// Parameters of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams {
    pub sigma: f64,
    /// `ln(beta)`; keeps beta strictly positive.
    pub log_beta: f64,
    /// `ln(c)`.
    pub log_c: f64,
    pub kxx: Array,
    pub kxy: Array,
    pub kyy: Array,
}

impl ScaleParams {
    pub fn classical(sigma: f64, beta: f64, c: f64) -> Self {
        let [kxx, kxy, kyy] = hessian_kernels(sigma);
        Self {
            sigma,
            log_beta: beta.ln(),
            log_c: c.ln(),
            kxx,
            kxy,
            kyy,
        }
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn c(&self) -> f64 {
        self.log_c.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrangiNetParams {
    pub scales: Vec<ScaleParams>,
    /// `[2, 1, 1, 1]`.
    pub head_weight: Array,
    /// `[2]`.
    pub head_bias: Array,
}

impl Default for FrangiNetParams {
    fn default() -> Self {
        Self::classical(DEFAULT_BETA, DEFAULT_C)
    }
}

impl FrangiNetParams {
    /// All eight scales at the sampled Gaussian initialization. The head maps
    /// fused vesselness `v` to the logit difference `10 v - 5`.
    pub fn classical(beta: f64, c: f64) -> Self {
        Self {
            scales: SIGMAS
                .iter()
                .map(|&s| ScaleParams::classical(s, beta, c))
                .collect(),
            head_weight: Array::new(vec![2, 1, 1, 1], vec![-5.0, 5.0]).expect("shape"),
            head_bias: Array::new(vec![2], vec![2.5, -2.5]).expect("shape"),
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (i, s) in self.scales.iter().enumerate() {
            store.insert(format!("s{i}.kxx"), s.kxx.clone());
            store.insert(format!("s{i}.kxy"), s.kxy.clone());
            store.insert(format!("s{i}.kyy"), s.kyy.clone());
            store.insert(format!("s{i}.log_beta"), Array::scalar(s.log_beta));
            store.insert(format!("s{i}.log_c"), Array::scalar(s.log_c));
        }
        store.insert("head.weight", self.head_weight.clone());
        store.insert("head.bias", self.head_bias.clone());
        store
    }

    /// Rebuilds parameters from a store laid out like [`Self::to_store`].
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        store.check_layout(&Self::default().to_store())?;
        let scalar = |name: String| -> Result<f64> { Ok(store.require(&name)?.data()[0]) };
        let scales = SIGMAS
            .iter()
            .enumerate()
            .map(|(i, &sigma)| {
                Ok(ScaleParams {
                    sigma,
                    log_beta: scalar(format!("s{i}.log_beta"))?,
                    log_c: scalar(format!("s{i}.log_c"))?,
                    kxx: store.require(&format!("s{i}.kxx"))?.clone(),
                    kxy: store.require(&format!("s{i}.kxy"))?.clone(),
                    kyy: store.require(&format!("s{i}.kyy"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scales,
            head_weight: store.require("head.weight")?.clone(),
            head_bias: store.require("head.bias")?.clone(),
        })
    }
}

/// Hessian components of `image` (`[N, 1, H, W]`) at scale `i`, using mirror
/// padding so constant regions respond with exactly zero.
pub fn hessian_at_scale(
    g: &mut Graph,
    image: Tensor,
    params: &Bound,
    i: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let kxx = params.get(&format!("s{i}.kxx"))?;
    let (_, _, k, _) = g.value(kxx)?.dims4("hessian")?;
    let padded = g.pad_reflect(image, k / 2)?;
    let hxx = g.conv2d(padded, kxx, None, Padding::Valid)?;
    let hxy = g.conv2d(padded, params.get(&format!("s{i}.kxy"))?, None, Padding::Valid)?;
    let hyy = g.conv2d(padded, params.get(&format!("s{i}.kyy"))?, None, Padding::Valid)?;
    Ok((hxx, hxy, hyy))
}

/// Vesselness response of every scale, in [`SIGMAS`] order.
pub fn scale_responses(g: &mut Graph, image: Tensor, params: &Bound) -> Result<Vec<Tensor>> {
    (0..SIGMAS.len())
        .map(|i| {
            let (hxx, hxy, hyy) = hessian_at_scale(g, image, params, i)?;
            let lambdas = g.eig2x2(hxx, hxy, hyy)?;
            let beta = g.exp(params.get(&format!("s{i}.log_beta"))?)?;
            let c = g.exp(params.get(&format!("s{i}.log_c"))?)?;
            g.vesselness(lambdas, beta, c)
        })
        .collect()
}

/// Pixelwise maximum of the per-scale responses, before the head.
pub fn fused_vesselness(g: &mut Graph, image: Tensor, params: &Bound) -> Result<Tensor> {
    let per_scale = scale_responses(g, image, params)?;
    g.max_of(&per_scale)
}

/// Two-class probability map `[N, 2, H, W]`; channel 1 is the vessel class.
pub fn frangi_forward(g: &mut Graph, image: Tensor, params: &Bound) -> Result<Tensor> {
    let fused = fused_vesselness(g, image, params)?;
    let logits = g.conv2d(
        fused,
        params.get("head.weight")?,
        Some(params.get("head.bias")?),
        Padding::Same,
    )?;
    g.softmax_channels(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sizes_are_odd_and_follow_sigma() {
        for &s in &SIGMAS {
            let [kxx, _, _] = hessian_kernels(s);
            let side = kxx.shape()[2];
            assert_eq!(side, 2 * (3.0 * s).ceil() as usize + 1);
            assert_eq!(side % 2, 1);
        }
        assert_eq!(hessian_kernels(4.0)[0].shape(), &[1, 1, 25, 25]);
    }

    #[test]
    fn factor_moments() {
        for &s in &SIGMAS {
            let (g, d1, d2) = gaussian_factors(s);
            let r = kernel_radius(s) as f64;
            let xs: Vec<f64> = (0..g.len()).map(|i| i as f64 - r).collect();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(d1.iter().sum::<f64>().abs() < 1e-14);
            assert!((d1.iter().zip(&xs).map(|(d, x)| d * x).sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(d2.iter().sum::<f64>().abs() < 1e-14);
            assert!((d2.iter().zip(&xs).map(|(d, x)| d * x * x).sum::<f64>() - 2.0).abs() < 1e-13);
        }
    }

    #[test]
    fn kxx_and_kyy_are_transposes() {
        let [kxx, kxy, kyy] = hessian_kernels(1.5);
        let k = kxx.shape()[2];
        for y in 0..k {
            for x in 0..k {
                assert_eq!(kxx.data()[y * k + x], kyy.data()[x * k + y]);
                assert_eq!(kxy.data()[y * k + x], kxy.data()[x * k + y]);
            }
        }
    }

    #[test]
    fn store_round_trip() {
        let p = FrangiNetParams::classical(0.7, 0.2);
        let back = FrangiNetParams::from_store(&p.to_store()).unwrap();
        assert_eq!(p, back);
        assert!((back.scales[3].beta() - 0.7).abs() < 1e-15);
    }
}
