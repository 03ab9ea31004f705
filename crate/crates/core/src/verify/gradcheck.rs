//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Array, Graph, Precision, Tensor};

/// Step used by every central difference.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub enum CheckMode {
    /// Perturb every element of every input.
    Elementwise,
    /// Perturb each input along one random unit direction.
    Directional { seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1)` over all probes.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub probes: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn eval<F>(inputs: &[Array], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    let mut g = Graph::inference(Precision::Double);
    let ts = inputs
        .iter()
        .map(|a| g.input(a.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &ts)?;
    Ok(g.value(loss)?.data()[0])
}

/// Compares the reverse-mode gradient of the scalar built by `build` against
/// central differences with step [`FD_STEP`].
pub fn grad_check<F>(inputs: &[Array], mode: CheckMode, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let ts = inputs
        .iter()
        .map(|a| g.param(a.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &ts)?;
    let grads = g.backward(loss)?;
    let analytic = ts
        .iter()
        .map(|&t| grads.get(t).cloned())
        .collect::<Result<Vec<_>>>()?;

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    let record = |report: &mut GradReport, idx: usize, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.probes += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst_input = idx;
        }
    };
    match mode {
        CheckMode::Elementwise => {
            for idx in 0..inputs.len() {
                for j in 0..inputs[idx].len() {
                    let x0 = inputs[idx].data()[j];
                    work[idx].data_mut()[j] = x0 + FD_STEP;
                    let fp = eval(&work, &build)?;
                    work[idx].data_mut()[j] = x0 - FD_STEP;
                    let fm = eval(&work, &build)?;
                    work[idx].data_mut()[j] = x0;
                    let numeric = (fp - fm) / (2.0 * FD_STEP);
                    record(&mut report, idx, analytic[idx].data()[j], numeric);
                }
            }
        }
        CheckMode::Directional { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for idx in 0..inputs.len() {
                let mut dir: Vec<f64> = (0..inputs[idx].len())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
                dir.iter_mut().for_each(|d| *d /= norm);
                let shifted = |sign: f64| {
                    let mut a = inputs[idx].clone();
                    for (v, d) in a.data_mut().iter_mut().zip(&dir) {
                        *v += sign * FD_STEP * d;
                    }
                    a
                };
                work[idx] = shifted(1.0);
                let fp = eval(&work, &build)?;
                work[idx] = shifted(-1.0);
                let fm = eval(&work, &build)?;
                work[idx] = inputs[idx].clone();
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                let a: f64 = analytic[idx].data().iter().zip(&dir).map(|(g, d)| g * d).sum();
                record(&mut report, idx, a, numeric);
            }
        }
    }
    Ok(report)
}

/// Random array with entries in `[-scale, scale]` kept at least `margin` away from zero.
pub fn random_array(rng: &mut impl Rng, shape: &[usize], scale: f64, margin: f64) -> Array {
    Array::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-scale..scale);
        if v.abs() >= margin {
            break v;
        }
    })
}

/// Reduces a tensor to a scalar through fixed random weights, so every output
/// element contributes a distinct amount.
pub fn weighted_sum(g: &mut Graph, t: Tensor, seed: u64) -> Result<Tensor> {
    let shape = g.value(t)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.input(random_array(&mut rng, &shape, 1.0, 0.0))?;
    let p = g.mul(t, w)?;
    g.sum(p)
}
