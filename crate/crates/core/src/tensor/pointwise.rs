//! Per-pixel math for the fused Hessian-eigenvalue, vesselness and focal-loss
//! ops, with hand-derived partial derivatives.

/// Regularizer inside the eigenvalue square root and the eigenvalue ratio.
pub const EPS: f64 = 1e-12;

/// Eigenvalues of `[[a, b], [b, d]]` ordered so that `|l1| <= |l2|`.
#[inline]
pub fn eig2x2(a: f64, b: f64, d: f64) -> (f64, f64) {
    let t = 0.5 * (a + d);
    let h = 0.5 * (a - d);
    let r = (h * h + b * b + EPS * EPS).sqrt();
    if t <= 0.0 {
        (t + r, t - r)
    } else {
        (t - r, t + r)
    }
}

/// Jacobian of [`eig2x2`]: rows are `(dl/da, dl/db, dl/dd)` for `l1` then `l2`.
#[inline]
pub fn eig2x2_jacobian(a: f64, b: f64, d: f64) -> [[f64; 3]; 2] {
    let t = 0.5 * (a + d);
    let h = 0.5 * (a - d);
    let r = (h * h + b * b + EPS * EPS).sqrt();
    // dt = (1/2, 0, 1/2); dr = (h/(2r), b/r, -h/(2r))
    let dr = [0.5 * h / r, b / r, -0.5 * h / r];
    let plus = [0.5 + dr[0], dr[1], 0.5 + dr[2]];
    let minus = [0.5 - dr[0], -dr[1], 0.5 - dr[2]];
    if t <= 0.0 {
        [plus, minus]
    } else {
        [minus, plus]
    }
}

/// Dark-ridge vesselness response and its partials `(dV/dl1, dV/dl2, dV/dbeta, dV/dc)`.
#[inline]
pub fn vesselness_with_grad(l1: f64, l2: f64, beta: f64, c: f64) -> (f64, [f64; 4]) {
    if l2 <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let den = l2 + EPS;
    let rb = l1 / den;
    let s2 = l1 * l1 + l2 * l2;
    let blob = (-rb * rb / (2.0 * beta * beta)).exp();
    let e = (-s2 / (2.0 * c * c)).exp();
    let structure = 1.0 - e;
    let v = blob * structure;
    let drb = -blob * structure * rb / (beta * beta);
    let ds = blob * e / (c * c);
    let grad = [
        drb / den + ds * l1,
        -drb * rb / den + ds * l2,
        blob * structure * rb * rb / (beta * beta * beta),
        -blob * e * s2 / (c * c * c),
    ];
    (v, grad)
}

pub const FOCAL_CLAMP: f64 = 1e-7;

/// Focal term `(1-p)^gamma * (-ln p)` and its derivative in `p`, with `p`
/// clamped to `[1e-7, 1-1e-7]`.
#[inline]
pub fn focal_term(p: f64, gamma: f64) -> (f64, f64) {
    let pc = p.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let q = 1.0 - pc;
    let nl = -pc.ln();
    let mod_ = q.powf(gamma);
    let value = mod_ * nl;
    if p <= FOCAL_CLAMP || p >= 1.0 - FOCAL_CLAMP {
        return (value, 0.0);
    }
    let dmod = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
    (value, dmod * nl - mod_ / pc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eig_examples() {
        assert_eq!(eig2x2(2.0, 0.0, 1.0), (1.0, 2.0));
        let (l1, l2) = eig2x2(1.0, 2.0, 1.0);
        assert!((l1 + 1.0).abs() < 1e-12 && (l2 - 3.0).abs() < 1e-12);
        let (l1, l2) = eig2x2(0.0, 0.0, 0.0);
        assert!(l1.abs() <= 1e-12 && l2.abs() <= 1e-12);
    }

    #[test]
    fn vesselness_examples() {
        assert_eq!(vesselness_with_grad(0.3, -1.0, 0.5, 1.0).0, 0.0);
        let (v, _) = vesselness_with_grad(0.0, 2.0, 0.5, 1.0);
        assert!((v - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        assert!((v - 0.86466).abs() < 1e-5);
    }

    #[test]
    fn focal_examples() {
        let (v, _) = focal_term(0.5, 2.0);
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.17329).abs() < 1e-5);
        // gamma = 0 is plain cross-entropy
        assert!((focal_term(0.3, 0.0).0 + 0.3f64.ln()).abs() < 1e-15);
        assert!(focal_term(1.0, 2.0).0 < 1e-20);
    }

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn partials_match_finite_differences() {
        let (a, b, d) = (0.7, -0.4, 1.3);
        let j = eig2x2_jacobian(a, b, d);
        for (k, row) in j.iter().enumerate() {
            let pick = |v: (f64, f64)| if k == 0 { v.0 } else { v.1 };
            assert!((row[0] - fd(|x| pick(eig2x2(x, b, d)), a)).abs() < 1e-8);
            assert!((row[1] - fd(|x| pick(eig2x2(a, x, d)), b)).abs() < 1e-8);
            assert!((row[2] - fd(|x| pick(eig2x2(a, b, x)), d)).abs() < 1e-8);
        }
        let (l1, l2, beta, c) = (0.2, 0.9, 0.5, 0.4);
        let (_, g) = vesselness_with_grad(l1, l2, beta, c);
        let v = |l1, l2, beta, c| vesselness_with_grad(l1, l2, beta, c).0;
        assert!((g[0] - fd(|x| v(x, l2, beta, c), l1)).abs() < 1e-8);
        assert!((g[1] - fd(|x| v(l1, x, beta, c), l2)).abs() < 1e-8);
        assert!((g[2] - fd(|x| v(l1, l2, x, c), beta)).abs() < 1e-8);
        assert!((g[3] - fd(|x| v(l1, l2, beta, x), c)).abs() < 1e-8);
        let (_, dp) = focal_term(0.3, 2.0);
        assert!((dp - fd(|p| focal_term(p, 2.0).0, 0.3)).abs() < 1e-7);
    }
}
