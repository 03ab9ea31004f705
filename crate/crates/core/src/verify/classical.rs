//! Classical multi-scale Frangi filter for dark ridges on plain slices.
//!
//! Separable smoothing/differentiation passes with mirror boundaries, the
//! trace/determinant eigenvalue formula and the textbook response
//! `exp(-Rb^2 / 2 beta^2) (1 - exp(-S^2 / 2 c^2))`. Nothing here goes through
//! the graph engine.

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i } else { i };
    (if j >= n { 2 * (n - 1) - j } else { j }) as usize
}

/// Gaussian, first- and second-derivative taps on `-r..=r`, with the same
/// discrete moment conditions the network kernels start from.
fn taps(sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = (3.0 * sigma).ceil() as i64;
    let mut g = Vec::new();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for i in -r..=r {
        let x = i as f64;
        let e = (-0.5 * (x / sigma).powi(2)).exp();
        g.push(e);
        d1.push(x * e);
        d2.push((x * x - sigma * sigma) * e);
    }
    let total: f64 = g.iter().sum();
    for v in &mut g {
        *v /= total;
    }
    // first derivative: unit first moment
    let m1: f64 = (-r..=r).zip(&d1).map(|(i, v)| i as f64 * v).sum();
    for v in &mut d1 {
        *v /= m1;
    }
    // second derivative: zero sum, second moment 2
    let s: f64 = d2.iter().sum();
    for (v, gv) in d2.iter_mut().zip(&g) {
        *v -= s * gv;
    }
    let m2: f64 = (-r..=r).zip(&d2).map(|(i, v)| (i * i) as f64 * v).sum();
    for v in &mut d2 {
        *v *= 2.0 / m2;
    }
    (g, d1, d2)
}

fn pass_rows(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * img[y * w + mirror(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    out
}

fn pass_cols(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * img[mirror(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Scale-normalized Hessian `(hxx, hxy, hyy)` at `sigma`.
pub fn classical_hessian(img: &[f64], h: usize, w: usize, sigma: f64) -> [Vec<f64>; 3] {
    let (g, d1, d2) = taps(sigma);
    let s2 = sigma * sigma;
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x * s2).collect::<Vec<_>>();
    let hxx = scale(pass_cols(&pass_rows(img, h, w, &d2), h, w, &g));
    let hyy = scale(pass_cols(&pass_rows(img, h, w, &g), h, w, &d2));
    let hxy = scale(pass_cols(&pass_rows(img, h, w, &d1), h, w, &d1));
    [hxx, hxy, hyy]
}

fn response(hxx: f64, hxy: f64, hyy: f64, beta: f64, c: f64) -> f64 {
    let trace = hxx + hyy;
    let det = hxx * hyy - hxy * hxy;
    let disc = (0.25 * trace * trace - det).max(0.0).sqrt();
    let (a, b) = (0.5 * trace + disc, 0.5 * trace - disc);
    let (l1, l2) = if a.abs() <= b.abs() { (a, b) } else { (b, a) };
    if l2 <= 0.0 {
        return 0.0;
    }
    let rb = l1 / l2;
    let s2 = l1 * l1 + l2 * l2;
    (-rb * rb / (2.0 * beta * beta)).exp() * (1.0 - (-s2 / (2.0 * c * c)).exp())
}

/// Single-scale dark-ridge response.
pub fn classical_vesselness(img: &[f64], h: usize, w: usize, sigma: f64, beta: f64, c: f64) -> Vec<f64> {
    let [hxx, hxy, hyy] = classical_hessian(img, h, w, sigma);
    (0..h * w)
        .map(|i| response(hxx[i], hxy[i], hyy[i], beta, c))
        .collect()
}

/// Maximum response over `sigmas`.
pub fn classical_frangi(img: &[f64], h: usize, w: usize, sigmas: &[f64], beta: f64, c: f64) -> Vec<f64> {
    let mut best = vec![0.0f64; h * w];
    for &s in sigmas {
        for (b, v) in best.iter_mut().zip(classical_vesselness(img, h, w, s, beta, c)) {
            *b = b.max(v);
        }
    }
    best
}
