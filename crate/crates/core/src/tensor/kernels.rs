//! Raw array routines behind the graph ops. Each output plane is produced by a
//! fixed summation order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

use super::Array;

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Range of output columns `x` for which `x + kx - pw` lands inside `[0, w)`.
#[inline]
fn col_range(kx: usize, pw: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pw.saturating_sub(kx);
    let hi = (w + pw).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(
    input: &Array,
    kernel: &Array,
    bias: Option<&Array>,
    g: &ConvGeom,
) -> Array {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.f * plane];
    let x = input.data();
    let k = kernel.data();
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (n, f) = (idx / g.f, idx % g.f);
        if let Some(b) = bias {
            o.fill(b.data()[f]);
        }
        for c in 0..g.c {
            let xin = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = col_range(kx, g.pw, g.w, g.ow);
                    for y in 0..g.oh {
                        let iy = y + ky;
                        if iy < g.ph || iy - g.ph >= g.h {
                            continue;
                        }
                        let row = &xin[(iy - g.ph) * g.w..][..g.w];
                        let orow = &mut o[y * g.ow..][..g.ow];
                        for xo in x0..x1 {
                            orow[xo] += wv * row[xo + kx - g.pw];
                        }
                    }
                }
            }
        }
    });
    Array::new(vec![g.n, g.f, g.oh, g.ow], out).expect("conv output shape")
}

pub(crate) fn conv2d_grad_input(gout: &Array, kernel: &Array, g: &ConvGeom) -> Array {
    let plane = g.h * g.w;
    let mut gin = vec![0.0; g.n * g.c * plane];
    let go = gout.data();
    let k = kernel.data();
    gin.par_chunks_mut(plane).enumerate().for_each(|(idx, gi)| {
        let (n, c) = (idx / g.c, idx % g.c);
        for f in 0..g.f {
            let gplane = &go[(n * g.f + f) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = col_range(kx, g.pw, g.w, g.ow);
                    for y in 0..g.oh {
                        let iy = y + ky;
                        if iy < g.ph || iy - g.ph >= g.h {
                            continue;
                        }
                        let grow = &gplane[y * g.ow..][..g.ow];
                        let irow = &mut gi[(iy - g.ph) * g.w..][..g.w];
                        for xo in x0..x1 {
                            irow[xo + kx - g.pw] += wv * grow[xo];
                        }
                    }
                }
            }
        }
    });
    Array::new(vec![g.n, g.c, g.h, g.w], gin).expect("conv grad shape")
}

pub(crate) fn conv2d_grad_kernel(gout: &Array, input: &Array, g: &ConvGeom) -> Array {
    let ksize = g.kh * g.kw;
    let mut gk = vec![0.0; g.f * g.c * ksize];
    let go = gout.data();
    let x = input.data();
    gk.par_chunks_mut(ksize).enumerate().for_each(|(idx, kslot)| {
        let (f, c) = (idx / g.c, idx % g.c);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (x0, x1) = col_range(kx, g.pw, g.w, g.ow);
                let mut acc = 0.0;
                for n in 0..g.n {
                    let gplane = &go[(n * g.f + f) * g.oh * g.ow..][..g.oh * g.ow];
                    let xin = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for y in 0..g.oh {
                        let iy = y + ky;
                        if iy < g.ph || iy - g.ph >= g.h {
                            continue;
                        }
                        let grow = &gplane[y * g.ow..][..g.ow];
                        let row = &xin[(iy - g.ph) * g.w..][..g.w];
                        for xo in x0..x1 {
                            acc += grow[xo] * row[xo + kx - g.pw];
                        }
                    }
                }
                kslot[ky * g.kw + kx] = acc;
            }
        }
    });
    Array::new(vec![g.f, g.c, g.kh, g.kw], gk).expect("kernel grad shape")
}

pub(crate) fn conv2d_grad_bias(gout: &Array, g: &ConvGeom) -> Array {
    let plane = g.oh * g.ow;
    let go = gout.data();
    let data = (0..g.f)
        .map(|f| {
            (0..g.n)
                .map(|n| go[(n * g.f + f) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect();
    Array::new(vec![g.f], data).expect("bias grad shape")
}

/// Mirror index without edge repetition (`dcb|abcd|cba`). Requires `pad < len`.
#[inline]
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}
