//! Synthetic images for tests, the self-test and demos: ridge phantoms,
//! fundus-like photographs with labels and masks, and OCT-A-like en face
//! projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A straight dark (or bright, with negative depth) bar.
#[derive(Clone, Copy, Debug)]
pub struct Line {
    pub x0: f64,
    pub y0: f64,
    /// Direction in radians.
    pub angle: f64,
    pub half_width: f64,
    pub depth: f64,
}

impl Line {
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        ((x - self.x0) * s - (y - self.y0) * c).abs()
    }

    /// Anti-aliased coverage of the bar at pixel center `(x, y)`.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        (self.half_width + 0.5 - self.distance(x, y)).clamp(0.0, 1.0)
    }
}

/// Row-major `h x w` image: `background` minus the bar depths.
pub fn ridge_phantom(h: usize, w: usize, background: f64, lines: &[Line]) -> Vec<f64> {
    let mut img = vec![background; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            for l in lines {
                img[y * w + x] -= l.depth * l.coverage(fx, fy);
            }
        }
    }
    img
}

/// Vertical dark bar of the given width through the image center.
pub fn vertical_line(h: usize, w: usize, width: f64, depth: f64) -> Vec<f64> {
    let line = Line {
        x0: (w as f64 - 1.0) / 2.0,
        y0: 0.0,
        angle: std::f64::consts::FRAC_PI_2,
        half_width: width / 2.0,
        depth,
    };
    ridge_phantom(h, w, 0.4, &[line])
}

/// Random ridge phantom in roughly `(-1, 1)`: a shading ramp, two to four
/// dark bars of random width and direction, one dark blob and mild noise.
pub fn random_phantom(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4);
    let lines: Vec<Line> = (0..n)
        .map(|_| Line {
            x0: rng.random_range(0.0..w as f64),
            y0: rng.random_range(0.0..h as f64),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            half_width: rng.random_range(0.5..3.5),
            depth: rng.random_range(0.2..0.6),
        })
        .collect();
    let (gx, gy) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let (bx, by) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    let br = rng.random_range(2.0..5.0);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut img = ridge_phantom(h, w, 0.3, &lines);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
            img[y * w + x] += gx * fx + gy * fy - 0.3 * (-d2 / (2.0 * br * br)).exp()
                + noise.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(-0.99, 0.99);
    }
    img
}

/// Synthetic fundus photograph.
pub struct FundusPhantom {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub rgb: Vec<u8>,
    /// 0/255 vessel label.
    pub label: Vec<u8>,
    /// 0/255 field-of-view mask.
    pub fov: Vec<u8>,
}

/// Circular field of view with a branching tree of dark vessels on an
/// orange-red background, vessel widths between 1 and 7 pixels.
pub fn fundus_phantom(seed: u64, width: usize, height: usize) -> FundusPhantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let radius = 0.46 * width.min(height) as f64;
    // optic disc somewhere left or right of center
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (dx, dy) = (cx + side * 0.3 * radius, cy + rng.random_range(-0.1..0.1) * radius);

    let mut segments: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    let mut stack: Vec<(f64, f64, f64, f64, u32)> = (0..4)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_2 + rng.random_range(-0.4..0.4);
            (dx, dy, a, rng.random_range(2.5..3.5), 0)
        })
        .collect();
    while let Some((x, y, a, hw, depth)) = stack.pop() {
        let len = rng.random_range(0.15..0.35) * radius;
        let (x1, y1) = (x + len * a.cos(), y + len * a.sin());
        segments.push((x, y, x1, y1, hw));
        if depth < 4 && hw > 0.6 {
            for turn in [-0.5, 0.5] {
                let na = a + turn + rng.random_range(-0.3..0.3);
                stack.push((x1, y1, na, hw * rng.random_range(0.6..0.8), depth + 1));
            }
        }
    }

    let n = width * height;
    let mut rgb = vec![0u8; 3 * n];
    let mut label = vec![0u8; n];
    let mut fov = vec![0u8; n];
    let noise = Normal::new(0.0, 3.0).expect("valid sigma");
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let i = y * width + x;
            let r2 = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            if r2 > radius {
                continue;
            }
            fov[i] = 255;
            let mut coverage: f64 = 0.0;
            for &(x0, y0, x1, y1, hw) in &segments {
                let d = seg_distance(fx, fy, x0, y0, x1, y1);
                coverage = coverage.max((hw + 0.5 - d).clamp(0.0, 1.0));
            }
            if coverage >= 0.5 {
                label[i] = 255;
            }
            let shade = 1.0 - 0.35 * (r2 / radius).powi(2);
            let disc = (-((fx - dx).powi(2) + (fy - dy).powi(2)) / (2.0 * (0.08 * radius).powi(2))).exp();
            let base_g = (110.0 * shade + 80.0 * disc) * (1.0 - 0.55 * coverage);
            let base_r = (200.0 * shade + 40.0 * disc) * (1.0 - 0.25 * coverage);
            let base_b = (40.0 * shade + 30.0 * disc) * (1.0 - 0.3 * coverage);
            for (ch, base) in [base_r, base_g, base_b].into_iter().enumerate() {
                rgb[3 * i + ch] = (base + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    FundusPhantom {
        width,
        height,
        rgb,
        label,
        fov,
    }
}

fn seg_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - x0 - t * vx).powi(2) + (py - y0 - t * vy).powi(2)).sqrt()
}

/// OCT-A-like en face projection: bright capillary mesh in `[0, ~1.5]`, a few
/// large bright vessels well above 4, dark foveal zone, speckle noise.
pub fn octa_phantom(seed: u64, size: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut img = vec![0.0; size * size];
    let mut lines: Vec<(f64, f64, f64, f64, f64, f64)> = Vec::new();
    for _ in 0..size / 4 {
        let (x, y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(0.03..0.12) * s;
        lines.push((x, y, x + len * a.cos(), y + len * a.sin(), 0.8, rng.random_range(0.8..1.4)));
    }
    for _ in 0..3 {
        let (x, y) = (rng.random_range(0.0..s), 0.0);
        let a: f64 = rng.random_range(1.2..1.9);
        lines.push((x, y, x + s * a.cos(), y + s * a.sin(), 3.0, rng.random_range(4.5..7.0)));
    }
    let fovea = (s / 2.0, s / 2.0, 0.08 * s);
    let speckle = Normal::new(0.0, 0.15).expect("valid sigma");
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let mut v: f64 = 0.15;
            for &(x0, y0, x1, y1, hw, amp) in &lines {
                let d = seg_distance(fx, fy, x0, y0, x1, y1);
                if d < hw + 2.0 {
                    v = v.max(amp * (-(d * d) / (2.0 * hw * hw)).exp());
                }
            }
            let df = ((fx - fovea.0).powi(2) + (fy - fovea.1).powi(2)).sqrt();
            if df < fovea.2 {
                v *= (df / fovea.2).powi(2);
            }
            img[y * size + x] = (v + speckle.sample(&mut rng)).max(0.0);
        }
    }
    img
}

impl FundusPhantom {
    /// The phantom as a loaded DRIVE case with id `id`.
    pub fn to_raw(&self, id: u32) -> crate::fundus::RawSample {
        let bin = |v: &[u8]| v.iter().map(|&x| u8::from(x > 127)).collect();
        crate::fundus::RawSample {
            id,
            rgb: crate::raster::ByteImage {
                width: self.width,
                height: self.height,
                channels: 3,
                data: self.rgb.clone(),
            },
            label: bin(&self.label),
            fov: bin(&self.fov),
        }
    }
}

/// Writes phantom cases for `ids` in the converted DRIVE layout under `root`
/// (PNG, 565 x 584); case `id` uses phantom seed `seed + id`.
pub fn write_fake_drive(root: &std::path::Path, ids: &[u32], seed: u64) -> crate::Result<()> {
    use crate::fundus::{drive_stems, DRIVE_HEIGHT, DRIVE_WIDTH};
    use crate::raster::{write_png, ByteImage};
    for &id in ids {
        let p = fundus_phantom(seed + id as u64, DRIVE_WIDTH, DRIVE_HEIGHT);
        let [img, manual, mask] = drive_stems(id);
        let rasters = [
            (img, 3, &p.rgb),
            (manual, 1, &p.label),
            (mask, 1, &p.fov),
        ];
        for (stem, channels, data) in rasters {
            let path = root.join(format!("{stem}.png"));
            let dir = path.parent().expect("nested path");
            std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
            write_png(
                &path,
                &ByteImage {
                    width: DRIVE_WIDTH,
                    height: DRIVE_HEIGHT,
                    channels,
                    data: data.clone(),
                },
            )?;
        }
    }
    Ok(())
}
