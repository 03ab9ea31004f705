//! DRIVE ingestion and preparation: green channel, CLAHE, standardization,
//! diameter-based weight maps, patch sampling and augmentation.
//!
//! The loader reads a converted copy of DRIVE in which every original
//! TIFF/GIF file has been re-encoded as PNG under the same relative path
//! (see [`convert_drive`]):
//!
//! ```text
//! <root>/training/images/21_training.png      ids 21..=40
//! <root>/training/1st_manual/21_manual1.png
//! <root>/training/mask/21_training_mask.png
//! <root>/test/images/01_test.png              ids 1..=20
//! <root>/test/1st_manual/01_manual1.png
//! <root>/test/mask/01_test_mask.png
//! ```
//!
//! PGM/PPM files with the same stem are accepted in place of PNG.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{self, ByteImage, Image2D, Modality};

pub const DRIVE_WIDTH: usize = 565;
pub const DRIVE_HEIGHT: usize = 584;
pub const PATCH_SIZE: usize = 168;
pub const BATCH_SIZE: usize = 50;
pub const CLAHE_TILES: usize = 8;
pub const CLAHE_CLIP: f64 = 2.0;
pub const STANDARDIZE_MARGIN: f64 = 1e-3;
pub const MAX_WEIGHT: f64 = 8.0;

/// Fixed train / validation / test partition of the 40 DRIVE ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: (21..=36).collect(),
            val: (37..=40).collect(),
            test: (1..=20).collect(),
        }
    }
}

impl SplitSpec {
    pub fn all(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.test.iter().chain(&self.train).chain(&self.val).copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// Relative paths (without extension) of image, manual label and FOV mask.
pub fn drive_stems(id: u32) -> [String; 3] {
    if id >= 21 {
        [
            format!("training/images/{id}_training"),
            format!("training/1st_manual/{id}_manual1"),
            format!("training/mask/{id}_training_mask"),
        ]
    } else {
        [
            format!("test/images/{id:02}_test"),
            format!("test/1st_manual/{id:02}_manual1"),
            format!("test/mask/{id:02}_test_mask"),
        ]
    }
}

/// One DRIVE case as stored on disk.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub id: u32,
    pub rgb: ByteImage,
    /// 0/1 vessel label.
    pub label: Vec<u8>,
    /// 0/1 field of view.
    pub fov: Vec<u8>,
}

/// A prepared case: standardized image in `(-1, 1)` plus label, FOV and
/// per-pixel loss weight, all `width x height`.
#[derive(Clone, Debug)]
pub struct FundusSample {
    pub id: u32,
    pub image: Image2D,
    pub label: Vec<u8>,
    pub fov: Vec<u8>,
    pub weight: Vec<f64>,
}

impl FundusSample {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

fn find_file(root: &Path, stem: &str, exts: &[&str]) -> Result<PathBuf> {
    for ext in exts {
        let p = root.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    let expected = root.join(format!("{stem}.{}", exts[0]));
    let hint = if root.join(format!("{stem}.tif")).is_file() || root.join(format!("{stem}.gif")).is_file() {
        " (found the original TIFF/GIF; run `vesselforge convert-drive` first)"
    } else {
        ""
    };
    Err(Error::Data(format!("missing file {}{hint}", expected.display())))
}

fn binary(img: &ByteImage) -> Vec<u8> {
    img.data
        .chunks(img.channels)
        .map(|px| u8::from(px[0] > 127))
        .collect()
}

/// Loads one converted DRIVE case and checks its dimensions.
pub fn load_case(root: &Path, id: u32) -> Result<RawSample> {
    let [img, manual, mask] = drive_stems(id);
    let img_path = find_file(root, &img, &["png", "ppm"])?;
    let manual_path = find_file(root, &manual, &["png", "pgm"])?;
    let mask_path = find_file(root, &mask, &["png", "pgm"])?;
    let rgb = raster::read_bytes(&img_path)?;
    let label = raster::read_bytes(&manual_path)?;
    let fov = raster::read_bytes(&mask_path)?;
    for (path, b) in [(&img_path, &rgb), (&manual_path, &label), (&mask_path, &fov)] {
        if (b.width, b.height) != (DRIVE_WIDTH, DRIVE_HEIGHT) {
            return Err(Error::Data(format!(
                "{} is {}x{}, expected {DRIVE_WIDTH}x{DRIVE_HEIGHT}",
                path.display(),
                b.width,
                b.height
            )));
        }
    }
    Ok(RawSample {
        id,
        label: binary(&label),
        fov: binary(&fov),
        rgb,
    })
}

/// Loads all 40 cases in ascending id order.
pub fn load_drive(root: &Path) -> Result<Vec<RawSample>> {
    load_ids(root, &SplitSpec::default().all())
}

pub fn load_ids(root: &Path, ids: &[u32]) -> Result<Vec<RawSample>> {
    ids.iter().map(|&id| load_case(root, id)).collect()
}

/// Re-encodes the original DRIVE TIFF/GIF files under `src` as PNG under
/// `dst`, keeping relative paths. Returns the number of files written.
pub fn convert_drive(src: &Path, dst: &Path) -> Result<usize> {
    let mut written = 0;
    for id in SplitSpec::default().all() {
        let [img, manual, mask] = drive_stems(id);
        for (stem, ext) in [(img, "tif"), (manual, "gif"), (mask, "gif")] {
            let from = src.join(format!("{stem}.{ext}"));
            if !from.is_file() {
                return Err(Error::Data(format!("missing file {}", from.display())));
            }
            let mut bytes = raster::read_bytes(&from)?;
            if ext == "gif" && bytes.channels == 3 {
                bytes = ByteImage::gray(bytes.width, bytes.height, bytes.data.iter().step_by(3).copied().collect());
            }
            let to = dst.join(format!("{stem}.png"));
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            raster::write_png(&to, &bytes)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Channel 1 of an RGB raster, as values in `0..=255`.
pub fn green_channel(rgb: &ByteImage) -> Result<Image2D> {
    if rgb.channels != 3 {
        return Err(Error::Data(format!(
            "green channel needs a 3-channel image, got {} channel(s)",
            rgb.channels
        )));
    }
    let data = rgb.data.chunks_exact(3).map(|px| px[1] as f64).collect();
    Ok(Image2D::new(rgb.width, rgb.height, data)?.with_modality(Modality::Fundus))
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Contrast-limited adaptive histogram equalization on 8-bit data, with the
/// same tiling, clipping, redistribution and interpolation arithmetic as
/// OpenCV. `clip_limit` is relative to the mean bin height; a non-positive
/// limit disables clipping. Tiles holding a single grey level map it to
/// itself.
pub fn clahe(image: &Image2D, tiles_x: usize, tiles_y: usize, clip_limit: f64) -> Image2D {
    const BINS: usize = 256;
    let (w, h) = (image.width, image.height);
    let src: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    let ext_w = if w % tiles_x == 0 { w } else { w + tiles_x - w % tiles_x };
    let ext_h = if h % tiles_y == 0 { h } else { h + tiles_y - h % tiles_y };
    let (tw, th) = (ext_w / tiles_x, ext_h / tiles_y);
    let area = tw * th;
    let clip = if clip_limit > 0.0 {
        ((clip_limit * area as f64 / BINS as f64) as usize).max(1)
    } else {
        0
    };
    let lut_scale = (BINS - 1) as f32 / area as f32;

    let mut luts = vec![[0u8; BINS]; tiles_x * tiles_y];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0usize; BINS];
            for y in ty * th..(ty + 1) * th {
                let sy = raster::mirror_index(y, h);
                for x in tx * tw..(tx + 1) * tw {
                    hist[src[sy * w + raster::mirror_index(x, w)] as usize] += 1;
                }
            }
            let lut = &mut luts[ty * tiles_x + tx];
            if hist.iter().filter(|&&c| c > 0).count() == 1 {
                for (i, v) in lut.iter_mut().enumerate() {
                    *v = i as u8;
                }
                continue;
            }
            if clip > 0 {
                let mut clipped = 0;
                for c in hist.iter_mut() {
                    if *c > clip {
                        clipped += *c - clip;
                        *c = clip;
                    }
                }
                let batch = clipped / BINS;
                let mut residual = clipped - batch * BINS;
                hist.iter_mut().for_each(|c| *c += batch);
                if residual > 0 {
                    let step = (BINS / residual).max(1);
                    let mut i = 0;
                    while i < BINS && residual > 0 {
                        hist[i] += 1;
                        i += step;
                        residual -= 1;
                    }
                }
            }
            let mut sum = 0usize;
            for (i, c) in hist.iter().enumerate() {
                sum += c;
                lut[i] = (sum as f32 * lut_scale).round_ties_even().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let coords = |i: usize, inv: f32, n: usize| {
        let f = i as f32 * inv - 0.5;
        let lo = f.floor();
        let a = f - lo;
        let lo = lo as isize;
        let i1 = lo.max(0) as usize;
        let i2 = ((lo + 1) as usize).min(n - 1);
        (i1, i2, a, 1.0 - a)
    };
    let (inv_w, inv_h) = (1.0f32 / tw as f32, 1.0f32 / th as f32);
    let xs: Vec<_> = (0..w).map(|x| coords(x, inv_w, tiles_x)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ty1, ty2, ya, ya1) = coords(y, inv_h, tiles_y);
        for (x, &(tx1, tx2, xa, xa1)) in xs.iter().enumerate() {
            let v = src[y * w + x] as usize;
            let l = |ty: usize, tx: usize| luts[ty * tiles_x + tx][v] as f32;
            let res = (l(ty1, tx1) * xa1 + l(ty1, tx2) * xa) * ya1 + (l(ty2, tx1) * xa1 + l(ty2, tx2) * xa) * ya;
            out.push(res.round_ties_even().clamp(0.0, 255.0) as f64);
        }
    }
    Image2D {
        data: out,
        ..image.clone()
    }
}

/// Linear map of `[min, max]` onto `[-1 + d, 1 - d]` with `d = 1e-3`.
pub fn standardize(image: &Image2D) -> Result<Image2D> {
    let (lo, hi) = image.min_max();
    if hi <= lo {
        return Err(Error::Data("cannot standardize a constant image".into()));
    }
    let d = STANDARDIZE_MARGIN;
    let scale = (2.0 - 2.0 * d) / (hi - lo);
    Ok(Image2D {
        data: image.data.iter().map(|&v| -1.0 + d + (v - lo) * scale).collect(),
        ..image.clone()
    })
}

/// Euclidean distance from every foreground pixel to the nearest background
/// pixel (0 on background). Exact, by separable lower envelopes of parabolas.
pub fn distance_transform(mask: &[u8], w: usize, h: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut f: Vec<f64> = mask.iter().map(|&m| if m != 0 { INF } else { 0.0 }).collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = f[y * w + x];
        }
        envelope(&col, &mut out[..h]);
        for y in 0..h {
            f[y * w + x] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&f[y * w..(y + 1) * w]);
        envelope(&row, &mut out[..w]);
        f[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    f.into_iter().map(|d2| if d2 >= INF { f64::INFINITY } else { d2.sqrt() }).collect()
}

fn envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Zhang-Suen thinning of a 0/1 mask.
pub fn skeletonize(mask: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut img = mask.iter().map(|&m| u8::from(m != 0)).collect::<Vec<_>>();
    let at = |img: &[u8], x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let mut remove = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            remove.clear();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if at(&img, x, y) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        at(&img, x, y - 1),
                        at(&img, x + 1, y - 1),
                        at(&img, x + 1, y),
                        at(&img, x + 1, y + 1),
                        at(&img, x, y + 1),
                        at(&img, x - 1, y + 1),
                        at(&img, x - 1, y),
                        at(&img, x - 1, y - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (c1, c2) = if pass == 0 {
                        (p[0] * p[2] * p[4], p[2] * p[4] * p[6])
                    } else {
                        (p[0] * p[2] * p[6], p[0] * p[4] * p[6])
                    };
                    if c1 == 0 && c2 == 0 {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            for &i in &remove {
                img[i] = 0;
            }
            changed |= !remove.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

/// Local vessel diameter for every label pixel (0 elsewhere): twice the
/// distance transform on the skeleton, spread to the rest of the vessel by
/// breadth-first search from the skeleton, clamped below at 1.
pub fn diameter_map(label: &[u8], w: usize, h: usize) -> Vec<f64> {
    let dist = distance_transform(label, w, h);
    let skel = skeletonize(label, w, h);
    let mut diam = vec![0.0; w * h];
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        if skel[i] != 0 {
            diam[i] = (2.0 * dist[i]).max(1.0);
            seen[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if label[j] != 0 && !seen[j] {
                    seen[j] = true;
                    diam[j] = diam[i];
                    queue.push_back(j);
                }
            }
        }
    }
    for i in 0..w * h {
        if label[i] != 0 && !seen[i] {
            diam[i] = (2.0 * dist[i]).max(1.0);
        }
    }
    diam
}

/// Weight of a vessel pixel of diameter `d`: `8 / d`, kept within `[1, 8]`.
pub fn diameter_weight(d: f64) -> f64 {
    (MAX_WEIGHT / d.max(1.0)).clamp(1.0, MAX_WEIGHT)
}

/// Per-pixel loss weight: [`diameter_weight`] on vessels, 1 elsewhere.
pub fn weight_map(label: &[u8], w: usize, h: usize) -> Vec<f64> {
    if label.iter().all(|&l| l == 0) {
        return vec![1.0; w * h];
    }
    diameter_map(label, w, h)
        .into_iter()
        .zip(label)
        .map(|(d, &l)| if l != 0 { diameter_weight(d) } else { 1.0 })
        .collect()
}

/// Green channel, CLAHE and standardization of a colour photograph.
pub fn preprocess(rgb: &ByteImage) -> Result<Image2D> {
    let green = green_channel(rgb)?;
    let mut image = standardize(&clahe(&green, CLAHE_TILES, CLAHE_TILES, CLAHE_CLIP))?;
    image.modality = Modality::Fundus;
    Ok(image)
}

/// [`preprocess`] plus labels, mask and weight map.
pub fn prepare(raw: &RawSample) -> Result<FundusSample> {
    let mut image = preprocess(&raw.rgb)?;
    image.fov = Some(raw.fov.clone());
    Ok(FundusSample {
        id: raw.id,
        weight: weight_map(&raw.label, raw.rgb.width, raw.rgb.height),
        label: raw.label.clone(),
        fov: raw.fov.clone(),
        image,
    })
}

/// Fraction of thin-vessel pixels (diameter at most `max_diameter`) whose
/// prepared intensity lies in `(-0.6, 0.6)`, or `None` without such pixels.
pub fn thin_vessel_fraction(sample: &FundusSample, max_diameter: f64) -> Option<f64> {
    let diam = diameter_map(&sample.label, sample.width(), sample.height());
    let (mut total, mut inside) = (0usize, 0usize);
    for i in 0..diam.len() {
        if sample.label[i] != 0 && sample.fov[i] != 0 && diam[i] <= max_diameter {
            total += 1;
            inside += usize::from(sample.image.data[i].abs() < 0.6);
        }
    }
    (total > 0).then(|| inside as f64 / total as f64)
}

/// Square training patch; every raster is `size x size`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub image: Vec<f64>,
    /// 0/1 vessel label.
    pub label: Vec<f64>,
    pub weight: Vec<f64>,
    /// 0/1 field of view; pixels outside it do not enter the loss.
    pub mask: Vec<f64>,
}

/// Uniform sampler over all valid patch centres of a set of samples: the
/// patch lies fully inside the image and its centre pixel inside the FOV.
/// For an even patch size `s` the centre is pixel `s / 2` of the patch.
pub struct PatchSampler {
    size: usize,
    /// Per sample: row-major indices of valid centres.
    centres: Vec<Vec<u32>>,
    total: usize,
}

impl PatchSampler {
    pub fn new(samples: &[FundusSample], size: usize) -> Result<Self> {
        let half = size / 2;
        let centres: Vec<Vec<u32>> = samples
            .iter()
            .map(|s| {
                let (w, h) = (s.width(), s.height());
                let mut v = Vec::new();
                if w >= size && h >= size {
                    for y in half..=h - (size - half) {
                        for x in half..=w - (size - half) {
                            if s.fov[y * w + x] != 0 {
                                v.push((y * w + x) as u32);
                            }
                        }
                    }
                }
                v
            })
            .collect();
        let total = centres.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::Data(format!(
                "no {size}x{size} patch fits inside the images with its centre in the field of view"
            )));
        }
        Ok(Self { size, centres, total })
    }

    pub fn valid_centres(&self) -> usize {
        self.total
    }

    /// Per-sample valid centre indices.
    pub fn centres(&self, sample: usize) -> &[u32] {
        &self.centres[sample]
    }

    /// One centre `(sample, x, y)` drawn uniformly.
    pub fn draw<R: Rng>(&self, samples: &[FundusSample], rng: &mut R) -> (usize, usize, usize) {
        let mut k = rng.random_range(0..self.total);
        for (si, c) in self.centres.iter().enumerate() {
            if k < c.len() {
                let w = samples[si].width();
                let idx = c[k] as usize;
                return (si, idx % w, idx / w);
            }
            k -= c.len();
        }
        unreachable!("index below total")
    }

    pub fn extract(&self, sample: &FundusSample, cx: usize, cy: usize) -> Patch {
        let s = self.size;
        let (x0, y0) = (cx - s / 2, cy - s / 2);
        let w = sample.width();
        let mut p = Patch {
            size: s,
            image: Vec::with_capacity(s * s),
            label: Vec::with_capacity(s * s),
            weight: Vec::with_capacity(s * s),
            mask: Vec::with_capacity(s * s),
        };
        for y in y0..y0 + s {
            let r = y * w + x0..y * w + x0 + s;
            p.image.extend_from_slice(&sample.image.data[r.clone()]);
            p.weight.extend_from_slice(&sample.weight[r.clone()]);
            p.label.extend(sample.label[r.clone()].iter().map(|&v| v as f64));
            p.mask.extend(sample.fov[r].iter().map(|&v| v as f64));
        }
        p
    }

    /// `count` patches drawn with the given RNG.
    pub fn batch<R: Rng>(&self, samples: &[FundusSample], count: usize, rng: &mut R) -> Vec<Patch> {
        (0..count)
            .map(|_| {
                let (si, x, y) = self.draw(samples, rng);
                self.extract(&samples[si], x, y)
            })
            .collect()
    }
}

/// A batch of 50 patches of 168 x 168, determined by `seed`.
pub fn sample_batch(samples: &[FundusSample], seed: u64) -> Result<Vec<Patch>> {
    let sampler = PatchSampler::new(samples, PATCH_SIZE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.batch(samples, BATCH_SIZE, &mut rng))
}

/// Geometric and photometric augmentation settings for one patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub angle_deg: f64,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        angle_deg: 0.0,
        scale: 1.0,
        noise_sigma: 0.0,
    };

    /// Rotation uniform in `[0, 360)`, scale uniform in `[0.9, 1.1]`.
    pub fn random<R: Rng>(rng: &mut R, noise_sigma: f64) -> Self {
        Self {
            angle_deg: rng.random_range(0.0..360.0),
            scale: rng.random_range(0.9..=1.1),
            noise_sigma,
        }
    }

    /// Cosine and sine, exact for multiples of 90 degrees.
    fn cos_sin(&self) -> (f64, f64) {
        let a = self.angle_deg.rem_euclid(360.0);
        match a {
            0.0 => (1.0, 0.0),
            90.0 => (0.0, 1.0),
            180.0 => (-1.0, 0.0),
            270.0 => (0.0, -1.0),
            _ => {
                let (s, c) = a.to_radians().sin_cos();
                (c, s)
            }
        }
    }
}

fn bilinear(src: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let max = (n - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = src[y0 * n + x0] * (1.0 - fx) + src[y0 * n + x1] * fx;
    let bottom = src[y1 * n + x0] * (1.0 - fx) + src[y1 * n + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest(src: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let max = (n - 1) as f64;
    let (x, y) = (x.round().clamp(0.0, max) as usize, y.round().clamp(0.0, max) as usize);
    src[y * n + x]
}

/// Rotates and scales a patch about its centre (bilinear for image and
/// weight, nearest for label and mask, edge clamping), then adds Gaussian
/// noise to the image. Output pixel `p` samples the input at
/// `c + R(angle)^T (p - c) / scale`.
pub fn augment<R: Rng>(patch: &Patch, aug: Augmentation, rng: &mut R) -> Patch {
    let n = patch.size;
    let c = (n as f64 - 1.0) / 2.0;
    let (cos, sin) = aug.cos_sin();
    let mut out = Patch {
        size: n,
        image: vec![0.0; n * n],
        label: vec![0.0; n * n],
        weight: vec![0.0; n * n],
        mask: vec![0.0; n * n],
    };
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = c + (cos * dx + sin * dy) / aug.scale;
            let sy = c + (-sin * dx + cos * dy) / aug.scale;
            let i = y * n + x;
            out.image[i] = bilinear(&patch.image, n, sx, sy);
            out.weight[i] = bilinear(&patch.weight, n, sx, sy);
            out.label[i] = nearest(&patch.label, n, sx, sy);
            out.mask[i] = nearest(&patch.mask, n, sx, sy);
        }
    }
    if aug.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, aug.noise_sigma).expect("positive sigma");
        for v in &mut out.image {
            *v += noise.sample(rng);
        }
    }
    out
}
