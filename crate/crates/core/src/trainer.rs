//! End-to-end training of the U-Net + Frangi-Net pipeline.
//!
//! Objective per batch:
//!
//! ```text
//! L = focal + lambda_l2 * sum ||U-Net kernels||^2 + lambda_mse * mean((unet(x) - x)^2)
//! ```
//!
//! where the focal term is the mean over FOV pixels of
//! `w(x) alpha_t (1 - p_t)^gamma (-ln p_t)` with the diameter weight map `w`
//! and class-balanced `alpha`. A batch can be split into micro-batches whose
//! losses and gradients add up exactly to those of the whole batch.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fundus::{self, Augmentation, FundusSample, Patch, PatchSampler};
use crate::model::{self, Model, UNET_PREFIX};
use crate::params::{Bound, ParamStore};
use crate::raster::mirror_index;
use crate::tensor::{Array, ClassWeights, FocalTarget, Graph, Precision, Tensor};
use crate::unet::{self, UNetParams};

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Stated in the published method description.
    Published,
    /// Not stated there; picked for this implementation.
    Chosen,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Published => "[published]",
            Provenance::Chosen => "[chosen]",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_steps: u64,
    pub batch: usize,
    pub patch: usize,
    /// Patches per forward/backward pass; gradients are accumulated.
    pub micro_batch: usize,
    pub focal_gamma: f64,
    /// Inverse class frequency per batch when true, alpha = 1 otherwise.
    pub class_balance: bool,
    pub lambda_l2: f64,
    pub lambda_mse: f64,
    pub patience: usize,
    pub val_every: u64,
    pub max_steps: u64,
    pub augment: bool,
    pub noise_sigma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            decay_factor: 0.5,
            decay_steps: 10_000,
            batch: fundus::BATCH_SIZE,
            patch: fundus::PATCH_SIZE,
            micro_batch: 5,
            focal_gamma: 2.0,
            class_balance: true,
            lambda_l2: 1e-4,
            lambda_mse: 0.1,
            patience: 5,
            val_every: 500,
            max_steps: 200_000,
            augment: true,
            noise_sigma: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "lr0",
        "decay_factor",
        "decay_steps",
        "batch",
        "patch",
        "micro_batch",
        "focal_gamma",
        "class_balance",
        "lambda_l2",
        "lambda_mse",
        "patience",
        "val_every",
        "max_steps",
        "augment",
        "noise_sigma",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "seed",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lr0" => format!("{:e}", self.lr0),
            "decay_factor" => format!("{:e}", self.decay_factor),
            "decay_steps" => self.decay_steps.to_string(),
            "batch" => self.batch.to_string(),
            "patch" => self.patch.to_string(),
            "micro_batch" => self.micro_batch.to_string(),
            "focal_gamma" => format!("{:e}", self.focal_gamma),
            "class_balance" => self.class_balance.to_string(),
            "lambda_l2" => format!("{:e}", self.lambda_l2),
            "lambda_mse" => format!("{:e}", self.lambda_mse),
            "patience" => self.patience.to_string(),
            "val_every" => self.val_every.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "augment" => self.augment.to_string(),
            "noise_sigma" => format!("{:e}", self.noise_sigma),
            "adam_beta1" => format!("{:e}", self.adam_beta1),
            "adam_beta2" => format!("{:e}", self.adam_beta2),
            "adam_eps" => format!("{:e}", self.adam_eps),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lr0" => self.lr0 = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "decay_steps" => self.decay_steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "micro_batch" => self.micro_batch = parse(key, v)?,
            "focal_gamma" => self.focal_gamma = parse(key, v)?,
            "class_balance" => self.class_balance = parse(key, v)?,
            "lambda_l2" => self.lambda_l2 = parse(key, v)?,
            "lambda_mse" => self.lambda_mse = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn provenance(key: &str) -> Provenance {
        match key {
            "lr0" | "decay_steps" | "batch" | "patch" => Provenance::Published,
            _ => Provenance::Chosen,
        }
    }

    /// Flat `key=value` document, `#` comments allowed; unknown keys are errors.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key=value, got {line:?}", n + 1))
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// One line per setting with its origin.
    /// One `key = value [source]` line per key; values that differ from the
    /// defaults are tagged `[override]`.
    pub fn provenance_report(&self) -> String {
        let defaults = Self::default();
        Self::KEYS
            .iter()
            .map(|k| {
                let v = self.get(k).expect("known key");
                if defaults.get(k).as_deref() == Some(v.as_str()) {
                    format!("{k} = {v} {}\n", Self::provenance(k))
                } else {
                    format!("{k} = {v} [override]\n")
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("decay_factor", self.decay_factor),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("focal_gamma", self.focal_gamma),
            ("lambda_l2", self.lambda_l2),
            ("lambda_mse", self.lambda_mse),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{k} must be non-negative, got {v}")));
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if self.decay_steps == 0 || self.batch == 0 || self.micro_batch == 0 || self.val_every == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "decay_steps, batch, micro_batch, val_every and patience must be positive".into(),
            ));
        }
        if self.patch == 0 || self.patch % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch must be a positive multiple of 4, got {}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(step / decay_steps)`.
pub fn lr_schedule(config: &TrainConfig, step: u64) -> f64 {
    let k = (step / config.decay_steps) as i32;
    config.lr0 * config.decay_factor.powi(k)
}

/// Bias-corrected Adam over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = ParamStore::new();
        for (n, a) in params.iter() {
            m.insert(n, Array::zeros(a.shape()));
        }
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        params.check_layout(&self.m).map_err(|e| Error::shape("adam", e.to_string()))?;
        grads.check_layout(&self.m).map_err(|e| Error::shape("adam", e.to_string()))?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("layout checked").data();
            let m = self.m.get_mut(name).expect("layout checked").data_mut();
            let v = self.v.get_mut(name).expect("layout checked").data_mut();
            for (i, p) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement { remaining: usize },
    Stop,
}

/// Stops after `patience` consecutive validations without a new best loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn update(&mut self, val_loss: f64) -> StopDecision {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.bad = 0;
            return StopDecision::Improved;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::NoImprovement {
                remaining: self.patience - self.bad,
            }
        }
    }
}

/// Loss terms of one evaluation; `total = focal + lambda_l2 * l2 + lambda_mse * mse`
/// where `l2` and `mse` are the raw (unweighted) regularizers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub focal: f64,
    pub l2: f64,
    pub mse: f64,
}

/// Batch-level quantities every micro-batch needs.
#[derive(Clone, Copy, Debug)]
pub struct BatchStats {
    pub class_weights: ClassWeights,
    pub fov_pixels: f64,
    pub pixels: f64,
}

impl BatchStats {
    pub fn new(labels: &[f64], masks: &[f64], class_balance: bool) -> Result<Self> {
        let fov_pixels = masks.iter().filter(|&&m| m > 0.0).count() as f64;
        if fov_pixels == 0.0 {
            return Err(Error::Data("batch has no field-of-view pixels".into()));
        }
        Ok(Self {
            class_weights: if class_balance {
                ClassWeights::balanced(labels, masks)
            } else {
                ClassWeights::uniform(1.0)
            },
            fov_pixels,
            pixels: masks.len() as f64,
        })
    }

    pub fn of_patches(patches: &[Patch], class_balance: bool) -> Result<Self> {
        let labels: Vec<f64> = patches.iter().flat_map(|p| p.label.iter().copied()).collect();
        let masks: Vec<f64> = patches.iter().flat_map(|p| p.mask.iter().copied()).collect();
        Self::new(&labels, &masks, class_balance)
    }
}

/// Graph nodes of the composite loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Tensor,
    pub focal: Tensor,
    /// Raw sum of squared U-Net kernel weights, when included.
    pub l2: Option<Tensor>,
    /// Raw squared-error sum divided by the batch pixel count.
    pub mse: Tensor,
    /// Class probabilities `[N, 2, H, W]`.
    pub prob: Tensor,
}

/// Stacked inputs and targets, each `[N, 1, H, W]`.
pub struct Example {
    pub image: Array,
    pub target: FocalTarget,
}

impl Example {
    pub fn from_patches(patches: &[Patch]) -> Result<Self> {
        let s = patches.first().map(|p| p.size).ok_or_else(|| Error::Data("empty batch".into()))?;
        let shape = vec![patches.len(), 1, s, s];
        let stack = |f: fn(&Patch) -> &Vec<f64>| -> Result<Array> {
            Array::new(shape.clone(), patches.iter().flat_map(|p| f(p).iter().copied()).collect())
        };
        Ok(Self {
            image: stack(|p| &p.image)?,
            target: FocalTarget {
                label: stack(|p| &p.label)?,
                weight: stack(|p| &p.weight)?,
                mask: stack(|p| &p.mask)?,
            },
        })
    }

    /// A whole prepared image, mirror-padded to multiples of 4; padded pixels
    /// are outside the mask.
    pub fn from_sample(s: &FundusSample) -> Result<Self> {
        let (ph, pw) = unet::padding_for(s.height(), s.width());
        let (h, w) = (s.height() + ph, s.width() + pw);
        let shape = [1, 1, h, w];
        let src = |i: usize| mirror_index(i / w, s.height()) * s.width() + mirror_index(i % w, s.width());
        let inside = |i: usize| i / w < s.height() && i % w < s.width();
        Ok(Self {
            image: Array::from_fn(&shape, |i| s.image.data[src(i)]),
            target: FocalTarget {
                label: Array::from_fn(&shape, |i| s.label[src(i)] as f64),
                weight: Array::from_fn(&shape, |i| s.weight[src(i)]),
                mask: Array::from_fn(&shape, |i| if inside(i) { s.fov[src(i)] as f64 } else { 0.0 }),
            },
        })
    }
}

/// Builds the composite loss of one (micro-)batch. The focal term is
/// normalized by the FOV pixel count and the MSE by the pixel count of the
/// whole batch described by `stats`, so micro-batch losses sum to the batch
/// loss. The weight penalty is added only when `include_l2` is set.
pub fn composite_loss(
    g: &mut Graph,
    bound: &Bound,
    example: Example,
    stats: &BatchStats,
    config: &TrainConfig,
    include_l2: bool,
) -> Result<LossNodes> {
    let x = g.input(example.image)?;
    let out = model::forward(g, x, bound)?;
    let focal = g.focal_loss(
        out.prob,
        example.target,
        config.focal_gamma,
        stats.class_weights,
        stats.fov_pixels,
    )?;
    let diff = g.sub(out.enhanced, x)?;
    let sq = g.sum_squares(diff)?;
    let mse = g.scale(sq, 1.0 / stats.pixels)?;
    let weighted_mse = g.scale(mse, config.lambda_mse)?;
    let mut total = g.add(focal, weighted_mse)?;
    let mut l2 = None;
    if include_l2 {
        let unet = bound.scoped(UNET_PREFIX);
        let mut acc: Option<Tensor> = None;
        for name in UNetParams::kernel_names() {
            let s = g.sum_squares(unet.get(&name)?)?;
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        let raw = acc.expect("at least one kernel");
        let weighted = g.scale(raw, config.lambda_l2)?;
        total = g.add(total, weighted)?;
        l2 = Some(raw);
    }
    Ok(LossNodes {
        total,
        focal,
        l2,
        mse,
        prob: out.prob,
    })
}

fn read_terms(g: &Graph, nodes: &LossNodes) -> Result<LossTerms> {
    let item = |t: Tensor| -> Result<f64> { Ok(g.value(t)?.data()[0]) };
    Ok(LossTerms {
        total: item(nodes.total)?,
        focal: item(nodes.focal)?,
        l2: match nodes.l2 {
            Some(t) => item(t)?,
            None => 0.0,
        },
        mse: item(nodes.mse)?,
    })
}

/// Loss and accumulated parameter gradients of a batch, processed in
/// micro-batches of `config.micro_batch` patches.
pub fn batch_gradients(model: &Model, patches: &[Patch], config: &TrainConfig) -> Result<(LossTerms, ParamStore)> {
    let stats = BatchStats::of_patches(patches, config.class_balance)?;
    let mut grads = ParamStore::new();
    for (n, a) in model.params().iter() {
        grads.insert(n, Array::zeros(a.shape()));
    }
    let mut terms = LossTerms::default();
    for (k, chunk) in patches.chunks(config.micro_batch).enumerate() {
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g)?;
        let nodes = composite_loss(&mut g, &bound, Example::from_patches(chunk)?, &stats, config, k == 0)?;
        let t = read_terms(&g, &nodes)?;
        terms.total += t.total;
        terms.focal += t.focal;
        terms.l2 += t.l2;
        terms.mse += t.mse;
        let mut gr = g.backward(nodes.total)?;
        for (name, tensor) in bound.iter() {
            let d = gr.take(tensor)?;
            let acc = grads.get_mut(name).expect("same layout");
            for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
    }
    Ok((terms, grads))
}

/// Optimizer state around a model.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params(), config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update on `patches`; returns the loss before the update.
    pub fn step(&mut self, patches: &[Patch]) -> Result<LossTerms> {
        let step = self.step;
        let (terms, grads) = batch_gradients(&self.model, patches, &self.config).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        for (name, v) in [("total", terms.total), ("focal", terms.focal), ("l2", terms.l2), ("mse", terms.mse)] {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("{name} loss is {v}"),
                });
            }
        }
        let lr = lr_schedule(&self.config, step);
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(terms)
    }
}

/// Validation loss and pixel metrics at threshold 0.5 inside the FOV.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValMetrics {
    pub loss: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Mean composite loss over whole images plus pooled pixel metrics.
pub fn evaluate(model: &Model, samples: &[FundusSample], config: &TrainConfig) -> Result<ValMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("no validation images".into()));
    }
    let (mut loss, mut tp, mut fp, mut fn_) = (0.0, 0usize, 0usize, 0usize);
    for s in samples {
        let ex = Example::from_sample(s)?;
        let stats = BatchStats::new(ex.target.label.data(), ex.target.mask.data(), config.class_balance)?;
        let (label, mask) = (ex.target.label.clone(), ex.target.mask.clone());
        let mut g = Graph::inference(Precision::Double);
        let bound = model.params().bind(&mut g)?;
        let nodes = composite_loss(&mut g, &bound, ex, &stats, config, true)?;
        loss += g.value(nodes.total)?.data()[0];
        let prob = &g.value(nodes.prob)?.data()[label.len()..];
        for i in 0..label.len() {
            if mask.data()[i] <= 0.0 {
                continue;
            }
            let (pred, truth) = (prob[i] > 0.5, label.data()[i] > 0.5);
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ValMetrics {
        loss: loss / samples.len() as f64,
        f1,
        precision,
        recall,
    })
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: u64,
    pub stopped_early: bool,
    pub best_val_loss: Option<f64>,
    /// Best checkpoint, or the final one when no validation ran.
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub const LOG_HEADER: &str = "step,lr,loss,focal,l2,mse,val_loss,val_f1,val_precision,val_recall";

/// Trains from `model` on patches of `train` samples, validating on whole
/// `val` images every `val_every` steps. Writes `train_log.csv`, `best.ckpt`
/// (on every validation improvement) and `final.ckpt` under `out_dir`.
/// `progress` receives one human-readable line per validation.
pub fn train(
    config: &TrainConfig,
    model: Model,
    train_set: &[FundusSample],
    val_set: &[FundusSample],
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let write_log = |log: &mut fs::File, line: String| -> Result<()> {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    write_log(&mut log, LOG_HEADER.to_string())?;

    let sampler = PatchSampler::new(train_set, config.patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = Vec::new();
    let best_path = out_dir.join("best.ckpt");
    let mut saved_best = false;
    let mut stopped_early = false;

    while trainer.step_count() < config.max_steps {
        let step = trainer.step_count();
        let mut batch = sampler.batch(train_set, config.batch, &mut rng);
        if config.augment {
            batch = batch
                .iter()
                .map(|p| {
                    let aug = Augmentation::random(&mut rng, config.noise_sigma);
                    fundus::augment(p, aug, &mut rng)
                })
                .collect();
        }
        let lr = lr_schedule(config, step);
        let t = trainer.step(&batch)?;
        let mut line = format!("{step},{lr:e},{:e},{:e},{:e},{:e}", t.total, t.focal, t.l2, t.mse);
        if (step + 1) % config.val_every == 0 {
            let m = evaluate(&trainer.model, val_set, config)?;
            history.push(m.loss);
            line += &format!(",{:e},{},{},{}", m.loss, m.f1, m.precision, m.recall);
            let decision = stopper.update(m.loss);
            progress(&format!(
                "step {}: train loss {:.5}, val loss {:.5}, F1 {:.3} ({decision:?})",
                step + 1,
                t.total,
                m.loss,
                m.f1
            ));
            if decision == StopDecision::Improved {
                Checkpoint {
                    model: trainer.model.clone(),
                    step: step + 1,
                    config: config.clone(),
                    val_history: history.clone(),
                }
                .save(&best_path)?;
                saved_best = true;
            }
            write_log(&mut log, line)?;
            if decision == StopDecision::Stop {
                stopped_early = true;
                break;
            }
        } else {
            line += ",,,,";
            write_log(&mut log, line)?;
        }
    }
    let final_path = out_dir.join("final.ckpt");
    Checkpoint {
        model: trainer.model.clone(),
        step: trainer.step_count(),
        config: config.clone(),
        val_history: history,
    }
    .save(&final_path)?;
    Ok(TrainOutcome {
        steps: trainer.step_count(),
        model: trainer.model,
        stopped_early,
        best_val_loss: stopper.best(),
        checkpoint: if saved_best { best_path } else { final_path },
        log: log_path,
    })
}
