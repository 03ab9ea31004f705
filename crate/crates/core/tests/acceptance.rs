//! One line per acceptance criterion, printed even under output capture:
//!
//! ```text
//! cargo test -p vesselforge --test acceptance
//! ```
//!
//! Set `VESSELFORGE_DRIVE` to a converted DRIVE tree to use test image 01
//! instead of a 565x584 phantom for the oracle comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::statistics::Statistics;

use vesselforge::checkpoint::{self, Checkpoint};
use vesselforge::fundus::{self, FundusSample, PatchSampler};
use vesselforge::model::Model;
use vesselforge::octa::{self, OctaImage};
use vesselforge::params::{Bound, ParamStore};
use vesselforge::phantom;
use vesselforge::raster::Image2D;
use vesselforge::study::{self, GradeRecord, StdKind, ORDERINGS};
use vesselforge::tensor::Array;
use vesselforge::trainer::{
    self, composite_loss, lr_schedule, BatchStats, EarlyStopping, Example, StopDecision, TrainConfig, Trainer,
};
use vesselforge::verify::{self, grad_check, CheckMode};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Not executable in this environment; printed as FAIL but does not
    /// fail the test run.
    Unverified(String),
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn classical_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0f64;
    for seed in 0..10 {
        let img = phantom::random_phantom(seed, 64, 64);
        worst = worst.max(verify::oracle_max_diff(&img, 64, 64).unwrap());
    }
    let (label, prepared) = match std::env::var_os("VESSELFORGE_DRIVE") {
        Some(root) => ("DRIVE 01", fundus::prepare(&fundus::load_case(Path::new(&root), 1).unwrap()).unwrap()),
        None => (
            "565x584 phantom",
            fundus::prepare(&phantom::fundus_phantom(1, 565, 584).to_raw(1)).unwrap(),
        ),
    };
    let img = &prepared.image;
    let full = verify::oracle_max_diff(&img.data, img.height, img.width).unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-5 && full <= 1e-5 && secs < 60.0,
        format!("max diff {worst:.2e} on 10 phantoms, {full:.2e} on prepared {label}, {secs:.1} s"),
    )
}

fn small_batch(seed: u64, count: usize, size: usize) -> Vec<fundus::Patch> {
    let s: Vec<FundusSample> = vec![fundus::prepare(&phantom::fundus_phantom(seed, 96, 96).to_raw(seed as u32)).unwrap()];
    PatchSampler::new(&s, size)
        .unwrap()
        .batch(&s, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = verify::op_gradient_suite(20).unwrap();
    let failed = checks.iter().filter(|c| !c.passed()).count();
    let ops = verify::OPS.len();
    let worst_op = checks.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);

    let cfg = TrainConfig {
        patch: 16,
        batch: 1,
        micro_batch: 1,
        augment: false,
        ..TrainConfig::default()
    };
    let mut worst_e2e = 0f64;
    let mut e2e_failed = 0;
    for seed in 0..20u64 {
        let batch = small_batch(seed, 1, 16);
        let stats = BatchStats::of_patches(&batch, true).unwrap();
        let model = Model::new(100 + seed);
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Array> = model.params().iter().map(|(_, a)| a.clone()).collect();
        let report = grad_check(&inputs, CheckMode::Directional { seed }, |g, ts| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(ts.iter().copied()));
            Ok(composite_loss(g, &bound, Example::from_patches(&batch)?, &stats, &cfg, true)?.total)
        })
        .unwrap();
        worst_e2e = worst_e2e.max(report.max_rel_err);
        if report.max_rel_err >= 1e-5 {
            e2e_failed += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        failed == 0 && e2e_failed == 0 && secs < 300.0,
        format!(
            "{}/{} op checks ({ops} ops x 20 seeds, worst {worst_op:.1e}), {}/20 composite 16x16 (worst {worst_e2e:.1e}), {secs:.1} s",
            checks.len() - failed,
            checks.len(),
            20 - e2e_failed
        ),
    )
}

fn bit_exact_transforms() -> Outcome {
    let pairs = [(0.0, 0.5), (1.5, -1.0), (4.0, -3.5), (7.2, -3.5)];
    let mapped = pairs.iter().all(|&(a, b)| octa::transform_value(a).to_bits() == f64::to_bits(b));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Image2D::new(64, 64, (0..4096).map(|_| rand::Rng::random_range(&mut rng, -4.0..1.0)).collect()).unwrap();
    let b = Image2D::new(64, 64, (0..4096).map(|_| rand::Rng::random_range(&mut rng, -4.0..1.0)).collect()).unwrap();
    let mixed = octa::blend(&a, &b).unwrap();
    let midpoint = a.data.iter().zip(&b.data).zip(&mixed.data).all(|((x, y), m)| m.to_bits() == ((x + y) / 2.0).to_bits());
    let raster = Image2D::new(500, 500, phantom::octa_phantom(2, 500)).unwrap();
    let image = OctaImage::new("p", raster.clone()).unwrap();
    let whole = octa::intensity_transform(&image);
    let pointwise = raster.data.iter().zip(&whole.data).all(|(v, t)| t.to_bits() == (-v.min(4.0) + 0.5).to_bits());
    ensure(
        mapped && midpoint && pointwise,
        format!("{{0, 1.5, 4.0, 7.2}} -> {{0.5, -1.0, -3.5, -3.5}}: {mapped}, blend midpoint: {midpoint}, image transform: {pointwise}"),
    )
}

fn schedule_and_policy() -> Outcome {
    let cfg = TrainConfig::default();
    let initial = lr_schedule(&cfg, 0) == 5e-5;
    let mut breaks = Vec::new();
    for step in 1..50_001u64 {
        if lr_schedule(&cfg, step) != lr_schedule(&cfg, step - 1) {
            breaks.push(step);
        }
    }
    let breakpoints = breaks == [10_000, 20_000, 30_000, 40_000, 50_000];

    let mut es = EarlyStopping::new(cfg.patience);
    let mut stopped_after = None;
    es.update(1.0);
    for k in 1..=10 {
        if es.update(1.0 + k as f64) == StopDecision::Stop {
            stopped_after = Some(k);
            break;
        }
    }
    ensure(
        initial && breakpoints && stopped_after == Some(5),
        format!("lr(0) = {:e}, breakpoints {breaks:?}, stop after {stopped_after:?} non-improvements", lr_schedule(&cfg, 0)),
    )
}

fn training_smoke() -> Outcome {
    let start = Instant::now();
    let batch = small_batch(3, 4, 32);
    let cfg = TrainConfig {
        lr0: 1e-3,
        patch: 32,
        batch: 4,
        micro_batch: 4,
        augment: false,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, Model::new(0)).unwrap();
    let first = t.step(&batch).unwrap().total;
    let mut last = first;
    for _ in 1..200 {
        last = t.step(&batch).unwrap().total;
    }
    let drop = 1.0 - last / first;
    let overfit = format!("200-step overfit loss {first:.4} -> {last:.4} ({:.0}% lower, {:.0} s)", drop * 100.0, start.elapsed().as_secs_f64());
    if drop < 0.5 {
        return Outcome::Fail(overfit);
    }

    // Extrapolate the published configuration from one micro-batch.
    let full = TrainConfig::default();
    let sample = vec![fundus::prepare(&phantom::fundus_phantom(5, 565, 584).to_raw(5)).unwrap()];
    let sampler = PatchSampler::new(&sample, full.patch).unwrap();
    let micro = sampler.batch(&sample, full.micro_batch, &mut ChaCha8Rng::seed_from_u64(5));
    let t0 = Instant::now();
    trainer::batch_gradients(&Model::new(0), &micro, &full).unwrap();
    let step_secs = t0.elapsed().as_secs_f64() * (full.batch / full.micro_batch) as f64;
    let min_steps = full.val_every * (full.patience as u64 + 1);
    let hours = step_secs * min_steps as f64 / 3600.0;
    Outcome::Unverified(format!(
        "{overfit}; full DRIVE run not executed: {step_secs:.0} s per {}-patch step here, \
         early stop needs >= {min_steps} steps = {hours:.1} h on this machine",
        full.batch
    ))
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn transfer_contract() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let ck = dir.path().join("m.ckpt");
    Checkpoint {
        model: Model::new(9),
        step: 0,
        config: TrainConfig::default(),
        val_history: vec![],
    }
    .save(&ck)
    .unwrap();
    let before = (sha(&ck), sha(&checkpoint::blob_path(&ck)));
    let bin = env!("CARGO_BIN_EXE_vesselforge");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["synth-octa", "--out", &d("octa"), "--count", "20", "--seed", "1"]);
    run(&["transfer", "--checkpoint", &d("m.ckpt"), "--in", &d("octa"), "--out", &d("a")]);
    run(&["transfer", "--checkpoint", &d("m.ckpt"), "--in", &d("octa"), "--out", &d("b")]);
    let after = (sha(&ck), sha(&checkpoint::blob_path(&ck)));
    let a = tree(&dir.path().join("a"));
    let b = tree(&dir.path().join("b"));
    let cases = fs::read_dir(dir.path().join("a")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    let triplets = (0..20).all(|i| {
        octa::VARIANTS.iter().all(|v| {
            let case = PathBuf::from(format!("octa_{:02}", i + 1));
            a.contains_key(&case.join(octa::display_file(v))) && a.contains_key(&case.join(octa::dump_file(v)))
        })
    });
    ensure(
        cases == 20 && triplets && before == after && a == b,
        format!(
            "{cases} cases, triplets complete: {triplets}, checkpoint unchanged: {}, runs identical: {} ({} files), {:.0} s",
            before == after,
            a == b,
            a.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn record(rater: &str, case: usize, variant: &str, g: u8) -> GradeRecord {
    GradeRecord {
        case_id: format!("case_{case}"),
        rater_id: rater.into(),
        position: 0,
        variant: variant.into(),
        iq: g,
        vc: g,
        dq: g,
        timestamp: 0,
    }
}

fn study_statistics() -> Outcome {
    // Hand-computed: rater a averages 2 and 4, rater b averages 3 and 5;
    // rater means 3 and 4 give 3.5 with population std 0.5.
    let small = vec![
        record("a", 0, "raw", 2),
        record("a", 1, "raw", 4),
        record("b", 0, "raw", 3),
        record("b", 1, "raw", 5),
    ];
    let cell = study::report(&small, 2, StdKind::Population).cell("raw", "IQ").unwrap().clone();
    let hand = (cell.mean - 3.5).abs() < 1e-12 && (cell.std - 0.5).abs() < 1e-12;
    let sample = study::report(&small, 2, StdKind::Sample).cell("raw", "IQ").unwrap().std;
    let hand_sample = (sample - 0.5f64.sqrt()).abs() < 1e-12;

    // Five raters x five cases with per-rater grade sums fixed per variant.
    let sums: [(&str, [u8; 5]); 3] = [
        ("raw", [9, 13, 15, 17, 21]),
        ("blend", [7, 9, 11, 13, 15]),
        ("output", [9, 10, 11, 12, 13]),
    ];
    let mut recs = Vec::new();
    let mut oracle_ok = true;
    for (variant, per_rater) in sums {
        let mut rater_means = Vec::new();
        for (r, &s) in per_rater.iter().enumerate() {
            let mut g = [s / 5; 5];
            for slot in g.iter_mut().take((s % 5) as usize) {
                *slot += 1;
            }
            rater_means.push(g.iter().map(|&v| v as f64).mean());
            for (c, v) in g.into_iter().enumerate() {
                recs.push(record(&format!("expert{r}"), c, variant, v));
            }
        }
        let mean = rater_means.as_slice().mean();
        let std = rater_means.as_slice().population_std_dev();
        let got = study::report(&recs, 5, StdKind::Population).cell(variant, "IQ").unwrap().clone();
        oracle_ok &= (got.mean - mean).abs() < 1e-12 && (got.std - std).abs() < 1e-12;
    }
    let rep = study::report(&recs, 5, StdKind::Population);
    let row: Vec<String> = ["raw", "blend", "output"].iter().map(|v| rep.cell(v, "IQ").unwrap().display()).collect();
    let layout = row == ["3.0±0.8", "2.2±0.6", "2.2±0.3"];
    let latex = rep.latex_rows().lines().next() == Some(r"IQ & $3.0\pm0.8$ & $2.2\pm0.6$ & $2.2\pm0.3$ \\");

    let mut counts = [0f64; 6];
    for r in 0..10_000 {
        let o = study::ordering(2024, &format!("rater{}", r / 20), r % 20);
        counts[ORDERINGS.iter().position(|x| *x == o).unwrap()] += 1.0;
    }
    let expected = 10_000.0 / 6.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(chi2);
    ensure(
        hand && hand_sample && oracle_ok && layout && latex && p > 0.01,
        format!(
            "hand fixture: {}, oracle std: {oracle_ok}, IQ row {} / {} / {}, chi2 {chi2:.2} p = {p:.3}",
            hand && hand_sample,
            row[0],
            row[1],
            row[2]
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a").join("m.ckpt");
    let b = dir.path().join("b").join("m.ckpt");
    fs::create_dir_all(a.parent().unwrap()).unwrap();
    fs::create_dir_all(b.parent().unwrap()).unwrap();
    Checkpoint {
        model: Model::new(77),
        step: 31_337,
        config: TrainConfig { seed: 5, ..TrainConfig::default() },
        val_history: vec![0.31, 0.29, 0.1 + 0.2],
    }
    .save(&a)
    .unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    let identical = fs::read(&a).unwrap() == fs::read(&b).unwrap()
        && fs::read(checkpoint::blob_path(&a)).unwrap() == fs::read(checkpoint::blob_path(&b)).unwrap();

    let reference = Model::reference_layout();
    let mut store = ParamStore::new();
    for (n, arr) in reference.iter() {
        let arr = if n == "unet.enc1.conv1.weight" { Array::zeros(&[8, 1, 3, 3]) } else { arr.clone() };
        store.insert(n, arr);
    }
    let msg = Model::from_store(store).unwrap_err().to_string();
    let named = msg.contains("unet.enc1.conv1.weight") && msg.contains("[8, 1, 3, 3]") && msg.contains("[16, 1, 3, 3]");
    ensure(identical && named, format!("save-load-save identical: {identical}, mismatch error: {msg}"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("classical-oracle equivalence", classical_oracle),
        ("gradient suite", gradient_suite),
        ("bit-exact transforms", bit_exact_transforms),
        ("schedule and policy", schedule_and_policy),
        ("training smoke", training_smoke),
        ("transfer contract", transfer_contract),
        ("study statistics", study_statistics),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let emit = |line: String| {
        let mut out = std::io::stdout().lock();
        writeln!(out, "\n{line}").and_then(|_| out.flush()).unwrap();
    };
    let mut failures = Vec::new();
    for (name, check) in criteria {
        match check() {
            Outcome::Pass(d) => emit(format!("PASS {name}: {d}")),
            Outcome::Fail(d) => {
                emit(format!("FAIL {name}: {d}"));
                failures.push(name);
            }
            Outcome::Unverified(d) => emit(format!("FAIL {name} (unverified here): {d}")),
        }
    }
    assert!(failures.is_empty(), "failed: {failures:?}");
}
