use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vesselforge::checkpoint::Checkpoint;
use vesselforge::fundus::{self, SplitSpec};
use vesselforge::model::{self, Model};
use vesselforge::octa;
use vesselforge::raster::{read_bytes, window_to_u8, write_dump, write_png};
use vesselforge::study::{self, StdKind, Study};
use vesselforge::tensor::Precision;
use vesselforge::trainer::{self, Provenance, TrainConfig};
use vesselforge::{phantom, verify, Error, Result};

#[derive(Parser)]
#[command(name = "vesselforge", version, about = "Retinal vessel preprocessing pipeline", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Re-encode an original DRIVE tree (.tif / .gif) as PNG.
    ConvertDrive {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train U-Net + Frangi-Net on a converted DRIVE tree.
    Train {
        #[arg(long)]
        drive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flat key=value file overriding defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Single override, e.g. --set max_steps=1000. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Enhanced image and vessel probability map of one fundus photograph.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the trained U-Net to a directory of OCT-A projections.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Value of 8-bit code 255 for PNG / PGM inputs.
        #[arg(long, default_value_t = octa::DEFAULT_FULL_SCALE)]
        full_scale: f64,
    },
    /// Reader-study management.
    #[command(subcommand, arg_required_else_help = true)]
    Study(StudyCommand),
    /// Gradient checks and classical-oracle comparison.
    Selftest {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Write synthetic 500x500 OCT-A projections.
    SynthOcta {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic 40-case fundus tree in the converted DRIVE layout.
    SynthDrive {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Assemble a study from `transfer` output.
    Build {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        study: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the study HTTP API.
    Serve {
        #[arg(long)]
        study: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Print mean ± std per variant and aspect.
    Report {
        #[arg(long)]
        study: PathBuf,
        #[arg(long, value_enum, default_value_t = StdArg::Population)]
        std: StdArg,
        /// Print LaTeX rows instead of the text table.
        #[arg(long)]
        latex: bool,
        /// Print the full-precision report as JSON.
        #[arg(long, conflicts_with = "latex")]
        json: bool,
    },
    /// Write the grade log as CSV.
    ExportCsv {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StdArg {
    Population,
    Sample,
}

fn provenance(items: &[(&str, String, Provenance)]) {
    for (k, v, p) in items {
        eprintln!("config: {k} = {v} {p}");
    }
}

fn load_unet_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    eprintln!("checkpoint {} (step {})", path.display(), ck.step);
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ConvertDrive { src, out } => {
            let n = fundus::convert_drive(&src, &out)?;
            println!("converted {n} files into {}", out.display());
        }
        Command::Train {
            drive,
            out,
            seed,
            config,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {o:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            for line in cfg.provenance_report().lines() {
                eprintln!("config: {line}");
            }
            let split = SplitSpec::default();
            let prep = |ids: &[u32]| -> Result<Vec<_>> {
                fundus::load_ids(&drive, ids)?.iter().map(fundus::prepare).collect()
            };
            let train_set = prep(&split.train)?;
            let val_set = prep(&split.val)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            vesselforge::raster::write_atomic(&out.join("config.txt"), cfg.to_kv().as_bytes())?;
            let outcome = trainer::train(&cfg, Model::new(seed), &train_set, &val_set, &out, |l| eprintln!("{l}"))?;
            println!(
                "trained {} steps{}; best validation loss {}; checkpoint {}",
                outcome.steps,
                if outcome.stopped_early { " (early stop)" } else { "" },
                outcome.best_val_loss.map_or("n/a".into(), |v| format!("{v:.6}")),
                outcome.checkpoint.display()
            );
        }
        Command::Infer { checkpoint, image, out } => {
            provenance(&[
                ("precision", "f64".into(), Provenance::Chosen),
                ("clahe", format!("{0}x{0} tiles, clip {1}", fundus::CLAHE_TILES, fundus::CLAHE_CLIP), Provenance::Chosen),
            ]);
            let ck = load_unet_checkpoint(&checkpoint)?;
            let img = fundus::preprocess(&read_bytes(&image)?)?;
            let r = model::infer(&ck.model, &img, Precision::Double)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_png(&out.join("enhanced.png"), &window_to_u8(&r.enhanced, -1.0, 1.0))?;
            write_dump(&out.join("enhanced.vfr"), &r.enhanced)?;
            write_png(&out.join("vessel_prob.png"), &window_to_u8(&r.vessel_prob, 0.0, 1.0))?;
            write_dump(&out.join("vessel_prob.vfr"), &r.vessel_prob)?;
            println!("wrote enhanced and vessel_prob maps to {}", out.display());
        }
        Command::Transfer {
            checkpoint,
            input,
            out,
            full_scale,
        } => {
            provenance(&[
                ("threshold", octa::THRESHOLD.to_string(), Provenance::Published),
                ("offset", octa::OFFSET.to_string(), Provenance::Published),
                ("blend", "0.5 / 0.5".into(), Provenance::Published),
                ("full_scale", full_scale.to_string(), Provenance::Chosen),
                ("display window", "per-image min/max".into(), Provenance::Chosen),
            ]);
            let ck = load_unet_checkpoint(&checkpoint)?;
            let unet = ck.model.unet()?;
            let cases = octa::transfer_dir(&unet, &input, &out, full_scale, |m| {
                eprintln!(
                    "{}: saturated {:.2}%, above capillary range {:.2}%, black output {:.2}%",
                    m.id,
                    100.0 * m.saturated_fraction,
                    100.0 * m.input.above_capillary,
                    100.0 * m.output_black_fraction
                );
            })?;
            println!("exported {} cases to {}", cases.len(), out.display());
        }
        Command::Study(cmd) => study_command(cmd)?,
        Command::Selftest { seeds } => selftest(seeds)?,
        Command::SynthOcta { out, count, seed } => {
            provenance(&[("size", format!("{0}x{0}", octa::OCTA_SIZE), Provenance::Published)]);
            let paths = octa::write_synthetic(&out, count, seed)?;
            println!("wrote {} projections to {}", paths.len(), out.display());
        }
        Command::SynthDrive { out, seed } => {
            provenance(&[(
                "size",
                format!("{}x{}", fundus::DRIVE_WIDTH, fundus::DRIVE_HEIGHT),
                Provenance::Published,
            )]);
            let ids = SplitSpec::default().all();
            phantom::write_fake_drive(&out, &ids, seed)?;
            println!("wrote {} synthetic cases to {}", ids.len(), out.display());
        }
    }
    Ok(())
}

fn study_command(cmd: StudyCommand) -> Result<()> {
    let std_note = |k: StdArg| {
        provenance(&[
            (
                "std",
                match k {
                    StdArg::Population => "population".into(),
                    StdArg::Sample => "sample".into(),
                },
                Provenance::Chosen,
            ),
            ("aggregation", "per-rater mean, then across raters".into(), Provenance::Chosen),
        ])
    };
    match cmd {
        StudyCommand::Build { cases, study, seed } => {
            provenance(&[("orderings", "uniform over 6".into(), Provenance::Published)]);
            let s = Study::build(&cases, &study, seed)?;
            println!("study of {} cases at {}", s.case_count(), study.display());
        }
        StudyCommand::Serve { study, host, port } => {
            let s = Study::open(&study)?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad address {host}:{port}")))?;
            eprintln!("serving {} cases on http://{addr}", s.case_count());
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(|e| Error::Study(e.to_string()))?;
            rt.block_on(study::server::serve(s, addr))
                .map_err(|e| Error::Study(format!("server on {addr}: {e}")))?;
        }
        StudyCommand::Report { study, std, latex, json } => {
            std_note(std);
            let kind = match std {
                StdArg::Population => StdKind::Population,
                StdArg::Sample => StdKind::Sample,
            };
            let r = Study::open(&study)?.report(kind);
            if json {
                println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Error::Study(e.to_string()))?);
            } else if latex {
                print!("{}", r.latex_rows());
            } else {
                print!("{}", r.render_text());
            }
        }
        StudyCommand::ExportCsv { study, out } => {
            let n = Study::open(&study)?.export_csv(&out)?;
            println!("wrote {n} records to {}", out.display());
        }
    }
    Ok(())
}

fn selftest(seeds: u64) -> Result<()> {
    provenance(&[
        ("op tolerance", verify::OP_TOLERANCE.to_string(), Provenance::Chosen),
        ("oracle tolerance", "1e-5".into(), Provenance::Chosen),
        ("seeds", seeds.to_string(), Provenance::Chosen),
    ]);
    let checks = verify::op_gradient_suite(seeds)?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    for c in &failed {
        println!("FAIL gradient {} seed {}: {:.3e}", c.op, c.seed, c.report.max_rel_err);
    }
    println!("gradient checks: {}/{} passed", checks.len() - failed.len(), checks.len());
    let mut oracle_fail = 0;
    for seed in 0..10 {
        let d = verify::oracle_max_diff(&phantom::random_phantom(seed, 64, 64), 64, 64)?;
        if d > 1e-5 {
            oracle_fail += 1;
            println!("FAIL oracle phantom {seed}: max diff {d:.3e}");
        }
    }
    println!("oracle comparisons: {}/10 passed", 10 - oracle_fail);
    if failed.is_empty() && oracle_fail == 0 {
        Ok(())
    } else {
        Err(Error::Data(format!("{} self-test checks failed", failed.len() + oracle_fail)))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
