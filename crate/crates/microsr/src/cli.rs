//! Command-line workflow: calibrate, degrade, build-dataset, train, infer,
//! evaluate, and make-fixtures.
//!
//! Settings come from an optional TOML file (`--config`), with individual
//! flags overriding; the effective configuration is echoed next to every
//! command's outputs so any run can be replayed from its artifacts.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{build_dataset, load_source_dir, AugmentOptions, DatasetManifest, DatasetSpec, Split};
use crate::degradation::{calibrate, degrade, DegradationParams};
use crate::error::{Error, Result};
use crate::fixtures::make_fixtures;
use crate::inference::{benchmark_inference, super_resolve, GeneratorBackend, TileSettings};
use crate::metrics::evaluate;
use crate::network::NetworkParams;
use crate::raster::{load_image, save_image};
use crate::rng::SeededRng;
use crate::training::{train, TrainSetup};

#[derive(Debug, Parser)]
#[command(
    name = "microsr",
    version,
    about = "Registration-free GAN super-resolution for microscopy images"
)]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Global seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit kernel sigma and noise variance from an HR/LR measurement pair.
    Calibrate {
        /// High-resolution measurement.
        #[arg(long)]
        hr: PathBuf,
        /// Low-resolution measurement of the same field of view.
        #[arg(long)]
        lr: PathBuf,
        /// Sigma candidates, `start:end:step` or a comma list.
        #[arg(long = "sigma-grid")]
        sigma_grid: String,
        /// Variance candidates, comma list.
        #[arg(long = "var-grid")]
        var_grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the degradation model to one image.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        /// Degradation parameters: a JSON file path or inline JSON.
        #[arg(long)]
        params: Option<String>,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade HR sources and cut aligned LR/HR patch pairs.
    BuildDataset {
        /// Directory of HR source images (PNG/TIFF).
        #[arg(long = "hr-dir")]
        hr_dir: PathBuf,
        /// Degradation parameters: a JSON file path or inline JSON.
        #[arg(long)]
        params: Option<String>,
        /// LR patch side in pixels.
        #[arg(long)]
        patch: Option<usize>,
        /// Stride between LR patch origins.
        #[arg(long)]
        stride: Option<usize>,
        /// Augmentations: comma list of `rot`, `flip` (or `none`).
        #[arg(long)]
        augment: Option<String>,
        /// Fraction of source images in the training split.
        #[arg(long)]
        split: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the adversarial training loop on a built dataset.
    Train {
        /// Dataset directory (with manifest.json).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one image with a trained checkpoint, tile by tile.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tile side in LR pixels.
        #[arg(long)]
        tile: Option<usize>,
        /// Tile overlap in LR pixels.
        #[arg(long)]
        overlap: Option<usize>,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-tile timing report next to the output.
        #[arg(long)]
        benchmark: bool,
    },
    /// Score a checkpoint against the dataset's validation split.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the deterministic synthetic specimen set.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `start:end:step` (inclusive) or a comma list.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::InvalidConfig(msg);
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(format!("grid `{text}` is not start:end:step")));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("grid `{text}`: {e}")))?;
        let (start, end, step) = (nums[0], nums[1], nums[2]);
        if step <= 0.0 || end < start {
            return Err(bad(format!("grid `{text}` has a non-increasing range")));
        }
        let mut grid = Vec::new();
        let mut i = 0;
        loop {
            let v = start + step * i as f64;
            if v > end + step * 1e-9 {
                break;
            }
            grid.push(v);
            i += 1;
        }
        Ok(grid)
    } else {
        text.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("grid `{text}`: {e}")))
            })
            .collect()
    }
}

/// Accepts either a path to a JSON file or inline JSON.
fn parse_params(text: &str) -> Result<DegradationParams> {
    let json = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        std::fs::read_to_string(text).map_err(|e| Error::io(text, e))?
    };
    let params: DegradationParams = serde_json::from_str(&json)?;
    params.validate()?;
    Ok(params)
}

fn parse_augment(text: &str) -> Result<AugmentOptions> {
    let mut options = AugmentOptions::none();
    for token in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "rot" | "rotations" => options.rotations = true,
            "flip" | "flips" => options.flips = true,
            "none" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown augmentation `{other}` (expected rot, flip, none)"
                )))
            }
        }
    }
    Ok(options)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) {
    if cfg.threads > 0 {
        // A failure means a pool already exists (tests, repeated calls):
        // inference still honors the per-call thread setting.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
}

/// Runs one parsed command to completion.
pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    init_threads(&cfg);
    match cli.command {
        Command::Calibrate {
            hr,
            lr,
            sigma_grid,
            var_grid,
            out,
        } => {
            let hr_img = load_image(&hr)?;
            let lr_img = load_image(&lr)?;
            let sigmas = parse_grid(&sigma_grid)?;
            let vars = parse_grid(&var_grid)?;
            let report = calibrate(&hr_img, &lr_img, &sigmas, &vars)?;
            report.write(&out)?;
            cfg.degradation.sigma = report.best_sigma;
            cfg.degradation.noise_variance = report.best_variance;
            cfg.degradation.factor = report.factor;
            cfg.echo_into(&out)?;
            println!(
                "calibrated: sigma {} variance {:.3e} (residual variance {:.3e}, factor {})",
                report.best_sigma, report.best_variance, report.residual_variance, report.factor
            );
            println!("report: {}", out.join("report.json").display());
            Ok(())
        }
        Command::Degrade { input, params, out } => {
            let img = load_image(&input)?;
            let p = match params {
                Some(text) => parse_params(&text)?,
                None => cfg.degradation.params()?,
            };
            let mut rng = SeededRng::new(cfg.seed);
            let lr = degrade(&img, &p, &mut rng)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            save_image(&lr, &out, 16)?;
            echo_beside(&cfg, &out)?;
            println!(
                "degraded {}x{} -> {}x{} at {}",
                img.height(),
                img.width(),
                lr.height(),
                lr.width(),
                out.display()
            );
            Ok(())
        }
        Command::BuildDataset {
            hr_dir,
            params,
            patch,
            stride,
            augment,
            split,
            out,
        } => {
            let sources = load_source_dir(&hr_dir)?;
            let degradation = match params {
                Some(text) => parse_params(&text)?,
                None => cfg.degradation.params()?,
            };
            let spec = DatasetSpec {
                params: degradation,
                patch_lr: patch.unwrap_or(cfg.dataset.patch_lr),
                stride: stride.unwrap_or(cfg.dataset.stride),
                augment: match augment {
                    Some(text) => parse_augment(&text)?,
                    None => cfg.dataset.augment,
                },
                split_fraction: split.unwrap_or(cfg.dataset.split_fraction),
                seed: cfg.seed,
            };
            let manifest = build_dataset(&sources, &spec, &out)?;
            cfg.dataset.patch_lr = spec.patch_lr;
            cfg.dataset.stride = spec.stride;
            cfg.dataset.augment = spec.augment;
            cfg.dataset.split_fraction = spec.split_fraction;
            cfg.echo_into(&out)?;
            let train_n = manifest.split_records(Split::Train).count();
            let val_n = manifest.split_records(Split::Validation).count();
            println!(
                "dataset: {} pairs ({} train, {} validation) from {} sources -> {}",
                manifest.records.len(),
                train_n,
                val_n,
                sources.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            dataset,
            epochs,
            batch,
            lr,
            out,
            resume,
        } => {
            let manifest = DatasetManifest::load(&dataset)?;
            let factor = manifest.spec.params.factor;
            // The dataset fixes the geometry; derive the dependent fields.
            cfg.generator.upscale = factor;
            cfg.discriminator.input_size = manifest.spec.patch_lr * factor;
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(b) = batch {
                cfg.training.batch_size = b;
            }
            if let Some(rate) = lr {
                cfg.training.learning_rate = rate;
            }
            let setup = TrainSetup {
                train: cfg.training.to_train_config(cfg.losses, cfg.seed),
                generator: cfg.generator,
                discriminator: cfg.discriminator,
                features: cfg.features.clone(),
            };
            cfg.echo_into(&out)?;
            let summary = train(&setup, &dataset, &out, resume.as_deref())?;
            println!(
                "trained {} epochs -> {}",
                summary.epochs_run,
                summary.final_checkpoint.display()
            );
            if let Some(psnr) = summary.val_psnr_per_epoch.last() {
                println!("final validation PSNR: {psnr:.3} dB");
            }
            Ok(())
        }
        Command::Infer {
            input,
            checkpoint,
            tile,
            overlap,
            out,
            benchmark,
        } => {
            let img = load_image(&input)?;
            let (params, _, _) = NetworkParams::load(&checkpoint)?;
            let backend = GeneratorBackend {
                generator: &params.generator,
            };
            let settings = TileSettings {
                tile: tile.unwrap_or(cfg.inference.tile),
                overlap: overlap.unwrap_or(cfg.inference.overlap),
                threads: (cfg.threads > 0).then_some(cfg.threads),
                refine_shifts: cfg.inference.refine_shifts,
            };
            cfg.inference.tile = settings.tile;
            cfg.inference.overlap = settings.overlap;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            let sr = if benchmark {
                let (sr, report) = benchmark_inference(&img, &backend, &settings)?;
                let timing_path = sibling(&out, "timing.json");
                std::fs::write(&timing_path, serde_json::to_string_pretty(&report)?)
                    .map_err(|e| Error::io(&timing_path, e))?;
                println!(
                    "{} tiles, per-tile {:.2}/{:.2}/{:.2} ms (min/median/max), wall {:.1} ms",
                    report.tile_count,
                    report.tile_ms_min,
                    report.tile_ms_median,
                    report.tile_ms_max,
                    report.wall_ms
                );
                sr
            } else {
                super_resolve(&img, &backend, &settings)?
            };
            save_image(&sr, &out, 16)?;
            echo_beside(&cfg, &out)?;
            println!(
                "super-resolved {}x{} -> {}x{} at {}",
                img.height(),
                img.width(),
                sr.height(),
                sr.width(),
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            dataset,
            checkpoint,
            out,
        } => {
            let manifest = DatasetManifest::load(&dataset)?;
            let pairs = manifest.load_pairs(&dataset, Split::Validation)?;
            let (params, _, _) = NetworkParams::load(&checkpoint)?;
            let report = evaluate(&pairs, &params.generator, &cfg.metrics)?;
            report.write(&out)?;
            cfg.echo_into(&out)?;
            print!("{}", report.text_table());
            Ok(())
        }
        Command::MakeFixtures { out } => {
            let set = make_fixtures(cfg.seed, &out)?;
            cfg.echo_into(&out)?;
            println!(
                "fixtures: {} plus {} training images under {}",
                set.calibration.display(),
                set.train_images.len(),
                out.join("train").display()
            );
            Ok(())
        }
    }
}

fn sibling(out: &Path, name: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("output");
    out.with_file_name(format!("{stem}.{name}"))
}

fn echo_beside(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = sibling(out, "config_echo.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(path, e))
}

/// Entry point for the binary: parse, run, report, return the exit status.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}
