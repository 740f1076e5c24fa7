//! Registration-free GAN super-resolution for microscopy images.
//!
//! The pipeline trains a generator/discriminator pair on LR/HR patch pairs
//! whose LR halves are *simulated* from the HR measurements by a calibrated
//! degradation model, so the pairs share a field of view by construction.
//! A trained generator then super-resolves arbitrarily large images tile by
//! tile, and the result is scored with PSNR and SSIM against references.
//!
//! Module map:
//! - [`raster`] / [`rng`]: the `Image` currency and seeded randomness
//! - [`degradation`]: blur/downsample/noise forward model and calibration
//! - [`dataset`]: aligned patch-pair extraction and augmentation
//! - [`network`]: generator, discriminator, and fixed feature extractor
//! - [`losses`]: pixel, feature, and adversarial objectives
//! - [`training`]: the alternating optimization loop
//! - [`inference`]: overlap-tiled super-resolution of large images
//! - [`metrics`]: PSNR/SSIM and the evaluation harness
//! - [`fixtures`]: deterministic synthetic specimens for self-contained runs
//! - [`cli`]: the `microsr` command-line workflow

pub mod cli;
pub mod config;
pub mod dataset;
pub mod degradation;
pub mod error;
pub mod fixtures;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use raster::Image;
pub use rng::SeededRng;
pub use cli::run_cli;

// The guide's code fences double as doc-tests so the book cannot drift from
// the API. Each chapter mounts as one hidden doc item.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/images.md")]
    pub struct Images;
    #[doc = include_str!("../../../book/src/degradation.md")]
    pub struct Degradation;
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub struct Datasets;
    #[doc = include_str!("../../../book/src/network.md")]
    pub struct Network;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/inference.md")]
    pub struct Inference;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct CliWorkflow;
}
