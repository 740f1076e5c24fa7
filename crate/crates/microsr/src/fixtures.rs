//! Deterministic synthetic specimens.
//!
//! Real microscopy data cannot ship with the crate, so every self-contained
//! workflow starts from generated stand-ins with structure at several
//! scales: multi-scale filtered-noise textures, bar targets with known line
//! periods, and blob fields that imitate stained nuclei over a smooth
//! background. Identical seeds produce byte-identical files.

use std::path::{Path, PathBuf};

use crate::degradation::{convolve_reflect, default_radius, gaussian_kernel};
use crate::error::{Error, Result};
use crate::raster::{save_image, Image};
use crate::rng::SeededRng;

/// Bar periods (in HR pixels) present in the bar-target fixture.
pub const BAR_PERIODS: [usize; 5] = [2, 3, 4, 6, 8];

fn blurred_noise(rng: &mut SeededRng, n: usize, sigma: f64) -> Vec<f32> {
    let noise = Image::new(n, n, 1, (0..n * n).map(|_| rng.uniform() as f32).collect())
        .expect("uniform draws are in range");
    let kernel = gaussian_kernel(sigma, default_radius(sigma)).expect("positive sigma");
    convolve_reflect(&noise, &kernel).data().to_vec()
}

fn normalize_to(data: &mut [f64], lo: f64, hi: f64) {
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    for v in data.iter_mut() {
        *v = lo + (hi - lo) * (*v - min) / span;
    }
}

/// Multi-scale filtered-noise texture in `[0.18, 0.82]`.
pub fn filtered_texture(seed: u64, n: usize) -> Image {
    let rng = SeededRng::new(seed);
    let fine = blurred_noise(&mut rng.split(1), n, 1.5);
    let mid = blurred_noise(&mut rng.split(2), n, 4.0);
    let coarse = blurred_noise(&mut rng.split(3), n, 10.0);
    let mut mixed: Vec<f64> = fine
        .iter()
        .zip(&mid)
        .zip(&coarse)
        .map(|((&a, &b), &c)| a as f64 + 2.0 * b as f64 + 3.0 * c as f64)
        .collect();
    normalize_to(&mut mixed, 0.18, 0.82);
    Image::new(n, n, 1, mixed.iter().map(|&v| v as f32).collect()).expect("normalized")
}

/// Blob field over a smooth background: sharp-rimmed disks (stained nuclei)
/// with a few soft spots and dark vacuoles. The workhorse calibration
/// fixture: the crisp rims carry the mid frequencies that discriminate blur
/// levels.
pub fn blob_specimen(seed: u64, n: usize) -> Image {
    let rng = SeededRng::new(seed);
    let bg_fine = blurred_noise(&mut rng.split(1), n, 6.0);
    let bg_coarse = blurred_noise(&mut rng.split(2), n, 16.0);
    let mut data: Vec<f64> = bg_fine
        .iter()
        .zip(&bg_coarse)
        .map(|(&a, &b)| a as f64 + 1.5 * b as f64)
        .collect();
    normalize_to(&mut data, 0.25, 0.45);

    let mut spots = rng.split(3);
    let count = (n * n) / 700;
    for _ in 0..count {
        let cy = spots.uniform_in(0.0, n as f64);
        let cx = spots.uniform_in(0.0, n as f64);
        let radius = spots.uniform_in(3.0, 9.0);
        let soft = spots.uniform() < 0.3;
        let mut amp = spots.uniform_in(0.18, 0.42);
        if spots.uniform() < 0.25 {
            amp *= -0.5;
        }
        let reach = (radius + 2.0).ceil() as isize;
        let (icy, icx) = (cy as isize, cx as isize);
        for dy in -reach..=reach {
            let y = icy + dy;
            if y < 0 || y >= n as isize {
                continue;
            }
            for dx in -reach..=reach {
                let x = icx + dx;
                if x < 0 || x >= n as isize {
                    continue;
                }
                let fy = y as f64 - cy;
                let fx = x as f64 - cx;
                let d = (fy * fy + fx * fx).sqrt();
                let profile = if soft {
                    (-(d * d) / (0.5 * radius * radius)).exp()
                } else {
                    // Flat disk with a one-pixel anti-aliased rim.
                    (radius - d + 0.5).clamp(0.0, 1.0)
                };
                data[y as usize * n + x as usize] += amp * profile;
            }
        }
    }
    Image::new(
        n,
        n,
        1,
        data.iter().map(|&v| v.clamp(0.12, 0.88) as f32).collect(),
    )
    .expect("clamped")
}

/// Resolution-target-style bars: the top half stacks bands of vertical bars
/// with periods [`BAR_PERIODS`], the bottom half the same bands turned to
/// horizontal bars. Fully deterministic (no randomness).
pub fn bar_target(n: usize) -> Image {
    let band = (n / 2) / BAR_PERIODS.len();
    let value = |coord: usize, period: usize| -> f32 {
        if coord % period < period.div_ceil(2) {
            0.85
        } else {
            0.15
        }
    };
    Image::from_fn(n, n, |y, x| {
        let half = n / 2;
        if y < half {
            let idx = (y / band).min(BAR_PERIODS.len() - 1);
            value(x, BAR_PERIODS[idx])
        } else {
            let idx = ((y - half) / band).min(BAR_PERIODS.len() - 1);
            value(y - half, BAR_PERIODS[idx])
        }
    })
    .expect("explicit values")
}

/// What [`make_fixtures`] wrote.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    /// 512x512 blob specimen for degradation calibration.
    pub calibration: PathBuf,
    /// 256x256 training images (textures, bars, blob fields).
    pub train_images: Vec<PathBuf>,
}

/// Writes the full fixture set as 16-bit grayscale PNGs:
/// `texture_512.png` plus eleven 256x256 images under `train/`.
pub fn make_fixtures(seed: u64, out_dir: impl AsRef<Path>) -> Result<FixtureSet> {
    let out_dir = out_dir.as_ref();
    let train_dir = out_dir.join("train");
    std::fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;

    let calibration = out_dir.join("texture_512.png");
    save_image(&blob_specimen(seed, 512), &calibration, 16)?;

    let mut train_images = Vec::new();
    let mut save_train = |name: String, img: &Image| -> Result<()> {
        let path = train_dir.join(name);
        save_image(img, &path, 16)?;
        train_images.push(path);
        Ok(())
    };
    for i in 0..6u64 {
        save_train(
            format!("tex_{i:02}.png"),
            &filtered_texture(seed.wrapping_add(11 * i + 1), 256),
        )?;
    }
    for i in 0..4u64 {
        save_train(
            format!("blobs_{i:02}.png"),
            &blob_specimen(seed.wrapping_add(101 * i + 7), 256),
        )?;
    }
    save_train("bars.png".into(), &bar_target(256))?;

    Ok(FixtureSet {
        calibration,
        train_images,
    })
}
