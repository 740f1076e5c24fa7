//! Forward degradation model and its calibration.
//!
//! A high-resolution image is mapped to a simulated low-resolution
//! measurement in three steps: convolution with a Gaussian kernel standing in
//! for the optical point-spread function, downsampling by an integer factor
//! modelling the coarser sensor grid, and additive Gaussian white noise
//! modelling sensor statistics. Because the low-resolution image is computed
//! from the high-resolution one, the two share a field of view by
//! construction and no registration is ever needed.
//!
//! [`calibrate`] recovers the two free parameters (kernel sigma and noise
//! variance) from one real HR/LR measurement pair by grid search: first the
//! sigma whose noise-free simulation best matches the LR measurement, then
//! the variance closest to the empirical variance of the remaining residual.
//! Stage 1 compares against the raw (not de-noised) measurement: the noise
//! contributes a sigma-independent term to the squared error, so the argmin
//! stays unbiased, whereas median-filtering the measurement first makes it
//! smoother than every noise-free simulation and drags the fit toward larger
//! sigmas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{reflect_index, Image};
use crate::rng::SeededRng;

/// How the sensor grid reduction is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    /// Mean over each `factor x factor` cell (pixel integration).
    #[default]
    BlockAverage,
    /// Keep the top-left sample of each cell.
    Decimate,
}

/// Parameters of the degradation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Gaussian kernel standard deviation, in HR pixels.
    pub sigma: f64,
    /// Variance of the additive noise, in normalized intensity squared.
    pub noise_variance: f64,
    /// Integer downsampling ratio.
    pub factor: usize,
    #[serde(default)]
    pub downsample: DownsampleMode,
}

impl DegradationParams {
    pub fn new(sigma: f64, noise_variance: f64, factor: usize) -> Result<Self> {
        let p = DegradationParams {
            sigma,
            noise_variance,
            factor,
            downsample: DownsampleMode::BlockAverage,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidDegradation(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.noise_variance < 0.0 {
            return Err(Error::NegativeVariance(self.noise_variance));
        }
        if self.factor < 1 {
            return Err(Error::InvalidDegradation("factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Noise-free copy of these parameters.
    pub fn noiseless(&self) -> Self {
        DegradationParams {
            noise_variance: 0.0,
            ..*self
        }
    }
}

/// Normalized, truncated 2-D Gaussian kernel.
#[derive(Debug, Clone)]
pub struct Kernel {
    radius: usize,
    /// `(2*radius+1)^2` weights, row-major, unit sum.
    weights: Vec<f64>,
    /// Normalized 1-D profile; the 2-D weights are its outer product.
    profile: Vec<f64>,
}

impl Kernel {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// 1-D separable profile (unit sum).
    pub fn profile(&self) -> &[f64] {
        &self.profile
    }
}

/// Default truncation radius: `ceil(3 * sigma)`, at least 1.
pub fn default_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil().max(1.0) as usize
}

/// Builds the truncated Gaussian kernel, renormalized to unit sum.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Kernel> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidDegradation(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if radius < 1 {
        return Err(Error::InvalidDegradation("radius must be >= 1".into()));
    }
    let size = 2 * radius + 1;
    let mut profile = Vec::with_capacity(size);
    for i in 0..size {
        let d = i as f64 - radius as f64;
        profile.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = profile.iter().sum();
    profile.iter_mut().for_each(|w| *w /= sum);
    let mut weights = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            weights.push(profile[y] * profile[x]);
        }
    }
    Ok(Kernel {
        radius,
        weights,
        profile,
    })
}

/// Convolves with reflect boundary handling.
///
/// The Gaussian separates into a horizontal and a vertical pass, which is
/// what makes whole-image degradation cheap; the result is identical to the
/// full 2-D convolution because reflect padding acts per axis.
pub fn convolve_reflect(img: &Image, kernel: &Kernel) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let radius = kernel.radius() as isize;
    let profile = kernel.profile();

    // Horizontal pass.
    let mut tmp = vec![0.0f32; h * w * c];
    tmp.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (k, &wk) in profile.iter().enumerate() {
                    let sx = x as isize + k as isize - radius;
                    acc += wk * img.get_reflect(y as isize, sx, ch) as f64;
                }
                row[x * c + ch] = acc as f32;
            }
        }
    });

    // Vertical pass over the horizontal result.
    let mut out = vec![0.0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (k, &wk) in profile.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - radius, h);
                    acc += wk * tmp[(sy * w + x) * c + ch] as f64;
                }
                row[x * c + ch] = acc as f32;
            }
        }
    });

    let mut res = Image::new(h, w, c, out).expect("same shape as input");
    res.pixel_size_um = img.pixel_size_um;
    res
}

fn block_average(img: &Image, factor: usize) -> Image {
    let (h, w, c) = (img.height() / factor, img.width() / factor, img.channels());
    let norm = 1.0 / (factor * factor) as f64;
    let mut data = vec![0.0f32; h * w * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.get(y * factor + dy, x * factor + dx, ch) as f64;
                    }
                }
                row[x * c + ch] = (acc * norm) as f32;
            }
        }
    });
    Image::new(h, w, c, data).expect("divisible dims")
}

fn decimate(img: &Image, factor: usize) -> Image {
    let (h, w, c) = (img.height() / factor, img.width() / factor, img.channels());
    let mut data = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(y * w + x) * c + ch] = img.get(y * factor, x * factor, ch);
            }
        }
    }
    Image::new(h, w, c, data).expect("divisible dims")
}

/// Applies the full degradation pipeline: blur, downsample, noise, clamp.
///
/// Output dimensions are `ceil(input / factor)`; inputs not divisible by the
/// factor are reflect-padded before blurring so the last LR row and column
/// still average real content.
pub fn degrade(img: &Image, params: &DegradationParams, rng: &mut SeededRng) -> Result<Image> {
    params.validate()?;
    let f = params.factor;
    let pad_b = (f - img.height() % f) % f;
    let pad_r = (f - img.width() % f) % f;
    let padded;
    let src = if pad_b > 0 || pad_r > 0 {
        padded = img.pad_reflect(pad_b, pad_r);
        &padded
    } else {
        img
    };

    let kernel = gaussian_kernel(params.sigma, default_radius(params.sigma))?;
    let blurred = convolve_reflect(src, &kernel);
    let lr = match params.downsample {
        DownsampleMode::BlockAverage => block_average(&blurred, f),
        DownsampleMode::Decimate => decimate(&blurred, f),
    };

    let mut data = lr.data().to_vec();
    if params.noise_variance > 0.0 {
        for v in &mut data {
            *v = (*v as f64 + rng.gaussian(0.0, params.noise_variance)?) as f32;
        }
    }
    let mut out = Image::new(lr.height(), lr.width(), lr.channels(), data)?;
    out.pixel_size_um = img.pixel_size_um.map(|p| p * f as f64);
    Ok(out)
}

/// Median filter with reflect boundary, per channel.
pub fn denoise(img: &Image, window: usize) -> Result<Image> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidDegradation(format!(
            "median window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = (window / 2) as isize;
    let mid = (window * window) / 2;
    let mut data = vec![0.0f32; h * w * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        let mut scratch = Vec::with_capacity(window * window);
        for x in 0..w {
            for ch in 0..c {
                scratch.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        scratch.push(img.get_reflect(y as isize + dy, x as isize + dx, ch));
                    }
                }
                let (_, m, _) = scratch.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                row[x * c + ch] = *m;
            }
        }
    });
    let mut out = Image::new(h, w, c, data)?;
    out.pixel_size_um = img.pixel_size_um;
    Ok(out)
}

/// Result of the two-stage parameter search.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub best_sigma: f64,
    pub best_variance: f64,
    /// Empirical variance of the residual after blur/downsample matching.
    pub residual_variance: f64,
    /// Downsampling factor inferred from the HR/LR size ratio.
    pub factor: usize,
    pub sigma_grid: Vec<f64>,
    /// Stage-1 objective: MSE between the LR measurement and each noise-free
    /// simulation (the measurement noise adds a constant floor).
    pub sigma_objectives: Vec<f64>,
    pub var_grid: Vec<f64>,
    /// Stage-2 objective: distance of each candidate to the residual variance.
    pub var_objectives: Vec<f64>,
    /// Signed residual (measurement minus simulation), kept for inspection.
    #[serde(skip)]
    pub residual: Vec<f32>,
    #[serde(skip)]
    pub residual_dims: (usize, usize, usize),
}

impl CalibrationReport {
    /// Residual remapped to `[0, 1]` for viewing: 0.5 is a zero residual.
    pub fn residual_image(&self) -> Result<Image> {
        let (h, w, c) = self.residual_dims;
        let data = self.residual.iter().map(|&r| 0.5 + 0.5 * r).collect();
        Image::new(h, w, c, data)
    }

    /// Writes `report.json` and `residual.png` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        let path = dir.join("report.json");
        std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
        crate::raster::save_image(&self.residual_image()?, dir.join("residual.png"), 16)
    }
}

fn mean_sq_diff(a: &Image, b: &Image) -> f64 {
    debug_assert_eq!(a.data().len(), b.data().len());
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        // Strict comparison keeps the lowest index on ties.
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Fits kernel sigma and noise variance so that simulated LR images match a
/// real LR measurement of the same field of view.
pub fn calibrate(
    hr: &Image,
    lr_real: &Image,
    sigma_grid: &[f64],
    var_grid: &[f64],
) -> Result<CalibrationReport> {
    if sigma_grid.is_empty() || var_grid.is_empty() {
        return Err(Error::Calibration("empty search grid".into()));
    }
    if hr.channels() != lr_real.channels() {
        return Err(Error::Calibration("channel count mismatch".into()));
    }
    if hr.height() % lr_real.height() != 0
        || hr.width() % lr_real.width() != 0
        || hr.height() / lr_real.height() != hr.width() / lr_real.width()
    {
        return Err(Error::Calibration(format!(
            "HR {}x{} is not an integer multiple of LR {}x{}",
            hr.height(),
            hr.width(),
            lr_real.height(),
            lr_real.width()
        )));
    }
    let factor = hr.height() / lr_real.height();

    // Stage 1: sigma by direct MSE against the measurement. Grid points are
    // independent; evaluate in parallel, keep grid order for tie-breaking.
    let sigma_objectives: Vec<f64> = sigma_grid
        .par_iter()
        .map(|&sigma| {
            let params = DegradationParams::new(sigma, 0.0, factor)?;
            let sim = degrade(hr, &params, &mut SeededRng::new(0))?;
            Ok(mean_sq_diff(lr_real, &sim))
        })
        .collect::<Result<_>>()?;
    let best_sigma = sigma_grid[argmin(&sigma_objectives)];

    // Stage 2: the residual of the best noise-free simulation should be the
    // sensor noise itself; pick the candidate variance closest to it.
    let params = DegradationParams::new(best_sigma, 0.0, factor)?;
    let sim = degrade(hr, &params, &mut SeededRng::new(0))?;
    let residual: Vec<f32> = lr_real
        .data()
        .iter()
        .zip(sim.data())
        .map(|(&m, &s)| m - s)
        .collect();
    let n = residual.len() as f64;
    let mean = residual.iter().map(|&r| r as f64).sum::<f64>() / n;
    let residual_variance = residual
        .iter()
        .map(|&r| {
            let d = r as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let var_objectives: Vec<f64> = var_grid
        .iter()
        .map(|&v| (v - residual_variance).abs())
        .collect();
    let best_variance = var_grid[argmin(&var_objectives)];

    Ok(CalibrationReport {
        best_sigma,
        best_variance,
        residual_variance,
        factor,
        sigma_grid: sigma_grid.to_vec(),
        sigma_objectives,
        var_grid: var_grid.to_vec(),
        var_objectives,
        residual,
        residual_dims: (lr_real.height(), lr_real.width(), lr_real.channels()),
    })
}
