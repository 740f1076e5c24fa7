//! Image quality metrics and the evaluation harness.
//!
//! PSNR is `10 log10(1 / MSE)` on `[0, 1]` intensities, reported in dB with
//! an infinity sentinel for identical images. SSIM defaults to the 8x8
//! uniform sliding window of the original formulation (K1 = 0.01, K2 = 0.03,
//! L = 1), with an 11x11 Gaussian-weighted window available; both use biased
//! (weight-normalized) local statistics over fully interior windows. The
//! evaluation harness scores a trained generator and the plain bicubic
//! baseline against HR targets in a three-row table.

use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

use crate::dataset::PatchPair;
use crate::error::{Error, Result};
use crate::network::{Generator, Mode, Tensor4};
use crate::raster::Image;

/// Published reference scores from a full-scale microscopy deployment of
/// this pipeline family, kept to orient desk-scale results. They are not
/// reproduction targets: they depend on instrument data that is not
/// distributed with this crate, and the published baseline additionally ran
/// deconvolution after the bicubic interpolation (this crate's baseline is
/// bicubic only).
pub mod reference {
    pub const BASELINE_SSIM: f64 = 0.8093;
    pub const BASELINE_PSNR_DB: f64 = 19.6299;
    pub const NETWORK_SSIM: f64 = 0.9317;
    pub const NETWORK_PSNR_DB: f64 = 27.2610;
}

/// SSIM window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    /// 8x8 uniform sliding window.
    Uniform8,
    /// 11x11 Gaussian window, sigma 1.5.
    Gaussian11,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: SsimWindow,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the intensities.
    pub l: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: SsimWindow::Uniform8,
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l) * (self.k1 * self.l)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.l) * (self.k2 * self.l)
    }

    fn window_size(&self) -> usize {
        match self.window {
            SsimWindow::Uniform8 => 8,
            SsimWindow::Gaussian11 => 11,
        }
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::InvalidMetric(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `+inf` when the images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Mean structural similarity over all fully interior windows, averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    check_shapes(a, b)?;
    let win = cfg.window_size();
    if a.height() < win || a.width() < win {
        return Err(Error::InvalidMetric(format!(
            "image {}x{} smaller than the {win}x{win} SSIM window",
            a.height(),
            a.width()
        )));
    }
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa = channel_plane(a, c);
        let pb = channel_plane(b, c);
        total += match cfg.window {
            SsimWindow::Uniform8 => ssim_uniform(&pa, &pb, a.height(), a.width(), win, cfg),
            SsimWindow::Gaussian11 => ssim_gaussian(&pa, &pb, a.height(), a.width(), cfg),
        };
    }
    Ok(total / a.channels() as f64)
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    let ch = img.channels();
    img.data()
        .iter()
        .skip(c)
        .step_by(ch)
        .map(|&v| v as f64)
        .collect()
}

/// Summed-area table with a zero top row and left column.
fn integral(plane: &[f64], h: usize, w: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let stride = w + 1;
    let mut table = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(plane[y * w + x]);
            table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
        }
    }
    table
}

#[inline]
fn window_sum(table: &[f64], stride: usize, y: usize, x: usize, win: usize) -> f64 {
    table[(y + win) * stride + x + win] - table[y * stride + x + win]
        - table[(y + win) * stride + x]
        + table[y * stride + x]
}

fn ssim_local(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, cfg: &SsimConfig) -> f64 {
    let c1 = cfg.c1();
    let c2 = cfg.c2();
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

fn ssim_uniform(pa: &[f64], pb: &[f64], h: usize, w: usize, win: usize, cfg: &SsimConfig) -> f64 {
    let stride = w + 1;
    let ia = integral(pa, h, w, |v| v);
    let ib = integral(pb, h, w, |v| v);
    let iaa = integral(pa, h, w, |v| v * v);
    let ibb = integral(pb, h, w, |v| v * v);
    let iab_src: Vec<f64> = pa.iter().zip(pb).map(|(&x, &y)| x * y).collect();
    let iab = integral(&iab_src, h, w, |v| v);

    let n = (win * win) as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..=(h - win) {
        for x in 0..=(w - win) {
            let mu_a = window_sum(&ia, stride, y, x, win) / n;
            let mu_b = window_sum(&ib, stride, y, x, win) / n;
            let var_a = window_sum(&iaa, stride, y, x, win) / n - mu_a * mu_a;
            let var_b = window_sum(&ibb, stride, y, x, win) / n - mu_b * mu_b;
            let cov = window_sum(&iab, stride, y, x, win) / n - mu_a * mu_b;
            sum += ssim_local(mu_a, mu_b, var_a, var_b, cov, cfg);
            count += 1;
        }
    }
    sum / count as f64
}

fn gaussian_window(win: usize, sigma: f64) -> Vec<f64> {
    let r = (win / 2) as f64;
    let mut g: Vec<f64> = (0..win)
        .map(|i| (-((i as f64 - r) * (i as f64 - r)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable weighted sum with a unit-sum 1-D window.
fn weighted_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let win = g.len();
    let ow = w - win + 1;
    let oh = h - win + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_gaussian(pa: &[f64], pb: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
    let g = gaussian_window(11, 1.5);
    let paa: Vec<f64> = pa.iter().map(|&v| v * v).collect();
    let pbb: Vec<f64> = pb.iter().map(|&v| v * v).collect();
    let pab: Vec<f64> = pa.iter().zip(pb).map(|(&x, &y)| x * y).collect();
    let mu_a = weighted_valid(pa, h, w, &g);
    let mu_b = weighted_valid(pb, h, w, &g);
    let m_aa = weighted_valid(&paa, h, w, &g);
    let m_bb = weighted_valid(&pbb, h, w, &g);
    let m_ab = weighted_valid(&pab, h, w, &g);

    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let var_a = m_aa[i] - mu_a[i] * mu_a[i];
        let var_b = m_bb[i] - mu_b[i] * mu_b[i];
        let cov = m_ab[i] - mu_a[i] * mu_b[i];
        sum += ssim_local(mu_a[i], mu_b[i], var_a, var_b, cov, cfg);
    }
    sum / mu_a.len() as f64
}

/// Catmull-Rom-style cubic kernel, a = -0.5.
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * (((t - 5.0) * t + 8.0) * t - 4.0)
    } else {
        0.0
    }
}

/// Integer-factor bicubic upscaling with reflect boundary; `r = 1` is the
/// identity. Output pixel centers align with `(x + 0.5) / r - 0.5` on the
/// source grid.
pub fn bicubic_upscale(img: &Image, r: usize) -> Result<Image> {
    if r == 0 {
        return Err(Error::InvalidMetric("upscale factor must be >= 1".into()));
    }
    if r == 1 {
        return Ok(img.clone());
    }
    // Per-phase taps repeat with period r.
    let phases: Vec<(isize, [f64; 4])> = (0..r)
        .map(|p| {
            let src = (p as f64 + 0.5) / r as f64 - 0.5;
            let base = src.floor();
            let frac = src - base;
            (
                base as isize,
                [
                    cubic(frac + 1.0),
                    cubic(frac),
                    cubic(1.0 - frac),
                    cubic(2.0 - frac),
                ],
            )
        })
        .collect();

    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (oh, ow) = (h * r, w * r);
    // Horizontal pass at source height.
    let mut rows = vec![0.0f64; h * ow * c];
    for y in 0..h {
        for ox in 0..ow {
            let (base, weights) = &phases[ox % r];
            let sx = (ox / r) as isize + base;
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wk) in weights.iter().enumerate() {
                    acc += wk * img.get_reflect(y as isize, sx - 1 + k as isize, ch) as f64;
                }
                rows[(y * ow + ox) * c + ch] = acc;
            }
        }
    }
    let reflect = |i: isize, n: usize| crate::raster::reflect_index(i, n);
    let mut data = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        let (base, weights) = &phases[oy % r];
        let sy = (oy / r) as isize + base;
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wk) in weights.iter().enumerate() {
                    let yy = reflect(sy - 1 + k as isize, h);
                    acc += wk * rows[(yy * ow + ox) * c + ch];
                }
                data[(oy * ow + ox) * c + ch] = acc as f32;
            }
        }
    }
    let mut out = Image::new(oh, ow, c, data)?;
    out.pixel_size_um = img.pixel_size_um.map(|p| p / r as f64);
    Ok(out)
}

/// Scores of one method across the evaluation set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub method: String,
    pub per_sample_psnr: Vec<f64>,
    pub per_sample_ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Three-row comparison report: bicubic baseline, network, target-vs-itself.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub ssim_config: SsimConfig,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Formatted text table mirroring the three-row comparison layout.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28} {:>8} {:>10}\n", "method", "SSIM", "PSNR(dB)"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>8.4} {:>10.4}\n",
                row.method, row.mean_ssim, row.mean_psnr
            ));
        }
        out.push_str(&format!(
            "\nfull-scale published context: baseline {:.4}/{:.4} dB, network {:.4}/{:.4} dB\n",
            reference::BASELINE_SSIM,
            reference::BASELINE_PSNR_DB,
            reference::NETWORK_SSIM,
            reference::NETWORK_PSNR_DB,
        ));
        out
    }

    /// CSV with one line per method and sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,sample,psnr_db,ssim\n");
        for row in &self.rows {
            for (i, (p, s)) in row
                .per_sample_psnr
                .iter()
                .zip(&row.per_sample_ssim)
                .enumerate()
            {
                out.push_str(&format!("{},{},{},{}\n", row.method, i, p, s));
            }
            out.push_str(&format!("{},mean,{},{}\n", row.method, row.mean_psnr, row.mean_ssim));
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let txt_path = dir.join("report.txt");
        std::fs::write(&txt_path, self.text_table()).map_err(|e| Error::io(txt_path, e))?;
        let json_path = dir.join("report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(json_path, e))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores the generator and the bicubic baseline on held-out pairs.
pub fn evaluate(
    pairs: &[PatchPair],
    generator: &Generator<f32>,
    cfg: &SsimConfig,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidMetric("empty evaluation split".into()));
    }
    let factor = generator.config.upscale;
    let scored: Vec<(f64, f64, f64, f64)> = pairs
        .par_iter()
        .map(|pair| {
            let x = Tensor4::<f32>::from_images(std::slice::from_ref(&pair.lr))?;
            let sr = generator.forward(&x, Mode::Eval)?.to_images().remove(0);
            let base = bicubic_upscale(&pair.lr, factor)?;
            Ok((
                psnr(&sr, &pair.hr)?,
                ssim(&sr, &pair.hr, cfg)?,
                psnr(&base, &pair.hr)?,
                ssim(&base, &pair.hr, cfg)?,
            ))
        })
        .collect::<Result<_>>()?;

    let net_psnr: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let net_ssim: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let base_psnr: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let base_ssim: Vec<f64> = scored.iter().map(|s| s.3).collect();
    let n = pairs.len();
    Ok(EvalReport {
        rows: vec![
            EvalRow {
                method: "bicubic interpolation".into(),
                mean_psnr: mean(&base_psnr),
                mean_ssim: mean(&base_ssim),
                per_sample_psnr: base_psnr,
                per_sample_ssim: base_ssim,
            },
            EvalRow {
                method: "network reconstruction".into(),
                mean_psnr: mean(&net_psnr),
                mean_ssim: mean(&net_ssim),
                per_sample_psnr: net_psnr,
                per_sample_ssim: net_ssim,
            },
            EvalRow {
                method: "high-resolution target".into(),
                per_sample_psnr: vec![f64::INFINITY; n],
                per_sample_ssim: vec![1.0; n],
                mean_psnr: f64::INFINITY,
                mean_ssim: 1.0,
            },
        ],
        ssim_config: *cfg,
    })
}
