//! Tiled super-resolution of arbitrarily large images.
//!
//! The input is cut into overlapping tiles, each tile runs through the
//! generator (or a stub backend) independently, and the outputs are stitched
//! with separable distance-to-edge feather weights. Tile origins are exact
//! by construction, so stitching is purely geometric; an optional
//! cross-correlation refinement (for externally produced tiles) can nudge
//! each tile by up to two pixels before blending.
//!
//! Feathering guarantees: per output pixel the normalized weights sum to
//! one; pixels covered by a single tile carry weight exactly 1.0, so interior
//! non-overlap regions are bit-identical to the lone tile's output.

use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::network::{Generator, Mode, Tensor4};
use crate::raster::Image;

/// Tiling plan for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    /// Source dimensions before any padding.
    pub source: (usize, usize),
    /// Dimensions after reflect-padding small images up to one tile.
    pub padded: (usize, usize),
    pub tile: usize,
    pub overlap: usize,
    /// Tile origins along rows and columns (the full grid is their product).
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
}

impl TileGrid {
    /// All tile origins, row-major.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.row_origins {
            for &c in &self.col_origins {
                out.push((r, c));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn axis_origins(dim: usize, tile: usize, overlap: usize) -> Vec<usize> {
    let step = tile - overlap;
    let mut origins = Vec::new();
    let mut o = 0;
    while o + tile <= dim {
        origins.push(o);
        o += step;
    }
    let last = dim - tile;
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

/// Plans tile origins at multiples of `tile - overlap` with the final origin
/// clamped to the border. Images smaller than one tile plan a single padded
/// tile.
pub fn plan_tiles(h: usize, w: usize, tile: usize, overlap: usize) -> Result<TileGrid> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidTiling("empty image".into()));
    }
    if tile <= overlap {
        return Err(Error::InvalidTiling(format!(
            "tile {tile} must exceed overlap {overlap}"
        )));
    }
    let ph = h.max(tile);
    let pw = w.max(tile);
    Ok(TileGrid {
        source: (h, w),
        padded: (ph, pw),
        tile,
        overlap,
        row_origins: axis_origins(ph, tile, overlap),
        col_origins: axis_origins(pw, tile, overlap),
    })
}

/// Per-output-pixel accumulated blend weight.
#[derive(Debug, Clone)]
pub struct BlendMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

/// Anything that maps an LR tile to an SR tile.
pub trait TileBackend: Sync {
    fn upscale(&self) -> usize;
    fn run(&self, tile: &Image) -> Result<Image>;
}

/// The trained generator in eval mode.
pub struct GeneratorBackend<'a> {
    pub generator: &'a Generator<f32>,
}

impl TileBackend for GeneratorBackend<'_> {
    fn upscale(&self) -> usize {
        self.generator.config.upscale
    }

    fn run(&self, tile: &Image) -> Result<Image> {
        let x = Tensor4::<f32>::from_images(std::slice::from_ref(tile))?;
        Ok(self
            .generator
            .forward(&x, Mode::Eval)?
            .to_images()
            .remove(0))
    }
}

/// Identity stub: nearest-neighbor upscaling in place of the generator.
/// Stitching identical overlapping values must introduce zero error, which
/// makes this the standard backend for stitching tests.
pub struct NearestNeighborBackend {
    pub factor: usize,
}

/// Nearest-neighbor upscale of a whole image.
pub fn nearest_neighbor_upscale(img: &Image, factor: usize) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(h * w * c * factor * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            for ch in 0..c {
                data.push(img.get(y / factor, x / factor, ch));
            }
        }
    }
    let mut out = Image::new(h * factor, w * factor, c, data).expect("same data range");
    out.pixel_size_um = img.pixel_size_um.map(|p| p / factor as f64);
    out
}

impl TileBackend for NearestNeighborBackend {
    fn upscale(&self) -> usize {
        self.factor
    }

    fn run(&self, tile: &Image) -> Result<Image> {
        Ok(nearest_neighbor_upscale(tile, self.factor))
    }
}

/// Stitching settings.
#[derive(Debug, Clone)]
pub struct TileSettings {
    pub tile: usize,
    pub overlap: usize,
    /// Worker threads for per-tile inference; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Cross-correlation shift refinement (+-2 px) before blending; only
    /// useful when tiles were produced outside this pipeline.
    pub refine_shifts: bool,
}

impl Default for TileSettings {
    fn default() -> Self {
        TileSettings {
            tile: 100,
            overlap: 20,
            threads: None,
            refine_shifts: false,
        }
    }
}

/// Distance-to-edge feather profile over one tile span, in output pixels:
/// 1 at the borders, rising linearly toward the middle.
fn span_profile(len: usize) -> Vec<f64> {
    (0..len).map(|i| (i.min(len - 1 - i) + 1) as f64).collect()
}

struct AxisWeights {
    /// Per tile: normalized weight over its output span. Positions covered
    /// by a single tile normalize to exactly 1.0 (`d / d`).
    per_tile: Vec<Vec<f64>>,
}

fn axis_weights(origins: &[usize], tile_out: usize, out_len: usize) -> AxisWeights {
    let profile = span_profile(tile_out);
    let mut total = vec![0.0f64; out_len];
    for &o in origins {
        for (i, &d) in profile.iter().enumerate() {
            total[o + i] += d;
        }
    }
    let per_tile = origins
        .iter()
        .map(|&o| {
            profile
                .iter()
                .enumerate()
                .map(|(i, &d)| d / total[o + i])
                .collect()
        })
        .collect();
    AxisWeights { per_tile }
}

fn run_tiles<B: TileBackend>(
    backend: &B,
    src: &Image,
    grid: &TileGrid,
) -> Result<Vec<(usize, usize, Image)>> {
    let r = backend.upscale();
    let origins = grid.origins();
    origins
        .par_iter()
        .map(|&(oy, ox)| {
            let tile = src.crop(oy, ox, grid.tile, grid.tile)?;
            let sr = backend.run(&tile)?;
            if sr.height() != grid.tile * r || sr.width() != grid.tile * r {
                return Err(Error::InvalidTiling(format!(
                    "backend produced {}x{} for a {} tile at upscale {r}",
                    sr.height(),
                    sr.width(),
                    grid.tile
                )));
            }
            Ok((oy, ox, sr))
        })
        .collect()
}

/// Super-resolves `img` tile by tile, returning the stitched image and the
/// accumulated blend weights.
pub fn super_resolve_detailed<B: TileBackend>(
    img: &Image,
    backend: &B,
    settings: &TileSettings,
) -> Result<(Image, BlendMap)> {
    let grid = plan_tiles(img.height(), img.width(), settings.tile, settings.overlap)?;
    let r = backend.upscale();
    let (ph, pw) = grid.padded;
    let padded;
    let src = if (ph, pw) != grid.source {
        padded = img.pad_reflect(ph - img.height(), pw - img.width());
        &padded
    } else {
        img
    };

    let outputs = match settings.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidTiling(format!("thread pool: {e}")))?;
            pool.install(|| run_tiles(backend, src, &grid))?
        }
        None => run_tiles(backend, src, &grid)?,
    };

    let (oh, ow) = (ph * r, pw * r);
    let c = img.channels();
    let row_w = axis_weights(
        &grid.row_origins.iter().map(|&o| o * r).collect::<Vec<_>>(),
        grid.tile * r,
        oh,
    );
    let col_w = axis_weights(
        &grid.col_origins.iter().map(|&o| o * r).collect::<Vec<_>>(),
        grid.tile * r,
        ow,
    );

    let mut acc = vec![0.0f64; oh * ow * c];
    let mut acc_w = vec![0.0f64; oh * ow];
    // Accumulation runs sequentially in tile order so the result is
    // independent of how the parallel compute above was scheduled.
    for (oy, ox, sr) in &outputs {
        let ti = grid.row_origins.iter().position(|o| o == oy).expect("own origin");
        let tj = grid.col_origins.iter().position(|o| o == ox).expect("own origin");
        let (mut dy, mut dx) = (0isize, 0isize);
        if settings.refine_shifts {
            (dy, dx) = best_overlap_shift(&acc, &acc_w, oh, ow, c, sr, oy * r, ox * r, 2);
        }
        let y0 = (oy * r) as isize + dy;
        let x0 = (ox * r) as isize + dx;
        for ty in 0..sr.height() {
            let gy = y0 + ty as isize;
            if gy < 0 || gy >= oh as isize {
                continue;
            }
            let wy = row_w.per_tile[ti][ty];
            for tx in 0..sr.width() {
                let gx = x0 + tx as isize;
                if gx < 0 || gx >= ow as isize {
                    continue;
                }
                let w = wy * col_w.per_tile[tj][tx];
                let out_site = (gy as usize * ow + gx as usize) * c;
                for ch in 0..c {
                    acc[out_site + ch] += w * sr.get(ty, tx, ch) as f64;
                }
                acc_w[gy as usize * ow + gx as usize] += w;
            }
        }
    }

    let mut data = vec![0.0f32; oh * ow * c];
    for site in 0..oh * ow {
        let w = acc_w[site];
        for ch in 0..c {
            data[site * c + ch] = (acc[site * c + ch] / w) as f32;
        }
    }
    let mut out = Image::new(oh, ow, c, data)?;
    out.pixel_size_um = img.pixel_size_um.map(|p| p / r as f64);

    let blend = BlendMap {
        height: oh,
        width: ow,
        weights: acc_w,
    };
    if (ph, pw) != grid.source {
        out = out.crop(0, 0, img.height() * r, img.width() * r)?;
    }
    Ok((out, blend))
}

/// Super-resolves `img` tile by tile with overlap feathering.
pub fn super_resolve<B: TileBackend>(
    img: &Image,
    backend: &B,
    settings: &TileSettings,
) -> Result<Image> {
    Ok(super_resolve_detailed(img, backend, settings)?.0)
}

/// Integer shift in `[-max, max]^2` minimizing the squared difference
/// between the tile and the already-stitched canvas over their overlap.
/// Returns `(0, 0)` when nothing has been stitched yet or on ties.
fn best_overlap_shift(
    acc: &[f64],
    acc_w: &[f64],
    oh: usize,
    ow: usize,
    c: usize,
    sr: &Image,
    y0: usize,
    x0: usize,
    max: isize,
) -> (isize, isize) {
    let mut best = (0isize, 0isize);
    let mut best_score = f64::INFINITY;
    let mut shifts = vec![(0isize, 0isize)];
    for dy in -max..=max {
        for dx in -max..=max {
            if (dy, dx) != (0, 0) {
                shifts.push((dy, dx));
            }
        }
    }
    for (dy, dx) in shifts {
        let mut score = 0.0;
        let mut n = 0usize;
        for ty in 0..sr.height() {
            let gy = y0 as isize + dy + ty as isize;
            if gy < 0 || gy >= oh as isize {
                continue;
            }
            for tx in 0..sr.width() {
                let gx = x0 as isize + dx + tx as isize;
                if gx < 0 || gx >= ow as isize {
                    continue;
                }
                let site = gy as usize * ow + gx as usize;
                if acc_w[site] < 0.5 {
                    continue;
                }
                for ch in 0..c {
                    let canvas = acc[site * c + ch] / acc_w[site];
                    let d = canvas - sr.get(ty, tx, ch) as f64;
                    score += d * d;
                }
                n += 1;
            }
        }
        if n == 0 {
            return (0, 0);
        }
        score /= n as f64;
        if score < best_score {
            best_score = score;
            best = (dy, dx);
        }
    }
    best
}

/// Latency measurements of a tiled run.
#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub tile_count: usize,
    pub threads: usize,
    pub tile_ms_min: f64,
    pub tile_ms_median: f64,
    pub tile_ms_mean: f64,
    pub tile_ms_max: f64,
    pub wall_ms: f64,
}

/// Runs a tiled super-resolution while timing every tile, returning the
/// stitched image alongside the latency report.
pub fn benchmark_inference<B: TileBackend>(
    img: &Image,
    backend: &B,
    settings: &TileSettings,
) -> Result<(Image, TimingReport)> {
    struct Timed<'a, B> {
        inner: &'a B,
        samples: std::sync::Mutex<Vec<f64>>,
    }
    impl<B: TileBackend> TileBackend for Timed<'_, B> {
        fn upscale(&self) -> usize {
            self.inner.upscale()
        }
        fn run(&self, tile: &Image) -> Result<Image> {
            let start = Instant::now();
            let out = self.inner.run(tile)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            self.samples.lock().expect("timer lock").push(ms);
            Ok(out)
        }
    }

    let timed = Timed {
        inner: backend,
        samples: std::sync::Mutex::new(Vec::new()),
    };
    let wall = Instant::now();
    let out = super_resolve(img, &timed, settings)?;
    let wall_ms = wall.elapsed().as_secs_f64() * 1e3;

    let mut samples = timed.samples.into_inner().expect("timer lock");
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    Ok((
        out,
        TimingReport {
            tile_count: n,
            threads: settings.threads.unwrap_or_else(rayon::current_num_threads),
            tile_ms_min: samples[0],
            tile_ms_median: samples[n / 2],
            tile_ms_mean: samples.iter().sum::<f64>() / n as f64,
            tile_ms_max: samples[n - 1],
            wall_ms,
        },
    ))
}
