//! Image representation and raster I/O.
//!
//! An [`Image`] is an immutable-by-convention raster of `f32` intensities
//! normalized to `[0, 1]`, stored row-major with interleaved channels. It is
//! the currency every other module trades in: degradation, datasets,
//! inference, and metrics all consume and produce `Image` values.
//!
//! Files are read and written through the `image` crate; PNG and TIFF at 8 or
//! 16 bits, grayscale or RGB. Loading rescales integer samples to `[0, 1]` by
//! dividing by the type maximum; saving quantizes with round-half-away-from-
//! zero, so a save/load round trip moves each sample by at most one
//! quantization step.

use std::path::Path;

use crate::error::{Error, Result};

/// 2-D multi-channel raster of normalized intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    /// Physical pixel pitch in micrometers, when known.
    pub pixel_size_um: Option<f64>,
}

impl Image {
    /// Builds an image from row-major interleaved data, clamping every
    /// intensity into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage("zero-size image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels} (expected 1 or 3)"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidImage("NaN intensity".into()));
        }
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
            pixel_size_um: None,
        })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a single-channel image from a per-pixel function.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major interleaved samples.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sample with reflect-boundary indexing (mirror with edge duplication).
    #[inline]
    pub fn get_reflect(&self, y: isize, x: isize, c: usize) -> f32 {
        let yy = reflect_index(y, self.height);
        let xx = reflect_index(x, self.width);
        self.get(yy, xx, c)
    }

    /// Mean intensity over all samples.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Crops the rectangle of `h x w` pixels whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidImage(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[row..row + w * self.channels]);
        }
        let mut out = Image::new(h, w, self.channels, data)?;
        out.pixel_size_um = self.pixel_size_um;
        Ok(out)
    }

    /// Reflect-pads by `bottom` rows and `right` columns (grow-only, used to
    /// make dimensions divisible or reach a minimum tile size).
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Image {
        let nh = self.height + bottom;
        let nw = self.width + right;
        let mut data = Vec::with_capacity(nh * nw * self.channels);
        for y in 0..nh {
            for x in 0..nw {
                for c in 0..self.channels {
                    data.push(self.get_reflect(y as isize, x as isize, c));
                }
            }
        }
        let mut out = Image {
            height: nh,
            width: nw,
            channels: self.channels,
            data,
            pixel_size_um: self.pixel_size_um,
        };
        out.data.iter_mut().for_each(|v| *v = clamp_unit(*v));
        out
    }

    /// Rotates by `quarter_turns` x 90° counter-clockwise.
    pub fn rotate90(&self, quarter_turns: usize) -> Image {
        let k = quarter_turns % 4;
        let (nh, nw) = if k % 2 == 0 {
            (self.height, self.width)
        } else {
            (self.width, self.height)
        };
        let mut data = vec![0.0f32; nh * nw * self.channels];
        for y in 0..nh {
            for x in 0..nw {
                let (sy, sx) = match k {
                    0 => (y, x),
                    1 => (x, self.width - 1 - y),
                    2 => (self.height - 1 - y, self.width - 1 - x),
                    _ => (self.height - 1 - x, y),
                };
                for c in 0..self.channels {
                    data[(y * nw + x) * self.channels + c] = self.get(sy, sx, c);
                }
            }
        }
        Image {
            height: nh,
            width: nw,
            channels: self.channels,
            data,
            pixel_size_um: self.pixel_size_um,
        }
    }

    /// Mirrors left-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = vec![0.0f32; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = self.width - 1 - x;
                for c in 0..self.channels {
                    data[(y * self.width + x) * self.channels + c] = self.get(y, sx, c);
                }
            }
        }
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
            pixel_size_um: self.pixel_size_um,
        }
    }
}

/// Clamp into `[0, 1]`; idempotent.
#[inline]
pub fn clamp_unit(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Reflect an out-of-range index with edge duplication (`-1 -> 0`,
/// `n -> n - 1`), folding repeatedly for offsets past one period. This
/// half-sample symmetry keeps unit-sum symmetric kernels exactly
/// mean-preserving under convolution.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Loads a PNG or TIFF raster, rescaling integer samples to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|source| Error::ImageRead {
        path: path.into(),
        source,
    })?;
    let unsupported = |reason: &str| Error::UnsupportedRaster {
        path: path.into(),
        reason: reason.into(),
    };
    let (h, w) = (dynimg.height() as usize, dynimg.width() as usize);
    if h == 0 || w == 0 {
        return Err(unsupported("zero-size image"));
    }
    let (channels, data): (usize, Vec<f32>) = match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            (1, img.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        image::DynamicImage::ImageLuma16(img) => (
            1,
            img.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        ),
        image::DynamicImage::ImageRgb8(img) => {
            (3, img.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        image::DynamicImage::ImageRgb16(img) => (
            3,
            img.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        ),
        _ => {
            return Err(unsupported(
                "only 8/16-bit grayscale or RGB without alpha is supported",
            ))
        }
    };
    Image::new(h, w, channels, data)
}

/// Saves as PNG or TIFF (chosen by extension) at the requested bit depth.
///
/// Quantization rounds half away from zero: `q = round(v * (2^depth - 1))`.
pub fn save_image(img: &Image, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
    let path = path.as_ref();
    let w = img.width as u32;
    let h = img.height as u32;
    let write_err = |source| Error::ImageWrite {
        path: path.into(),
        source,
    };
    match (bit_depth, img.channels) {
        (8, 1) => {
            let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
            image::GrayImage::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(write_err)
        }
        (8, 3) => {
            let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
            image::RgbImage::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(write_err)
        }
        (16, 1) => {
            let raw: Vec<u16> = img
                .data
                .iter()
                .map(|&v| quantize(v, 65535.0) as u16)
                .collect();
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(write_err)
        }
        (16, 3) => {
            let raw: Vec<u16> = img
                .data
                .iter()
                .map(|&v| quantize(v, 65535.0) as u16)
                .collect();
            image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(write_err)
        }
        (d, _) => Err(Error::UnsupportedRaster {
            path: path.into(),
            reason: format!("bit depth {d} (expected 8 or 16)"),
        }),
    }
}

#[inline]
fn quantize(v: f32, max: f32) -> u32 {
    // round() is round-half-away-from-zero; input is already in [0, 1].
    (clamp_unit(v) * max).round() as u32
}
