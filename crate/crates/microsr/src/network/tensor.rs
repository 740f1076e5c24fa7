//! Minimal dense 4-D tensor used by the network layers.
//!
//! Layout is NHWC (batch, height, width, channels) with channels fastest,
//! which keeps the innermost convolution loops on contiguous memory. The
//! element type is generic so the same layer code runs in `f32` for training
//! and in `f64` for finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::raster::Image;

/// Float element of the network engine.
pub trait Scalar: num_traits::Float + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Batch x height x width x channels array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        assert!(b > 0 && h > 0 && w > 0 && c > 0, "empty tensor dimension");
        Tensor4 {
            b,
            h,
            w,
            c,
            data: vec![T::zero(); b * h * w * c],
        }
    }

    pub fn from_vec(b: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != b * h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match {b}x{h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Tensor4 { b, h, w, c, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.b, self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c + c
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.idx(b, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.idx(b, y, x, c);
        self.data[i] = v;
    }

    /// Contiguous channel slice at one spatial site.
    #[inline]
    pub fn site(&self, b: usize, y: usize, x: usize) -> &[T] {
        let i = self.idx(b, y, x, 0);
        &self.data[i..i + self.c]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Tensor4<T> {
        Tensor4 {
            b: self.b,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor4 {
            b: self.b,
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        })
    }

    /// Stacks images into a batch tensor.
    pub fn from_images(images: &[Image]) -> Result<Tensor4<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height(), img.width(), img.channels()) != (h, w, c) {
                return Err(Error::ShapeMismatch(
                    "images in a batch must share a shape".into(),
                ));
            }
            data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor4::from_vec(images.len(), h, w, c, data)
    }

    /// Splits the batch back into clamped images.
    pub fn to_images(&self) -> Vec<Image> {
        let plane = self.h * self.w * self.c;
        (0..self.b)
            .map(|b| {
                let data = self.data[b * plane..(b + 1) * plane]
                    .iter()
                    .map(|&v| v.to_f64() as f32)
                    .collect();
                Image::new(self.h, self.w, self.c, data).expect("valid plane")
            })
            .collect()
    }

    /// Widens/narrows the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            b: self.b,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Rearranges `r*r`-channel groups into an `r`-times larger spatial grid.
///
/// `out(b, y, x, c) = in(b, y/r, x/r, c*r^2 + (y%r)*r + (x%r))`; a pure
/// permutation, no arithmetic on the values.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    if r == 0 {
        return Err(Error::ShapeMismatch("shuffle factor must be >= 1".into()));
    }
    if x.c % (r * r) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} channels not divisible by {}^2",
            x.c, r
        )));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let oc = x.c / (r * r);
    let mut out = Tensor4::zeros(x.b, x.h * r, x.w * r, oc);
    for b in 0..x.b {
        for oy in 0..out.h {
            for ox in 0..out.w {
                for c in 0..oc {
                    let ic = c * r * r + (oy % r) * r + (ox % r);
                    let v = x.get(b, oy / r, ox / r, ic);
                    out.set(b, oy, ox, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; also the backward map for its gradients.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    if r == 0 {
        return Err(Error::ShapeMismatch("shuffle factor must be >= 1".into()));
    }
    if x.h % r != 0 || x.w % r != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} not divisible by shuffle factor {r}",
            x.h, x.w
        )));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let mut out = Tensor4::zeros(x.b, x.h / r, x.w / r, x.c * r * r);
    for b in 0..x.b {
        for oy in 0..x.h {
            for ox in 0..x.w {
                for c in 0..x.c {
                    let ic = c * r * r + (oy % r) * r + (ox % r);
                    let v = x.get(b, oy, ox, c);
                    out.set(b, oy / r, ox / r, ic, v);
                }
            }
        }
    }
    Ok(out)
}
