//! Network layer primitives with explicit forward and backward passes.
//!
//! There is no general autodiff here: each layer exposes `forward` plus a
//! `backward` that consumes the cache its forward produced, and the
//! architecture modules compose them by hand. Caches hold owned copies of
//! whatever the gradient formulas need, so a forward pass never mutates the
//! layer itself; batch-norm running statistics are folded in by an explicit
//! [`BatchNorm::update_running_stats`] call from the training loop.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, splitmix64, SeededRng};

/// Named gradient buffers, keyed like the parameters they correspond to.
pub type Grads<T> = std::collections::BTreeMap<String, Vec<T>>;

/// Accumulates `add` into `grads[name]`, creating the buffer on first use.
pub fn accumulate<T: Scalar>(grads: &mut Grads<T>, name: &str, add: Vec<T>) {
    match grads.get_mut(name) {
        Some(buf) => {
            assert_eq!(buf.len(), add.len(), "gradient shape changed for {name}");
            for (b, a) in buf.iter_mut().zip(add) {
                *b = *b + a;
            }
        }
        None => {
            grads.insert(name.to_string(), add);
        }
    }
}

/// Merges `other` into `into`.
pub fn merge_grads<T: Scalar>(into: &mut Grads<T>, other: Grads<T>) {
    for (name, buf) in other {
        accumulate(into, &name, buf);
    }
}

/// He-uniform initialization stream for a named tensor.
///
/// The stream is keyed by `(seed, name)`, so adding or reordering layers
/// never changes the initial weights of the others.
fn init_rng(seed: u64, name: &str) -> SeededRng {
    SeededRng::new(splitmix64(seed ^ fnv1a(name.as_bytes())))
}

fn he_uniform<T: Scalar>(seed: u64, name: &str, fan_in: usize, n: usize) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut rng = init_rng(seed, name);
    (0..n)
        .map(|_| T::from_f64(rng.uniform_in(-limit, limit)))
        .collect()
}

/// TensorFlow-style SAME padding: output is `ceil(in / stride)` and the total
/// padding splits with the extra pixel at the bottom/right.
fn same_padding(in_dim: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = in_dim.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(in_dim);
    (out, total / 2, total - total / 2)
}

/// 2-D convolution, SAME padding, NHWC activations.
///
/// Weights are stored `[kh, kw, in_c, out_c]` with `out_c` fastest so the
/// inner accumulation runs over contiguous memory.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// What conv backward needs: the forward input.
pub struct ConvCache<T> {
    input: Tensor4<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: impl Into<String>, kernel: usize, stride: usize, in_c: usize, out_c: usize, seed: u64) -> Self {
        let name = name.into();
        let fan_in = kernel * kernel * in_c;
        let weight = he_uniform(seed, &name, fan_in, fan_in * out_c);
        Conv2d {
            name,
            kernel,
            stride,
            in_c,
            out_c,
            weight,
            bias: vec![T::zero(); out_c],
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if x.c != self.in_c {
            return Err(Error::ShapeMismatch(format!(
                "{}: input has {} channels, layer expects {}",
                self.name, x.c, self.in_c
            )));
        }
        let k = self.kernel;
        let s = self.stride;
        let (oh, pt, _) = same_padding(x.h, k, s);
        let (ow, pl, _) = same_padding(x.w, k, s);
        let mut out = Tensor4::zeros(x.b, oh, ow, self.out_c);
        let (ih, iw, ic, oc) = (x.h, x.w, x.c, self.out_c);
        let xdata = x.data();
        let row_len = ow * oc;
        out.data_mut()
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(row_idx, orow)| {
                let b = row_idx / oh;
                let oy = row_idx % oh;
                let mut acc = vec![T::zero(); oc];
                for ox in 0..ow {
                    acc.copy_from_slice(&self.bias);
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pt as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pl as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            let xoff = ((b * ih + iy as usize) * iw + ix as usize) * ic;
                            let xrow = &xdata[xoff..xoff + ic];
                            let woff = (ky * k + kx) * ic * oc;
                            for (i, &xv) in xrow.iter().enumerate() {
                                let wrow = &self.weight[woff + i * oc..woff + (i + 1) * oc];
                                for (a, &wv) in acc.iter_mut().zip(wrow) {
                                    *a = *a + xv * wv;
                                }
                            }
                        }
                    }
                    orow[ox * oc..(ox + 1) * oc].copy_from_slice(&acc);
                }
            });
        Ok(out)
    }

    pub fn forward_cached(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ConvCache<T>)> {
        let y = self.forward(x)?;
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Returns the input gradient and records `weight`/`bias` gradients.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        gout: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Tensor4<T> {
        let dx = self.backward_input(cache, gout);
        let (dw, db) = self.param_grads(cache, gout);
        accumulate(grads, &format!("{}.w", self.name), dw);
        accumulate(grads, &format!("{}.b", self.name), db);
        dx
    }

    /// Input gradient only; used by the fixed feature extractor.
    pub fn backward_input(&self, cache: &ConvCache<T>, gout: &Tensor4<T>) -> Tensor4<T> {
        let x = &cache.input;
        let k = self.kernel;
        let s = self.stride;
        let (oh, pt, _) = same_padding(x.h, k, s);
        let (ow, pl, _) = same_padding(x.w, k, s);
        debug_assert_eq!((gout.h, gout.w), (oh, ow));
        let (ih, iw, ic, oc) = (x.h, x.w, x.c, self.out_c);
        let mut dx = Tensor4::zeros(x.b, ih, iw, ic);
        let plane = ih * iw * ic;
        let gdata = gout.data();
        dx.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(b, dxb)| {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let goff = ((b * oh + oy) * ow + ox) * oc;
                        let grow = &gdata[goff..goff + oc];
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - pt as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - pl as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let doff = (iy as usize * iw + ix as usize) * ic;
                                let woff = (ky * k + kx) * ic * oc;
                                for i in 0..ic {
                                    let wrow = &self.weight[woff + i * oc..woff + (i + 1) * oc];
                                    let mut acc = T::zero();
                                    for (g, &wv) in grow.iter().zip(wrow) {
                                        acc = acc + *g * wv;
                                    }
                                    dxb[doff + i] = dxb[doff + i] + acc;
                                }
                            }
                        }
                    }
                }
            });
        dx
    }

    fn param_grads(&self, cache: &ConvCache<T>, gout: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
        let x = &cache.input;
        let k = self.kernel;
        let s = self.stride;
        let (oh, pt, _) = same_padding(x.h, k, s);
        let (ow, pl, _) = same_padding(x.w, k, s);
        let (ih, iw, ic, oc) = (x.h, x.w, x.c, self.out_c);
        let xdata = x.data();
        let gdata = gout.data();
        let mut dw = vec![T::zero(); k * k * ic * oc];
        // Each (ky, kx) tap owns a disjoint slice of dw.
        dw.par_chunks_mut(ic * oc).enumerate().for_each(|(tap, dwk)| {
            let ky = tap / k;
            let kx = tap % k;
            for b in 0..x.b {
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pt as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - pl as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let xoff = ((b * ih + iy as usize) * iw + ix as usize) * ic;
                        let goff = ((b * oh + oy) * ow + ox) * oc;
                        let grow = &gdata[goff..goff + oc];
                        for i in 0..ic {
                            let xv = xdata[xoff + i];
                            let drow = &mut dwk[i * oc..(i + 1) * oc];
                            for (d, &g) in drow.iter_mut().zip(grow) {
                                *d = *d + xv * g;
                            }
                        }
                    }
                }
            }
        });
        let mut db = vec![T::zero(); oc];
        for site in gdata.chunks_exact(oc) {
            for (d, &g) in db.iter_mut().zip(site) {
                *d = *d + g;
            }
        }
        (dw, db)
    }
}

/// Per-channel batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub name: String,
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.99,
            eps: 1e-5,
        }
    }

    /// Eval-mode pass using the stored running statistics.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut y = x.clone();
        let c = self.channels;
        let scale: Vec<T> = (0..c)
            .map(|i| self.gamma[i] / (self.running_var[i].to_f64() + self.eps).sqrt().into_scalar())
            .collect();
        for site in y.data_mut().chunks_exact_mut(c) {
            for i in 0..c {
                site[i] = (site[i] - self.running_mean[i]) * scale[i] + self.beta[i];
            }
        }
        y
    }

    /// Train-mode pass over batch statistics; does not touch running stats.
    pub fn forward_train(&self, x: &Tensor4<T>) -> (Tensor4<T>, BnCache<T>) {
        let c = self.channels;
        let n = (x.b * x.h * x.w) as f64;
        let mut mean = vec![0.0f64; c];
        for site in x.data().chunks_exact(c) {
            for i in 0..c {
                mean[i] += site[i].to_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for site in x.data().chunks_exact(c) {
            for i in 0..c {
                let d = site[i].to_f64() - mean[i];
                var[i] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);

        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v + self.eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let mut xhat = x.clone();
        for site in xhat.data_mut().chunks_exact_mut(c) {
            for i in 0..c {
                site[i] = (site[i] - mean_t[i]) * inv_std[i];
            }
        }
        let mut y = xhat.clone();
        for site in y.data_mut().chunks_exact_mut(c) {
            for i in 0..c {
                site[i] = site[i] * self.gamma[i] + self.beta[i];
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            batch_mean: mean_t,
            batch_var: var.iter().map(|&v| T::from_f64(v)).collect(),
        };
        (y, cache)
    }

    /// Folds the cached batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &BnCache<T>) {
        let m = T::from_f64(self.momentum);
        let one_minus = T::from_f64(1.0 - self.momentum);
        for i in 0..self.channels {
            self.running_mean[i] = self.running_mean[i] * m + cache.batch_mean[i] * one_minus;
            self.running_var[i] = self.running_var[i] * m + cache.batch_var[i] * one_minus;
        }
    }

    pub fn backward(
        &self,
        cache: &BnCache<T>,
        gout: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Tensor4<T> {
        let c = self.channels;
        let n = (gout.b * gout.h * gout.w) as f64;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (gsite, xsite) in gout.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
            for i in 0..c {
                dgamma[i] += gsite[i].to_f64() * xsite[i].to_f64();
                dbeta[i] += gsite[i].to_f64();
            }
        }
        // dx = gamma*inv_std/N * (N*g - sum(g) - xhat*sum(g*xhat))
        let mut dx = gout.clone();
        let nn = T::from_f64(n);
        let inv_n = T::from_f64(1.0 / n);
        for (dsite, xsite) in dx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(cache.xhat.data().chunks_exact(c))
        {
            for i in 0..c {
                let term = nn * dsite[i]
                    - T::from_f64(dbeta[i])
                    - xsite[i] * T::from_f64(dgamma[i]);
                dsite[i] = self.gamma[i] * cache.inv_std[i] * inv_n * term;
            }
        }
        accumulate(
            grads,
            &format!("{}.gamma", self.name),
            dgamma.iter().map(|&v| T::from_f64(v)).collect(),
        );
        accumulate(
            grads,
            &format!("{}.beta", self.name),
            dbeta.iter().map(|&v| T::from_f64(v)).collect(),
        );
        dx
    }
}

trait IntoScalar<T> {
    fn into_scalar(self) -> T;
}

impl<T: Scalar> IntoScalar<T> for f64 {
    fn into_scalar(self) -> T {
        T::from_f64(self)
    }
}

/// Fully connected layer over flattened activations.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[in_dim, out_dim]`, out fastest.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub struct DenseCache<T> {
    input: Vec<T>,
    batch: usize,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let name = name.into();
        let weight = he_uniform(seed, &name, in_dim, in_dim * out_dim);
        Dense {
            name,
            in_dim,
            out_dim,
            weight,
            bias: vec![T::zero(); out_dim],
        }
    }

    /// `x` is `[batch, in_dim]` flattened.
    pub fn forward(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        if x.len() != batch * self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "{}: flat input {} != {}x{}",
                self.name,
                x.len(),
                batch,
                self.in_dim
            )));
        }
        let mut out = vec![T::zero(); batch * self.out_dim];
        for b in 0..batch {
            let xrow = &x[b * self.in_dim..(b + 1) * self.in_dim];
            let orow = &mut out[b * self.out_dim..(b + 1) * self.out_dim];
            orow.copy_from_slice(&self.bias);
            for (i, &xv) in xrow.iter().enumerate() {
                let wrow = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
        Ok(out)
    }

    pub fn forward_cached(&self, x: &[T], batch: usize) -> Result<(Vec<T>, DenseCache<T>)> {
        let y = self.forward(x, batch)?;
        Ok((
            y,
            DenseCache {
                input: x.to_vec(),
                batch,
            },
        ))
    }

    pub fn backward(&self, cache: &DenseCache<T>, gout: &[T], grads: &mut Grads<T>) -> Vec<T> {
        let batch = cache.batch;
        let mut dw = vec![T::zero(); self.in_dim * self.out_dim];
        let mut db = vec![T::zero(); self.out_dim];
        let mut dx = vec![T::zero(); batch * self.in_dim];
        for b in 0..batch {
            let xrow = &cache.input[b * self.in_dim..(b + 1) * self.in_dim];
            let grow = &gout[b * self.out_dim..(b + 1) * self.out_dim];
            for (d, &g) in db.iter_mut().zip(grow) {
                *d = *d + g;
            }
            let dxrow = &mut dx[b * self.in_dim..(b + 1) * self.in_dim];
            for i in 0..self.in_dim {
                let wrow = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
                let dwrow = &mut dw[i * self.out_dim..(i + 1) * self.out_dim];
                let xv = xrow[i];
                let mut acc = T::zero();
                for o in 0..self.out_dim {
                    acc = acc + grow[o] * wrow[o];
                    dwrow[o] = dwrow[o] + xv * grow[o];
                }
                dxrow[i] = dxrow[i] + acc;
            }
        }
        accumulate(grads, &format!("{}.w", self.name), dw);
        accumulate(grads, &format!("{}.b", self.name), db);
        dx
    }
}

/// ReLU. The output doubles as the backward mask.
pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(y: &Tensor4<T>, gout: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = gout.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// LeakyReLU with negative slope `alpha`; sign of the output matches the
/// input, so the output is a sufficient backward cache.
pub fn leaky_relu<T: Scalar>(x: &Tensor4<T>, alpha: f64) -> Tensor4<T> {
    let a = T::from_f64(alpha);
    x.map(|v| if v > T::zero() { v } else { v * a })
}

pub fn leaky_relu_backward<T: Scalar>(y: &Tensor4<T>, gout: &Tensor4<T>, alpha: f64) -> Tensor4<T> {
    let a = T::from_f64(alpha);
    let mut dx = gout.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = *d * a;
        }
    }
    dx
}

/// Logistic sigmoid on a flat slice.
pub fn sigmoid<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
        .collect()
}

pub fn sigmoid_backward<T: Scalar>(y: &[T], gout: &[T]) -> Vec<T> {
    y.iter()
        .zip(gout)
        .map(|(&yv, &g)| g * yv * (T::one() - yv))
        .collect()
}

/// 2x2 max pooling with stride 2 (floor on odd inputs).
pub struct PoolCache {
    argmax: Vec<u32>,
    in_shape: (usize, usize, usize, usize),
}

pub fn max_pool2<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, PoolCache) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.b, oh, ow, x.c);
    let mut argmax = vec![0u32; out.len()];
    for b in 0..x.b {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..x.c {
                    let mut best = x.get(b, oy * 2, ox * 2, c);
                    let mut best_idx = x.idx(b, oy * 2, ox * 2, c);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x.get(b, oy * 2 + dy, ox * 2 + dx, c);
                        if v > best {
                            best = v;
                            best_idx = x.idx(b, oy * 2 + dy, ox * 2 + dx, c);
                        }
                    }
                    let o = out.idx(b, oy, ox, c);
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_shape: x.shape(),
        },
    )
}

pub fn max_pool2_backward<T: Scalar>(cache: &PoolCache, gout: &Tensor4<T>) -> Tensor4<T> {
    let (b, h, w, c) = cache.in_shape;
    let mut dx = Tensor4::zeros(b, h, w, c);
    for (i, &g) in gout.data().iter().enumerate() {
        let j = cache.argmax[i] as usize;
        dx.data_mut()[j] = dx.data_mut()[j] + g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(seed: u64, b: usize, h: usize, w: usize, c: usize) -> Tensor4<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor4::from_vec(
            b,
            h,
            w,
            c,
            (0..b * h * w * c)
                .map(|_| rng.uniform_in(-1.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Weighted-sum objective turning any output tensor into a scalar.
    fn objective(y: &[f64], coef: &[f64]) -> f64 {
        y.iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    fn coef_for(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        (0..len).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
    }

    /// Central finite difference through `f` at one mutable slot.
    fn fd(mut f: impl FnMut(f64) -> f64, at: f64) -> f64 {
        let h = 1e-6;
        (f(at + h) - f(at - h)) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel < 1e-4,
            "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (kernel, stride) in [(3usize, 1usize), (4, 2), (4, 1)] {
            let mut conv = Conv2d::<f64>::new("t", kernel, stride, 2, 3, 7);
            let x = rand_tensor(1, 2, 5, 5, 2);
            let y = conv.forward(&x).unwrap();
            let coef = coef_for(y.len(), 99);

            let (_, cache) = conv.forward_cached(&x).unwrap();
            let gout = Tensor4::from_vec(y.b, y.h, y.w, y.c, coef.clone()).unwrap();
            let mut grads = Grads::new();
            let dx = conv.backward(&cache, &gout, &mut grads);

            // A few weight entries, every bias entry, a few input entries.
            for wi in [0usize, 5, conv.weight.len() - 1] {
                let analytic = grads["t.w"][wi];
                let base = conv.weight[wi];
                let numeric = fd(
                    |v| {
                        conv.weight[wi] = v;
                        let y = conv.forward(&x).unwrap();
                        objective(y.data(), &coef)
                    },
                    base,
                );
                conv.weight[wi] = base;
                assert_close(analytic, numeric, &format!("conv w[{wi}] k{kernel}s{stride}"));
            }
            for bi in 0..conv.bias.len() {
                let analytic = grads["t.b"][bi];
                let base = conv.bias[bi];
                let numeric = fd(
                    |v| {
                        conv.bias[bi] = v;
                        let y = conv.forward(&x).unwrap();
                        objective(y.data(), &coef)
                    },
                    base,
                );
                conv.bias[bi] = base;
                assert_close(analytic, numeric, "conv bias");
            }
            for xi in [0usize, 17, x.len() - 1] {
                let analytic = dx.data()[xi];
                let mut xp = x.clone();
                let base = xp.data()[xi];
                let numeric = fd(
                    |v| {
                        xp.data_mut()[xi] = v;
                        let y = conv.forward(&xp).unwrap();
                        objective(y.data(), &coef)
                    },
                    base,
                );
                assert_close(analytic, numeric, "conv input");
            }
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        // Non-trivial scale/shift.
        bn.gamma = vec![1.3, 0.7, -0.4];
        bn.beta = vec![0.1, -0.2, 0.05];
        let x = rand_tensor(3, 2, 3, 3, 3);
        let (y, cache) = bn.forward_train(&x);
        let coef = coef_for(y.len(), 55);
        let gout = Tensor4::from_vec(y.b, y.h, y.w, y.c, coef.clone()).unwrap();
        let mut grads = Grads::new();
        let dx = bn.backward(&cache, &gout, &mut grads);

        for ci in 0..3 {
            let analytic = grads["bn.gamma"][ci];
            let base = bn.gamma[ci];
            let numeric = fd(
                |v| {
                    bn.gamma[ci] = v;
                    let (y, _) = bn.forward_train(&x);
                    objective(y.data(), &coef)
                },
                base,
            );
            bn.gamma[ci] = base;
            assert_close(analytic, numeric, "bn gamma");

            let analytic = grads["bn.beta"][ci];
            let base = bn.beta[ci];
            let numeric = fd(
                |v| {
                    bn.beta[ci] = v;
                    let (y, _) = bn.forward_train(&x);
                    objective(y.data(), &coef)
                },
                base,
            );
            bn.beta[ci] = base;
            assert_close(analytic, numeric, "bn beta");
        }
        for xi in [0usize, 13, x.len() - 1] {
            let analytic = dx.data()[xi];
            let mut xp = x.clone();
            let base = xp.data()[xi];
            let numeric = fd(
                |v| {
                    xp.data_mut()[xi] = v;
                    let (y, _) = bn.forward_train(&xp);
                    objective(y.data(), &coef)
                },
                base,
            );
            assert_close(analytic, numeric, "bn input (through batch stats)");
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let x = rand_tensor(4, 1, 4, 4, 2);
        let coef = coef_for(x.len(), 31);
        let gout = Tensor4::from_vec(x.b, x.h, x.w, x.c, coef.clone()).unwrap();

        let y = relu(&x);
        let dx = relu_backward(&y, &gout);
        for xi in [0usize, 7, 20, x.len() - 1] {
            let mut xp = x.clone();
            let base = xp.data()[xi];
            let numeric = fd(
                |v| {
                    xp.data_mut()[xi] = v;
                    objective(relu(&xp).data(), &coef)
                },
                base,
            );
            assert_close(dx.data()[xi], numeric, "relu");
        }

        let y = leaky_relu(&x, 0.2);
        let dx = leaky_relu_backward(&y, &gout, 0.2);
        for xi in [0usize, 7, 20, x.len() - 1] {
            let mut xp = x.clone();
            let base = xp.data()[xi];
            let numeric = fd(
                |v| {
                    xp.data_mut()[xi] = v;
                    objective(leaky_relu(&xp, 0.2).data(), &coef)
                },
                base,
            );
            assert_close(dx.data()[xi], numeric, "leaky relu");
        }
    }

    #[test]
    fn sigmoid_and_dense_gradients_match_finite_differences() {
        let dense = Dense::<f64>::new("d", 6, 2, 3);
        let x: Vec<f64> = coef_for(12, 8);
        let coef = coef_for(4, 9);

        let run = |dense: &Dense<f64>, x: &[f64]| {
            let y = dense.forward(x, 2).unwrap();
            objective(&sigmoid(&y), &coef)
        };

        let (y, cache) = dense.forward_cached(&x, 2).unwrap();
        let s = sigmoid(&y);
        let gs: Vec<f64> = coef.clone();
        let gy = sigmoid_backward(&s, &gs);
        let mut grads = Grads::new();
        let dx = dense.backward(&cache, &gy, &mut grads);

        for wi in [0usize, 5, 11] {
            let base = dense.weight[wi];
            let analytic = grads["d.w"][wi];
            let numeric = fd(
                |v| {
                    let mut d2 = dense.clone();
                    d2.weight[wi] = v;
                    run(&d2, &x)
                },
                base,
            );
            assert_close(analytic, numeric, "dense w");
        }
        for bi in 0..2 {
            let base = dense.bias[bi];
            let analytic = grads["d.b"][bi];
            let numeric = fd(
                |v| {
                    let mut d2 = dense.clone();
                    d2.bias[bi] = v;
                    run(&d2, &x)
                },
                base,
            );
            assert_close(analytic, numeric, "dense b");
        }
        for xi in [0usize, 6, 11] {
            let base = x[xi];
            let analytic = dx[xi];
            let numeric = fd(
                |v| {
                    let mut x2 = x.clone();
                    x2[xi] = v;
                    run(&dense, &x2)
                },
                base,
            );
            assert_close(analytic, numeric, "dense input through sigmoid");
        }
    }

    #[test]
    fn residual_add_sums_both_branch_gradients() {
        // y = x + f(x) with f a conv: dy/dx accumulates the shortcut and the
        // branch gradient. Verified against finite differences on a 2-layer
        // toy.
        let conv = Conv2d::<f64>::new("c", 3, 1, 1, 1, 5);
        let x = rand_tensor(6, 1, 3, 3, 1);
        let coef = coef_for(x.len(), 77);

        let run = |x: &Tensor4<f64>| {
            let y = conv.forward(x).unwrap().add(x).unwrap();
            objective(y.data(), &coef)
        };

        let (fx, cache) = conv.forward_cached(&x).unwrap();
        let _ = fx;
        let gout = Tensor4::from_vec(x.b, x.h, x.w, x.c, coef.clone()).unwrap();
        let mut grads = Grads::new();
        let branch = conv.backward(&cache, &gout, &mut grads);
        let dx = branch.add(&gout).unwrap();

        for xi in [0usize, 4, 8] {
            let mut xp = x.clone();
            let base = xp.data()[xi];
            let numeric = fd(
                |v| {
                    xp.data_mut()[xi] = v;
                    run(&xp)
                },
                base,
            );
            assert_close(dx.data()[xi], numeric, "residual add");
        }
    }

    #[test]
    fn shuffle_gradient_is_the_inverse_permutation() {
        use super::super::tensor::{pixel_shuffle, pixel_unshuffle};
        let x = rand_tensor(7, 2, 2, 2, 8);
        let coef = coef_for(x.len(), 41);
        let y = pixel_shuffle(&x, 2).unwrap();
        let gout = Tensor4::from_vec(y.b, y.h, y.w, y.c, coef_for(y.len(), 42)).unwrap();
        let dx = pixel_unshuffle(&gout, 2).unwrap();
        let _ = coef;
        for xi in [0usize, 9, 31] {
            let mut xp = x.clone();
            let base = xp.data()[xi];
            let numeric = fd(
                |v| {
                    xp.data_mut()[xi] = v;
                    let y = pixel_shuffle(&xp, 2).unwrap();
                    objective(y.data(), gout.data())
                },
                base,
            );
            assert_close(dx.data()[xi], numeric, "pixel shuffle");
        }
    }

    #[test]
    fn max_pool_routes_gradients_to_the_argmax() {
        let x = rand_tensor(8, 1, 4, 4, 1);
        let (y, cache) = max_pool2(&x);
        let coef = coef_for(y.len(), 17);
        let gout = Tensor4::from_vec(y.b, y.h, y.w, y.c, coef.clone()).unwrap();
        let dx = max_pool2_backward(&cache, &gout);
        for xi in 0..x.len() {
            let mut xp = x.clone();
            let base = xp.data()[xi];
            let numeric = fd(
                |v| {
                    xp.data_mut()[xi] = v;
                    let (y, _) = max_pool2(&xp);
                    objective(y.data(), &coef)
                },
                base,
            );
            assert_close(dx.data()[xi], numeric, "max pool");
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradients() {
        let conv = Conv2d::<f64>::new("z", 3, 1, 2, 2, 1);
        let x = rand_tensor(9, 1, 4, 4, 2);
        let (y, cache) = conv.forward_cached(&x).unwrap();
        let gout = Tensor4::zeros(y.b, y.h, y.w, y.c);
        let mut grads = Grads::new();
        let dx = conv.backward(&cache, &gout, &mut grads);
        assert!(grads["z.w"].iter().all(|&g| g == 0.0));
        assert!(grads["z.b"].iter().all(|&g| g == 0.0));
        assert!(dx.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn same_padding_matches_dimension_rules() {
        // 3x3 stride 1 keeps size; 4x4 stride 2 halves (ceil); 4x4 stride 1
        // keeps size with asymmetric padding.
        assert_eq!(same_padding(96, 3, 1), (96, 1, 1));
        assert_eq!(same_padding(96, 4, 2), (48, 1, 1));
        assert_eq!(same_padding(96, 4, 1), (96, 1, 2));
        assert_eq!(same_padding(5, 4, 2), (3, 1, 2));
    }
}
