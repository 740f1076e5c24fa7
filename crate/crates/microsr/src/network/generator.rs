//! The super-resolution generator.
//!
//! Input flows through a 3x3 convolution with ReLU, a chain of identical
//! residual blocks (conv-BN-ReLU-conv-BN plus shortcut), a global shortcut
//! adding the head features back in, then one sub-pixel convolution stage
//! per factor of two of upscaling, and a final 3x3 projection down to the
//! image channels. There are no dense layers, so a trained generator runs on
//! any input size: inference feeds it whole tiles.

use serde::{Deserialize, Serialize};

use super::layers::{
    relu, relu_backward, BatchNorm, BnCache, Conv2d, ConvCache, Grads,
};
use super::tensor::{pixel_shuffle, pixel_unshuffle, Scalar, Tensor4};
use super::{Mode, TensorVisit, TensorVisitMut};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_res_blocks: usize,
    pub n_features: usize,
    /// Power-of-two upscale factor, realized as stacked x2 sub-pixel stages.
    pub upscale: usize,
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_res_blocks: 16,
            n_features: 64,
            upscale: 4,
            channels: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.upscale) {
            return Err(Error::InvalidNetwork(format!(
                "upscale must be one of 1, 2, 4, 8; got {}",
                self.upscale
            )));
        }
        if self.n_res_blocks < 1 {
            return Err(Error::InvalidNetwork("need at least one residual block".into()));
        }
        if self.n_features < 1 {
            return Err(Error::InvalidNetwork("need at least one feature map".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidNetwork("channels must be 1 or 3".into()));
        }
        Ok(())
    }

    fn n_stages(&self) -> usize {
        self.upscale.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone)]
struct ResBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    head: Conv2d<T>,
    blocks: Vec<ResBlock<T>>,
    ups: Vec<Conv2d<T>>,
    out: Conv2d<T>,
}

struct BlockCache<T> {
    conv1: ConvCache<T>,
    bn1: BnCache<T>,
    relu1_out: Tensor4<T>,
    conv2: ConvCache<T>,
    bn2: BnCache<T>,
}

struct UpCache<T> {
    conv: ConvCache<T>,
    relu_out: Tensor4<T>,
}

/// Forward state the generator backward pass consumes.
pub struct GenCache<T> {
    head_conv: ConvCache<T>,
    head_out: Tensor4<T>,
    blocks: Vec<BlockCache<T>>,
    ups: Vec<UpCache<T>>,
    out_conv: ConvCache<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.n_features;
        let head = Conv2d::new("g.head", 3, 1, config.channels, n, seed);
        let blocks = (0..config.n_res_blocks)
            .map(|i| ResBlock {
                conv1: Conv2d::new(format!("g.res{i}.conv1"), 3, 1, n, n, seed),
                bn1: BatchNorm::new(format!("g.res{i}.bn1"), n),
                conv2: Conv2d::new(format!("g.res{i}.conv2"), 3, 1, n, n, seed),
                bn2: BatchNorm::new(format!("g.res{i}.bn2"), n),
            })
            .collect();
        let ups = (0..config.n_stages())
            .map(|j| Conv2d::new(format!("g.up{j}"), 3, 1, n, 4 * n, seed))
            .collect();
        let out = Conv2d::new("g.out", 3, 1, n, config.channels, seed);
        Ok(Generator {
            config,
            head,
            blocks,
            ups,
            out,
        })
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "generator expects {} channels, got {}",
                self.config.channels, x.c
            )));
        }
        Ok(())
    }

    /// Forward pass without caches; eval mode is deterministic and uses the
    /// batch-norm running statistics.
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        Ok(self.forward_impl(x, mode, false)?.0)
    }

    /// Train-mode forward that also returns the backward cache. Running
    /// statistics are untouched; apply [`Generator::update_running_stats`]
    /// with the returned cache to fold them in.
    pub fn forward_cached(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, GenCache<T>)> {
        let (y, cache) = self.forward_impl(x, Mode::Train, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        want_cache: bool,
    ) -> Result<(Tensor4<T>, Option<GenCache<T>>)> {
        self.check_input(x)?;
        let bn_fwd = |bn: &BatchNorm<T>, t: &Tensor4<T>| -> (Tensor4<T>, Option<BnCache<T>>) {
            match mode {
                Mode::Eval => (bn.forward_eval(t), None),
                Mode::Train => {
                    let (y, c) = bn.forward_train(t);
                    (y, Some(c))
                }
            }
        };

        let (a0, head_cache) = self.head.forward_cached(x)?;
        let h0 = relu(&a0);

        let mut t = h0.clone();
        let mut block_caches = Vec::new();
        for block in &self.blocks {
            let (c1, c1_cache) = block.conv1.forward_cached(&t)?;
            let (b1, bn1_cache) = bn_fwd(&block.bn1, &c1);
            let r1 = relu(&b1);
            let (c2, c2_cache) = block.conv2.forward_cached(&r1)?;
            let (b2, bn2_cache) = bn_fwd(&block.bn2, &c2);
            let next = t.add(&b2)?;
            if want_cache {
                block_caches.push(BlockCache {
                    conv1: c1_cache,
                    bn1: bn1_cache.expect("train mode"),
                    relu1_out: r1,
                    conv2: c2_cache,
                    bn2: bn2_cache.expect("train mode"),
                });
            }
            t = next;
        }

        let mut g = h0.add(&t)?;
        let mut up_caches = Vec::new();
        for up in &self.ups {
            let (cu, cu_cache) = up.forward_cached(&g)?;
            let shuffled = pixel_shuffle(&cu, 2)?;
            let r = relu(&shuffled);
            if want_cache {
                up_caches.push(UpCache {
                    conv: cu_cache,
                    relu_out: r.clone(),
                });
            }
            g = r;
        }

        let (y, out_cache) = self.out.forward_cached(&g)?;
        let cache = want_cache.then_some(GenCache {
            head_conv: head_cache,
            head_out: h0,
            blocks: block_caches,
            ups: up_caches,
            out_conv: out_cache,
        });
        Ok((y, cache))
    }

    /// Backpropagates `gout` through the cached forward pass, accumulating
    /// parameter gradients into `grads` and returning the input gradient.
    pub fn backward(&self, cache: &GenCache<T>, gout: &Tensor4<T>, grads: &mut Grads<T>) -> Result<Tensor4<T>> {
        let mut g = self.out.backward(&cache.out_conv, gout, grads);
        for (up, ucache) in self.ups.iter().zip(&cache.ups).rev() {
            let g_pre = relu_backward(&ucache.relu_out, &g);
            let g_unshuffled = pixel_unshuffle(&g_pre, 2)?;
            g = up.backward(&ucache.conv, &g_unshuffled, grads);
        }

        // g is the gradient at the global shortcut sum h0 + t_N.
        let mut dh0 = g.clone();
        let mut dt = g;
        for (block, bcache) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_bn2 = block.bn2.backward(&bcache.bn2, &dt, grads);
            let d_r1 = block.conv2.backward(&bcache.conv2, &d_bn2, grads);
            let d_b1 = relu_backward(&bcache.relu1_out, &d_r1);
            let d_c1 = block.bn1.backward(&bcache.bn1, &d_b1, grads);
            let d_branch_in = block.conv1.backward(&bcache.conv1, &d_c1, grads);
            dt = dt.add(&d_branch_in)?;
        }
        dh0 = dh0.add(&dt)?;

        let da0 = relu_backward(&cache.head_out, &dh0);
        Ok(self.head.backward(&cache.head_conv, &da0, grads))
    }

    /// Folds the batch statistics recorded in `cache` into every batch-norm
    /// layer's running estimates.
    pub fn update_running_stats(&mut self, cache: &GenCache<T>) {
        for (block, bcache) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.bn1.update_running_stats(&bcache.bn1);
            block.bn2.update_running_stats(&bcache.bn2);
        }
    }

    pub fn visit_tensors(&self, f: &mut TensorVisit<'_, T>) {
        visit_conv(&self.head, f);
        for b in &self.blocks {
            visit_conv(&b.conv1, f);
            visit_bn(&b.bn1, f);
            visit_conv(&b.conv2, f);
            visit_bn(&b.bn2, f);
        }
        for up in &self.ups {
            visit_conv(up, f);
        }
        visit_conv(&self.out, f);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut TensorVisitMut<'_, T>) {
        visit_conv_mut(&mut self.head, f);
        for b in &mut self.blocks {
            visit_conv_mut(&mut b.conv1, f);
            visit_bn_mut(&mut b.bn1, f);
            visit_conv_mut(&mut b.conv2, f);
            visit_bn_mut(&mut b.bn2, f);
        }
        for up in &mut self.ups {
            visit_conv_mut(up, f);
        }
        visit_conv_mut(&mut self.out, f);
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        let mut out = Generator::<U>::new(self.config, 0).expect("config already validated");
        let mut src: std::collections::BTreeMap<String, Vec<U>> = Default::default();
        self.visit_tensors(&mut |name, _shape, data, _trainable| {
            src.insert(
                name.to_string(),
                data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            );
        });
        out.visit_tensors_mut(&mut |name, data, _trainable| {
            data.copy_from_slice(&src[name]);
        });
        out
    }
}

pub(crate) fn visit_conv<T: Scalar>(conv: &Conv2d<T>, f: &mut TensorVisit<'_, T>) {
    let k = conv.kernel;
    f(
        &format!("{}.w", conv.name),
        &[k, k, conv.in_c, conv.out_c],
        &conv.weight,
        true,
    );
    f(&format!("{}.b", conv.name), &[conv.out_c], &conv.bias, true);
}

pub(crate) fn visit_conv_mut<T: Scalar>(conv: &mut Conv2d<T>, f: &mut TensorVisitMut<'_, T>) {
    f(&format!("{}.w", conv.name), &mut conv.weight, true);
    f(&format!("{}.b", conv.name), &mut conv.bias, true);
}

pub(crate) fn visit_bn<T: Scalar>(bn: &BatchNorm<T>, f: &mut TensorVisit<'_, T>) {
    let c = [bn.channels];
    f(&format!("{}.gamma", bn.name), &c, &bn.gamma, true);
    f(&format!("{}.beta", bn.name), &c, &bn.beta, true);
    f(&format!("{}.rmean", bn.name), &c, &bn.running_mean, false);
    f(&format!("{}.rvar", bn.name), &c, &bn.running_var, false);
}

pub(crate) fn visit_bn_mut<T: Scalar>(bn: &mut BatchNorm<T>, f: &mut TensorVisitMut<'_, T>) {
    f(&format!("{}.gamma", bn.name), &mut bn.gamma, true);
    f(&format!("{}.beta", bn.name), &mut bn.beta, true);
    f(&format!("{}.rmean", bn.name), &mut bn.running_mean, false);
    f(&format!("{}.rvar", bn.name), &mut bn.running_var, false);
}
