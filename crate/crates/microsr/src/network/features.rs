//! Fixed feature extractor for the feature-reconstruction loss.
//!
//! A stack of 3x3 convolutions with ReLU and interspersed 2x2 max pools,
//! shaped like the first twelve convolution layers of a classic deep
//! recognition network (64-64, pool, 128-128, pool, 256x4, 512x4). The
//! weights are never trained: by default they are deterministically seeded
//! random values, which keeps the loss exercised without any external
//! download; real pretrained weights can be loaded from a checkpoint-format
//! tensor file instead.

use serde::{Deserialize, Serialize};

use super::layers::{max_pool2, max_pool2_backward, relu, relu_backward, Conv2d, ConvCache, PoolCache};
use super::tensor::{Scalar, Tensor4};
use super::{TensorVisit, TensorVisitMut};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Output width of each convolution layer, in order.
    pub widths: Vec<usize>,
    /// 1-based indices of convolutions followed by a 2x2 max pool.
    pub pools_after: Vec<usize>,
    pub channels: usize,
    /// Seed of the fixed random weights.
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            widths: vec![64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512],
            pools_after: vec![2, 4],
            channels: 1,
            seed: 0x0f0e_a7be,
        }
    }
}

impl FeatureConfig {
    /// Same layer schedule with every width divided by `divisor` (floor, at
    /// least 1); the desk-scale stand-in for small training runs.
    pub fn scaled_down(divisor: usize) -> Self {
        let base = FeatureConfig::default();
        FeatureConfig {
            widths: base.widths.iter().map(|w| (w / divisor).max(1)).collect(),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::InvalidNetwork("feature net needs layers".into()));
        }
        if self.pools_after.iter().any(|&p| p == 0 || p > self.widths.len()) {
            return Err(Error::InvalidNetwork("pool index out of range".into()));
        }
        Ok(())
    }

    /// Total spatial downscale factor (2 per pool).
    pub fn spatial_divisor(&self) -> usize {
        1 << self.pools_after.len()
    }
}

#[derive(Debug, Clone)]
pub struct FeatureNet<T> {
    pub config: FeatureConfig,
    convs: Vec<Conv2d<T>>,
}

enum StageCache<T> {
    Conv { cache: ConvCache<T>, relu_out: Tensor4<T> },
    Pool(PoolCache),
}

/// Forward state needed to push gradients back to the input.
pub struct FeatCache<T> {
    stages: Vec<StageCache<T>>,
}

impl<T: Scalar> FeatureNet<T> {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut in_c = config.channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(format!("f.conv{i}"), 3, 1, in_c, w, config.seed));
            in_c = w;
        }
        Ok(FeatureNet { config, convs })
    }

    /// Activations after the last configured convolution (post-ReLU).
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward_impl(x, false)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, FeatCache<T>)> {
        let (y, cache) = self.forward_impl(x, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        x: &Tensor4<T>,
        want_cache: bool,
    ) -> Result<(Tensor4<T>, Option<FeatCache<T>>)> {
        if x.c != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "feature net expects {} channels, got {}",
                self.config.channels, x.c
            )));
        }
        let mut t = x.clone();
        let mut stages = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let (c, conv_cache) = conv.forward_cached(&t)?;
            let r = relu(&c);
            if want_cache {
                stages.push(StageCache::Conv {
                    cache: conv_cache,
                    relu_out: r.clone(),
                });
            }
            t = r;
            if self.config.pools_after.contains(&(i + 1)) {
                let (p, pool_cache) = max_pool2(&t);
                if want_cache {
                    stages.push(StageCache::Pool(pool_cache));
                }
                t = p;
            }
        }
        Ok((t, want_cache.then_some(FeatCache { stages })))
    }

    /// Input gradient only; the extractor's own weights stay fixed.
    pub fn backward_input(&self, cache: &FeatCache<T>, gout: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = gout.clone();
        let mut conv_idx = self.convs.len();
        for stage in cache.stages.iter().rev() {
            match stage {
                StageCache::Pool(pool) => {
                    g = max_pool2_backward(pool, &g);
                }
                StageCache::Conv { cache, relu_out } => {
                    conv_idx -= 1;
                    let d_pre = relu_backward(relu_out, &g);
                    g = self.convs[conv_idx].backward_input(cache, &d_pre);
                }
            }
        }
        Ok(g)
    }

    /// One-sided receptive field extent of an output feature, in input
    /// pixels: each 3x3 conv adds one current-stride step per side, each
    /// pool adds half a step and doubles the stride.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut jump = 1usize;
        for i in 0..self.convs.len() {
            rf += 2 * jump;
            if self.config.pools_after.contains(&(i + 1)) {
                rf += jump;
                jump *= 2;
            }
        }
        rf
    }

    /// Replaces the fixed weights with tensors from a checkpoint-format file
    /// (names `f.conv<i>.w` / `f.conv<i>.b`, shapes matching this config).
    pub fn load_weights(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let tensors = super::checkpoint::read_tensor_file(path.as_ref())?;
        let mut missing = Vec::new();
        self.visit_tensors_mut(&mut |name, data, _| {
            match tensors.get(name) {
                Some((_, values)) if values.len() == data.len() => {
                    for (d, &v) in data.iter_mut().zip(values) {
                        *d = T::from_f64(v as f64);
                    }
                }
                _ => missing.push(name.to_string()),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "feature weight file is missing or mis-shapes tensors: {}",
                missing.join(", ")
            )))
        }
    }

    pub fn visit_tensors(&self, f: &mut TensorVisit<'_, T>) {
        for conv in &self.convs {
            super::generator::visit_conv(conv, f);
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut TensorVisitMut<'_, T>) {
        for conv in &mut self.convs {
            super::generator::visit_conv_mut(conv, f);
        }
    }
}
