//! The real-vs-reconstruction discriminator.
//!
//! Eight 4x4 convolutions walk the feature count up from the base width to
//! 32x the base and back down to 8x, with stride 2 exactly on the layers that
//! double the features (layers 2 through 6), batch norm everywhere except the
//! first layer, and LeakyReLU(0.2) activations. A three-convolution residual
//! block with an identity shortcut follows, then the maps are flattened into
//! a single dense unit with a sigmoid, yielding one probability per batch
//! item, strictly inside (0, 1).

use serde::{Deserialize, Serialize};

use super::generator::{visit_bn, visit_bn_mut, visit_conv, visit_conv_mut};
use super::layers::{
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, BatchNorm, BnCache, Conv2d,
    ConvCache, Dense, DenseCache, Grads,
};
use super::tensor::{Scalar, Tensor4};
use super::{Mode, TensorVisit, TensorVisitMut};
use crate::error::{Error, Result};

/// Channel multipliers of the eight conv layers relative to `base_features`.
const WIDTH_SCHEDULE: [usize; 8] = [1, 2, 4, 8, 16, 32, 16, 8];
/// Stride 2 wherever the width doubles with respect to the previous layer.
const STRIDES: [usize; 8] = [1, 2, 2, 2, 2, 2, 1, 1];
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Width of the first layer; the paper-scale value is 64 (peaking at 2048).
    pub base_features: usize,
    /// Fixed spatial input size (HR patch side).
    pub input_size: usize,
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_features: 64,
            input_size: 384,
            channels: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_features < 1 {
            return Err(Error::InvalidNetwork("base_features must be >= 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidNetwork("channels must be 1 or 3".into()));
        }
        if self.spatial_after_convs() == 0 {
            return Err(Error::InvalidNetwork(format!(
                "input size {} collapses before the dense layer",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Absolute feature counts of the eight conv layers.
    pub fn feature_schedule(&self) -> Vec<usize> {
        WIDTH_SCHEDULE.iter().map(|m| m * self.base_features).collect()
    }

    /// Spatial side after the conv stack (five stride-2 halvings, ceil).
    pub fn spatial_after_convs(&self) -> usize {
        STRIDES
            .iter()
            .fold(self.input_size, |s, &stride| s.div_ceil(stride))
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    convs: Vec<(Conv2d<T>, Option<BatchNorm<T>>)>,
    res: Vec<(Conv2d<T>, BatchNorm<T>)>,
    dense: Dense<T>,
}

struct ConvStageCache<T> {
    conv: ConvCache<T>,
    bn: Option<BnCache<T>>,
    act_out: Tensor4<T>,
}

/// Forward state for the discriminator backward pass.
pub struct DiscCache<T> {
    stages: Vec<ConvStageCache<T>>,
    res: Vec<ConvStageCache<T>>,
    dense: DenseCache<T>,
    probs: Vec<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = config.feature_schedule();
        let mut convs = Vec::new();
        let mut in_c = config.channels;
        for (i, (&w, &s)) in widths.iter().zip(&STRIDES).enumerate() {
            let conv = Conv2d::new(format!("d.conv{i}"), 4, s, in_c, w, seed);
            // The first layer runs without batch normalization.
            let bn = (i > 0).then(|| BatchNorm::new(format!("d.bn{i}"), w));
            convs.push((conv, bn));
            in_c = w;
        }
        let res_width = *widths.last().expect("eight layers");
        let res = (0..3)
            .map(|i| {
                (
                    Conv2d::new(format!("d.res.conv{i}"), 3, 1, res_width, res_width, seed),
                    BatchNorm::new(format!("d.res.bn{i}"), res_width),
                )
            })
            .collect();
        let side = config.spatial_after_convs();
        let dense = Dense::new("d.dense", side * side * res_width, 1, seed);
        Ok(Discriminator {
            config,
            convs,
            res,
            dense,
        })
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.h != self.config.input_size || x.w != self.config.input_size {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {0}x{0} input, got {1}x{2}",
                self.config.input_size, x.h, x.w
            )));
        }
        if x.c != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} channels, got {}",
                self.config.channels, x.c
            )));
        }
        Ok(())
    }

    /// Probability per batch item that the input is a real measurement.
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<Vec<T>> {
        Ok(self.forward_impl(x, mode, false)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor4<T>) -> Result<(Vec<T>, DiscCache<T>)> {
        let (p, cache) = self.forward_impl(x, Mode::Train, true)?;
        Ok((p, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        want_cache: bool,
    ) -> Result<(Vec<T>, Option<DiscCache<T>>)> {
        self.check_input(x)?;
        let bn_fwd = |bn: &BatchNorm<T>, t: &Tensor4<T>| match mode {
            Mode::Eval => (bn.forward_eval(t), None),
            Mode::Train => {
                let (y, c) = bn.forward_train(t);
                (y, Some(c))
            }
        };

        let mut t = x.clone();
        let mut stages = Vec::new();
        for (conv, bn) in &self.convs {
            let (c, conv_cache) = conv.forward_cached(&t)?;
            let (pre_act, bn_cache) = match bn {
                Some(bn) => bn_fwd(bn, &c),
                None => (c, None),
            };
            let act = leaky_relu(&pre_act, LEAKY_SLOPE);
            if want_cache {
                stages.push(ConvStageCache {
                    conv: conv_cache,
                    bn: bn_cache,
                    act_out: act.clone(),
                });
            }
            t = act;
        }

        let res_in = t.clone();
        let mut res_caches = Vec::new();
        for (conv, bn) in &self.res {
            let (c, conv_cache) = conv.forward_cached(&t)?;
            let (pre_act, bn_cache) = bn_fwd(bn, &c);
            let act = leaky_relu(&pre_act, LEAKY_SLOPE);
            if want_cache {
                res_caches.push(ConvStageCache {
                    conv: conv_cache,
                    bn: bn_cache,
                    act_out: act.clone(),
                });
            }
            t = act;
        }
        let t = t.add(&res_in)?;

        let (logits, dense_cache) = self.dense.forward_cached(t.data(), t.b)?;
        let probs = sigmoid(&logits);
        let cache = want_cache.then(|| DiscCache {
            stages,
            res: res_caches,
            dense: dense_cache,
            probs: probs.clone(),
        });
        Ok((probs, cache))
    }

    /// Backpropagates gradients with respect to the output probabilities,
    /// accumulating parameter gradients and returning the input gradient.
    pub fn backward(
        &self,
        cache: &DiscCache<T>,
        dprobs: &[T],
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let dlogits = sigmoid_backward(&cache.probs, dprobs);
        let dflat = self.dense.backward(&cache.dense, &dlogits, grads);

        let side = self.config.spatial_after_convs();
        let width = *self.config.feature_schedule().last().expect("eight layers");
        let batch = cache.probs.len();
        let mut g = Tensor4::from_vec(batch, side, side, width, dflat)?;

        // Residual block: the shortcut passes the sum gradient straight
        // through, the conv chain adds its own contribution.
        let shortcut = g.clone();
        for ((conv, bn), scache) in self.res.iter().zip(&cache.res).rev() {
            let d_pre = leaky_relu_backward(&scache.act_out, &g, LEAKY_SLOPE);
            let d_conv = bn.backward(scache.bn.as_ref().expect("res bn"), &d_pre, grads);
            g = conv.backward(&scache.conv, &d_conv, grads);
        }
        g = g.add(&shortcut)?;

        for ((conv, bn), scache) in self.convs.iter().zip(&cache.stages).rev() {
            let d_pre = leaky_relu_backward(&scache.act_out, &g, LEAKY_SLOPE);
            let d_conv = match (bn, &scache.bn) {
                (Some(bn), Some(bn_cache)) => bn.backward(bn_cache, &d_pre, grads),
                _ => d_pre,
            };
            g = conv.backward(&scache.conv, &d_conv, grads);
        }
        Ok(g)
    }

    pub fn update_running_stats(&mut self, cache: &DiscCache<T>) {
        for ((_, bn), scache) in self.convs.iter_mut().zip(&cache.stages) {
            if let (Some(bn), Some(bn_cache)) = (bn, &scache.bn) {
                bn.update_running_stats(bn_cache);
            }
        }
        for ((_, bn), scache) in self.res.iter_mut().zip(&cache.res) {
            if let Some(bn_cache) = &scache.bn {
                bn.update_running_stats(bn_cache);
            }
        }
    }

    pub fn visit_tensors(&self, f: &mut TensorVisit<'_, T>) {
        for (conv, bn) in &self.convs {
            visit_conv(conv, f);
            if let Some(bn) = bn {
                visit_bn(bn, f);
            }
        }
        for (conv, bn) in &self.res {
            visit_conv(conv, f);
            visit_bn(bn, f);
        }
        f(
            &format!("{}.w", self.dense.name),
            &[self.dense.in_dim, self.dense.out_dim],
            &self.dense.weight,
            true,
        );
        f(
            &format!("{}.b", self.dense.name),
            &[self.dense.out_dim],
            &self.dense.bias,
            true,
        );
    }

    pub fn visit_tensors_mut(&mut self, f: &mut TensorVisitMut<'_, T>) {
        for (conv, bn) in &mut self.convs {
            visit_conv_mut(conv, f);
            if let Some(bn) = bn {
                visit_bn_mut(bn, f);
            }
        }
        for (conv, bn) in &mut self.res {
            visit_conv_mut(conv, f);
            visit_bn_mut(bn, f);
        }
        f(&format!("{}.w", self.dense.name), &mut self.dense.weight, true);
        f(&format!("{}.b", self.dense.name), &mut self.dense.bias, true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_input(seed: u64, b: usize, n: usize) -> Tensor4<f32> {
        let mut rng = SeededRng::new(seed);
        Tensor4::from_vec(b, n, n, 1, (0..b * n * n).map(|_| rng.uniform() as f32).collect())
            .unwrap()
    }

    #[test]
    fn paper_scale_dimension_trace() {
        // 384 input through five stride-2 layers lands at 12x12.
        let config = DiscriminatorConfig::default();
        assert_eq!(config.spatial_after_convs(), 12);
        assert_eq!(
            config.feature_schedule(),
            vec![64, 128, 256, 512, 1024, 2048, 1024, 512]
        );
    }

    #[test]
    fn outputs_are_probabilities() {
        let config = DiscriminatorConfig {
            base_features: 4,
            input_size: 32,
            channels: 1,
        };
        let d = Discriminator::<f32>::new(config, 5).unwrap();
        let x = rand_input(1, 3, 32);
        let p = d.forward(&x, Mode::Train).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let config = DiscriminatorConfig {
            base_features: 4,
            input_size: 16,
            channels: 1,
        };
        let d = Discriminator::<f32>::new(config, 5).unwrap();
        let x = rand_input(2, 2, 16);
        let a = d.forward(&x, Mode::Eval).unwrap();
        let b = d.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let config = DiscriminatorConfig {
            base_features: 4,
            input_size: 32,
            channels: 1,
        };
        let d = Discriminator::<f32>::new(config, 5).unwrap();
        let x = rand_input(1, 1, 16);
        assert!(d.forward(&x, Mode::Eval).is_err());
    }
}
