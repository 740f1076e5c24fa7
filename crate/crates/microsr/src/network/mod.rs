//! Generator, discriminator, and feature-extractor networks.
//!
//! The engine is deliberately small: dense NHWC tensors, hand-written
//! forward/backward passes for exactly the layer types these three
//! architectures need, and a named-tensor convention (`g.`, `d.`, `f.`
//! prefixes) shared by the optimizer and the checkpoint format.

pub mod checkpoint;
pub mod discriminator;
pub mod features;
pub mod generator;
pub mod layers;
pub mod tensor;

pub use checkpoint::{CheckpointMeta, NetworkParams, TrainMeta};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use features::{FeatureConfig, FeatureNet};
pub use generator::{Generator, GeneratorConfig};
pub use layers::Grads;
pub use tensor::{pixel_shuffle, pixel_unshuffle, Scalar, Tensor4};

/// Whether batch-norm layers use batch statistics (train) or their stored
/// running statistics (eval, deterministic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Read-only visitor over named tensors: `(name, shape, data, trainable)`.
pub type TensorVisit<'a, T> = dyn FnMut(&str, &[usize], &[T], bool) + 'a;
/// Mutable visitor over named tensors: `(name, data, trainable)`.
pub type TensorVisitMut<'a, T> = dyn FnMut(&str, &mut [T], bool) + 'a;
