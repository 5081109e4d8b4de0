//! Small convolutional networks with hand-derived gradients.
//!
//! Layers are static structs holding spans into a flat [`ParamStore`].
//! Forward passes return explicit caches; backward passes accumulate into a
//! gradient buffer shaped like the store. Forward passes never mutate the
//! store: batch-norm running statistics come back as [`BnUpdate`]s for the
//! caller to commit.

pub mod discriminator;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod remunet;
pub mod tensor;

pub use discriminator::{Discriminator, DiscriminatorCache};
pub use ops::{commit_bn_updates, BnMode, BnUpdate, BN_EPS, BN_MOMENTUM};
pub use params::{adam_step, AdamConfig, ManifestEntry, ParamStore, Span};
pub use remunet::{GeneratorCache, RemUNet, RemUNetConfig, RemnantBlock};
pub use tensor::Tensor;
