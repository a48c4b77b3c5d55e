//! Generator, discriminator and feature extractor built on the autograd tape.

mod checkpoint;
mod discriminator;
mod extractor;
mod generator;
mod sab;
mod weights;

pub use checkpoint::{Checkpoint, Precision, Record, RecordData, FORMAT_VERSION, MAGIC};
pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorPass};
pub use extractor::{ExtractorConfig, FeatureExtractor, IMAGENET_MEAN, IMAGENET_STD};
pub use generator::{
    lift, pad_to_multiple, Activation, Generator, GeneratorConfig, GeneratorPass, LayerKind, LayerSpec,
    INIT_STD, KERNEL, LEAKY_SLOPE,
};
pub use sab::{sab_apply, sab_param_specs, sab_pool_factor, SAB_MAX_DENSE_POSITIONS};
pub use weights::{BnUpdate, Mode, NetworkWeights, ParamKind, ParamSpec};
