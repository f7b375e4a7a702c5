//! The restorer (encoder, mapping network, style decoder), its
//! discriminator, and the iris classifier.

pub mod classifier;
pub mod discriminator;
pub mod encoder;
pub mod restorer;

pub use classifier::{classifier_forward, ClassifierConfig, ClassifierOutput};
pub use discriminator::{discriminator_forward, DiscriminatorConfig};
pub use encoder::{encoder_forward, EncoderConfig, EncoderOutput};
pub use restorer::{decoder_forward, mapping_forward, restore, RestorerConfig};
