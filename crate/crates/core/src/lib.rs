//! Invisible image watermarking by optimizing an additive perturbation in
//! the frequency domain of a latent representation.
//!
//! Messages are read back as signs of projections of frozen encoder
//! features onto secret key directions, and detection uses an exact
//! binomial tail for the false-positive rate.

pub mod adapters;
pub mod attacks;
pub mod corpus;
pub mod detect;
pub mod embed;
pub mod error;
pub mod keys;
pub mod linops;
pub mod metrics;
pub mod signal;

pub use adapters::{registry, BackendKind, BackendSpec, FeatureEncoder, LatentCodec, PerceptualMetric, Registry};
pub use attacks::AttackSpec;
pub use detect::{decode, detect, Decision, DetectionReport};
pub use embed::{embed, Domain, EmbedConfig, EmbedResult};
pub use error::{Error, Result};
pub use keys::{generate_key, random_message, KeyScheme, Message, WatermarkKey};
pub use signal::{FrequencyGrid, ImageGrid, LatentGrid};
