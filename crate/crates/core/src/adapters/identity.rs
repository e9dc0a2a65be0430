use candle_core::Tensor;

use super::{BackendInfo, BackendKind, LatentCodec};
use crate::error::{Error, Result};

/// Latent = pixels. Latent-frequency embedding then coincides exactly with
/// pixel-frequency embedding.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }

    fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        Ok((3, height, width))
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.clone())
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(latent.clone())
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::new(BackendKind::LatentCodec, "identity")
    }

    fn is_identity(&self) -> bool {
        true
    }
}
