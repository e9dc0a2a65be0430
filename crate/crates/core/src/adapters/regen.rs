use std::sync::Arc;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BackendInfo, BackendKind, LatentCodec, RegenerationBackend};
use crate::error::{Error, Result};
use crate::linops;
use crate::signal::{device, ImageGrid};

/// Round trip through a latent codec. The desk codec has a single quality
/// level, so `strength` is accepted but does not change the output.
pub struct CodecRegeneration {
    codec: Arc<dyn LatentCodec>,
}

impl CodecRegeneration {
    pub fn new(codec: Arc<dyn LatentCodec>) -> Self {
        Self { codec }
    }
}

impl RegenerationBackend for CodecRegeneration {
    fn name(&self) -> &str {
        self.codec.name()
    }

    fn regenerate(&self, image: &ImageGrid, _strength: f64, _seed: u64) -> Result<ImageGrid> {
        let latent = self.codec.encode_grid(image)?;
        self.codec.decode_grid(&latent)?.clamped()
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::new(BackendKind::Regeneration, self.codec.name())
            .with("codec", self.codec.info().details.get("provenance").cloned().unwrap_or_default())
            .with("quality_levels", 1)
    }
}

/// Diffusion stand-in: forward-noise to step `t` of a linear DDPM schedule,
/// then "denoise" with a Gaussian smoother whose width grows with the noise
/// level. Strength is monotone in `t`; `t = 0` is the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoiseSmoothRegeneration;

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const SCHEDULE_LEN: usize = 1000;

/// Cumulative signal fraction `ᾱ_t` of the linear schedule.
pub(crate) fn alpha_bar(t: usize) -> f64 {
    (1..=t.min(SCHEDULE_LEN))
        .map(|s| {
            let beta = BETA_START + (BETA_END - BETA_START) * (s - 1) as f64 / (SCHEDULE_LEN - 1) as f64;
            1.0 - beta
        })
        .product()
}

impl RegenerationBackend for NoiseSmoothRegeneration {
    fn name(&self) -> &str {
        "noise-smooth"
    }

    fn regenerate(&self, image: &ImageGrid, strength: f64, seed: u64) -> Result<ImageGrid> {
        if !(strength >= 0.0) || strength.fract() != 0.0 {
            return Err(Error::invalid(format!("diffusion steps must be a nonnegative integer, got {strength}")));
        }
        let t = strength as usize;
        if t == 0 {
            return Ok(image.clone());
        }
        let ab = alpha_bar(t);
        let noise_std = (1.0 - ab).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = image.tensor().elem_count();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps, image.tensor().dims(), device())?;
        // x in [-1, 1] signal space
        let x = ((image.tensor() * 2.0)? - 1.0)?;
        let noisy = ((x * ab.sqrt())? + (eps * noise_std)?)?;
        let sigma = 0.5 + 2.0 * noise_std;
        let size = 2 * (3.0 * sigma).ceil() as usize + 1;
        let smoothed = (linops::gaussian_blur(&noisy, size, sigma)? / ab.sqrt())?;
        ImageGrid::from_tensor(((smoothed + 1.0)? * 0.5)?)?.clamped()
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::new(BackendKind::Regeneration, self.name())
            .with("schedule", format!("linear beta {BETA_START}..{BETA_END} over {SCHEDULE_LEN}"))
    }
}
