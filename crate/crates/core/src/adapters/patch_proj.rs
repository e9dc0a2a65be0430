use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BackendInfo, BackendKind, FeatureEncoder};
use crate::error::{Error, Result};
use crate::linops;
use crate::signal::{device, ensure_finite};

const WEIGHT_SEED: u64 = 0x0050_4150_0000_0064;
const PATCH: usize = 4;
const HIDDEN1: usize = 16;
const HIDDEN2: usize = 32;
const GRID: usize = 8;
const GAIN: f64 = 300.0;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

/// Fixed random feature extractor: global standardization, light Gaussian
/// smoothing, a 4×4 patch convolution, a 3×3 stride-2 convolution (tanh
/// after each) pooled onto an 8×8 grid, then a random linear projection.
///
/// There are no biases and every stage is odd, so the features of `x - m`
/// and `m - x` are negatives of each other: on symmetric noise the signs are
/// balanced. Standardization makes the features invariant to global gain
/// and contrast changes. Input sides must be multiples of 64 pixels.
pub struct PatchProjEncoder {
    dim: usize,
    conv1: Tensor,
    conv2: Tensor,
    proj: Tensor,
}

impl PatchProjEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(WEIGHT_SEED ^ dim as u64);
        let fan1 = 3 * PATCH * PATCH;
        let conv1 = Tensor::from_vec(
            gaussian(&mut rng, HIDDEN1 * fan1, 1.0 / (fan1 as f64).sqrt()),
            (HIDDEN1, 3, PATCH, PATCH),
            device(),
        )?;
        let fan2 = HIDDEN1 * 9;
        let conv2 = Tensor::from_vec(
            gaussian(&mut rng, HIDDEN2 * fan2, 1.0 / (fan2 as f64).sqrt()),
            (HIDDEN2, HIDDEN1, 3, 3),
            device(),
        )?;
        let flat = HIDDEN2 * GRID * GRID;
        let proj = Tensor::from_vec(
            gaussian(&mut rng, flat * dim, GAIN / (flat as f64).sqrt()),
            (flat, dim),
            device(),
        )?;
        Ok(Self {
            dim,
            conv1,
            conv2,
            proj,
        })
    }
}

impl FeatureEncoder for PatchProjEncoder {
    fn name(&self) -> &str {
        "patch-proj-64"
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &Tensor) -> Result<Tensor> {
        let dims = image.dims();
        if dims.len() != 3 || dims[0] != 3 || dims[1] % 64 != 0 || dims[2] % 64 != 0 || dims[1] == 0 {
            return Err(Error::invalid(format!(
                "patch-proj expects a (3, H, W) image with H and W multiples of 64, got {dims:?}"
            )));
        }
        let (h, w) = (dims[1], dims[2]);
        let mean = image.mean_all()?;
        let centered = image.broadcast_sub(&mean)?;
        let std = (centered.sqr()?.mean_all()? + 1e-4)?.sqrt()?;
        let x = centered.broadcast_div(&std)?;
        let x = linops::gaussian_blur(&x, 5, 1.0)?.unsqueeze(0)?;
        let h1 = x.conv2d(&self.conv1, 0, PATCH, 1, 1)?.tanh()?;
        let mut h2 = h1.conv2d(&self.conv2, 1, 2, 1, 1)?.tanh()?;
        let pool = (h / 8 / GRID, w / 8 / GRID);
        if pool != (1, 1) {
            h2 = h2.avg_pool2d(pool)?;
        }
        let flat = h2.flatten_all()?.unsqueeze(0)?;
        let z = flat.matmul(&self.proj)?.squeeze(0)?;
        ensure_finite(&z, "features")?;
        Ok(z)
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::new(BackendKind::FeatureEncoder, self.name())
            .with("feature_dim", self.dim)
            .with("weight_seed", format!("{WEIGHT_SEED:#x}"))
            .with("normalization", "global standardization before the first layer; no output normalization")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn declared_dimension_and_determinism() {
        let enc = PatchProjEncoder::new(64).unwrap();
        let img = &corpus::synthetic_textures(1, 64, 2).unwrap()[0];
        let a = enc.features(img).unwrap();
        let b = PatchProjEncoder::new(64).unwrap().features(img).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn odd_symmetry_and_gain_invariance() {
        let enc = PatchProjEncoder::new(64).unwrap();
        let img = &corpus::noise_images(1, 64, 3).unwrap()[0];
        let z = enc.features(img).unwrap();
        let flipped = crate::signal::ImageGrid::from_tensor((img.tensor().neg().unwrap() + 1.0).unwrap()).unwrap();
        let zf = enc.features(&flipped).unwrap();
        for (a, b) in z.iter().zip(&zf) {
            assert!((a + b).abs() < 1e-9);
        }
        let dim = crate::signal::ImageGrid::from_tensor((img.tensor() * 0.5).unwrap()).unwrap();
        let zd = enc.features(&dim).unwrap();
        for (a, b) in z.iter().zip(&zd) {
            assert!((a - b).abs() < 1e-2 * a.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_unsupported_sizes() {
        let enc = PatchProjEncoder::new(64).unwrap();
        let t = Tensor::zeros((3, 48, 64), crate::signal::DTYPE, device()).unwrap();
        assert!(matches!(enc.extract(&t), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn larger_inputs_pool_to_the_same_dimension() {
        let enc = PatchProjEncoder::new(64).unwrap();
        let img = &corpus::synthetic_textures(1, 128, 1).unwrap()[0];
        assert_eq!(enc.features(img).unwrap().len(), 64);
    }
}
