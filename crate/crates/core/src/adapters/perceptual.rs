use candle_core::Tensor;

use super::{BackendInfo, BackendKind, PerceptualMetric};
use crate::error::{Error, Result};
use crate::linops;

/// Mean squared difference after Gaussian smoothing, scaled into the range
/// LPIPS typically reports for faint perturbations.
#[derive(Clone, Debug)]
pub struct SmoothL2 {
    pub kernel: usize,
    pub sigma: f64,
    pub scale: f64,
}

impl Default for SmoothL2 {
    fn default() -> Self {
        Self {
            kernel: 7,
            sigma: 1.5,
            scale: 100.0,
        }
    }
}

impl PerceptualMetric for SmoothL2 {
    fn name(&self) -> &str {
        "l2-smooth"
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::invalid(format!(
                "perceptual distance shape mismatch: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let diff = linops::gaussian_blur(&(a - b)?, self.kernel, self.sigma)?;
        Ok((diff.sqr()?.mean_all()? * self.scale)?)
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::new(BackendKind::PerceptualMetric, self.name())
            .with("kernel", self.kernel)
            .with("sigma", self.sigma)
            .with("scale", self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn zero_on_identical_and_symmetric() {
        let m = SmoothL2::default();
        let imgs = corpus::synthetic_textures(2, 32, 9).unwrap();
        assert_eq!(m.distance_value(&imgs[0], &imgs[0]).unwrap(), 0.0);
        let ab = m.distance_value(&imgs[0], &imgs[1]).unwrap();
        let ba = m.distance_value(&imgs[1], &imgs[0]).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-6);
    }
}
