//! Seeded synthetic image corpora for desk-scale runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::signal::ImageGrid;

/// Smooth colour textures: a sum of low-frequency oriented sinusoids per
/// channel over a colour gradient, with light grain.
pub fn synthetic_textures(count: usize, size: usize, seed: u64) -> Result<Vec<ImageGrid>> {
    (0..count)
        .map(|i| texture(size, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64)))
        .collect()
}

fn texture(size: usize, seed: u64) -> Result<ImageGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..2.5);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = std::array::from_fn(|_| rng.random_range(-0.12..0.12));
            (theta, freq, phase, amp)
        })
        .collect();
    let grain: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-0.015..0.015)).collect();
    let n = size as f64;
    ImageGrid::from_fn(size, size, |y, x, c| {
        let (u, v) = (x as f64 / n, y as f64 / n);
        let mut value = base[c] + grad[c].0 * (u - 0.5) + grad[c].1 * (v - 0.5);
        for (theta, freq, phase, amp) in &waves {
            let t = u * theta.cos() + v * theta.sin();
            value += amp[c] * (std::f64::consts::TAU * freq * t + phase).sin();
        }
        value += grain[(c * size + y) * size + x];
        value.clamp(0.0, 1.0)
    })
}

/// I.i.d. uniform noise images, used as clean references for null-hypothesis
/// statistics.
pub fn noise_images(count: usize, size: usize, seed: u64) -> Result<Vec<ImageGrid>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + i as u64));
            let values: Vec<f64> = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
            ImageGrid::from_hwc(size, size, &values)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_deterministic_and_in_range() {
        let a = synthetic_textures(3, 16, 4).unwrap();
        let b = synthetic_textures(3, 16, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let xv = x.to_vec().unwrap();
            assert_eq!(xv, y.to_vec().unwrap());
            assert!(xv.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let n = noise_images(2, 8, 1).unwrap();
        assert_ne!(n[0].to_vec().unwrap(), n[1].to_vec().unwrap());
    }
}
