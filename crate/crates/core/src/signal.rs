//! Image and latent grids, and the per-channel 2-D discrete Fourier transform
//! used by the frequency embedding domains.
//!
//! Transform convention: the forward transform is unnormalized,
//! `X[u,v] = Σ x[y,x] · exp(-2πi (u·y/h + v·x/w))`, and the inverse carries the
//! full `1/(h·w)` factor. A constant grid `c` therefore has DC coefficient
//! `c·h·w`, and Parseval reads `Σ|x|² = Σ|X|² / (h·w)`.
//!
//! Both transforms are written as dense products with cached cosine/sine
//! matrices so that they stay differentiable through the tensor graph.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

/// Floating point type used by every grid.
pub const DTYPE: DType = DType::F64;

pub(crate) fn device() -> &'static Device {
    static CPU: Device = Device::Cpu;
    &CPU
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let total = t.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

pub(crate) fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

/// An RGB image stored channel-major as a `(3, H, W)` tensor.
///
/// Values are nominally in `[0, 1]`; intermediate views (noisy copies used
/// during optimization) may leave that range until [`ImageGrid::clamped`]
/// is applied.
#[derive(Clone, Debug)]
pub struct ImageGrid {
    data: Tensor,
}

impl ImageGrid {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != 3 || dims[1] == 0 || dims[2] == 0 {
            return Err(Error::invalid(format!(
                "image tensor must have shape (3, H, W), got {dims:?}"
            )));
        }
        let data = data.to_dtype(DTYPE)?;
        ensure_finite(&data, "image")?;
        Ok(Self { data })
    }

    /// Builds a grid from row-major `H×W×3` interleaved RGB values.
    pub fn from_hwc(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, (height, width, 3), device())?.permute((2, 0, 1))?;
        Self::from_tensor(t.contiguous()?)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(y, x, c));
                }
            }
        }
        Self::from_tensor(Tensor::from_vec(values, (3, height, width), device())?)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let values: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self::from_hwc(h as usize, w as usize, &values)
    }

    /// Clamps to `[0, 1]` and rounds to 8-bit.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let hwc = self.to_hwc_vec()?;
        let raw: Vec<u8> = hwc
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(RgbImage::from_raw(self.width() as u32, self.height() as u32, raw)
            .expect("buffer length matches dimensions"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Self::from_rgb8(&img)
    }

    /// Writes a lossless 8-bit PNG.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        to_vec(&self.data)
    }

    pub fn to_hwc_vec(&self) -> Result<Vec<f64>> {
        to_vec(&self.data.permute((1, 2, 0))?.contiguous()?)
    }

    pub fn clamped(&self) -> Result<Self> {
        Ok(Self {
            data: self.data.clamp(0.0, 1.0)?,
        })
    }

    /// The image as an 8-bit raster would store it.
    pub fn quantized(&self) -> Result<Self> {
        let q: Vec<f64> = self
            .to_vec()?
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Ok(Self {
            data: Tensor::from_vec(q, self.data.dims(), device())?,
        })
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.data.dims() == other.data.dims()
    }
}

/// A latent tensor `(C, h, w)` produced by a latent codec.
#[derive(Clone, Debug)]
pub struct LatentGrid {
    data: Tensor,
}

impl LatentGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::invalid(format!(
                "latent must have shape (C, h, w), got {:?}",
                data.dims()
            )));
        }
        ensure_finite(&data, "latent")?;
        Ok(Self { data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// A complex grid stored as two real `(C, h, w)` planes.
#[derive(Clone, Debug)]
pub struct FrequencyGrid {
    pub re: Tensor,
    pub im: Tensor,
}

impl FrequencyGrid {
    pub fn from_parts(re: Tensor, im: Tensor) -> Result<Self> {
        if re.dims() != im.dims() || re.rank() != 3 {
            return Err(Error::invalid(format!(
                "frequency planes must share a (C, h, w) shape, got {:?} and {:?}",
                re.dims(),
                im.dims()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Result<Self> {
        let z = Tensor::zeros(shape, DTYPE, device())?;
        Ok(Self { re: z.clone(), im: z })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.re.dims();
        (d[0], d[1], d[2])
    }

    pub fn add(&self, other: &FrequencyGrid) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "frequency grid shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            re: self.re.add(&other.re)?,
            im: self.im.add(&other.im)?,
        })
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        Ok(Self {
            re: (&self.re * k)?,
            im: (&self.im * k)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            re: self.re.detach(),
            im: self.im.detach(),
        }
    }
}

fn dft_matrices(n: usize) -> Result<(Tensor, Tensor)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, (Tensor, Tensor)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("dft cache poisoned");
    if let Some(pair) = guard.get(&n) {
        return Ok(pair.clone());
    }
    let mut cos = Vec::with_capacity(n * n);
    let mut sin = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            // reduce the phase index first so large sizes keep full accuracy
            let phase = 2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
            cos.push(phase.cos());
            sin.push(phase.sin());
        }
    }
    let pair = (
        Tensor::from_vec(cos, (n, n), device())?,
        Tensor::from_vec(sin, (n, n), device())?,
    );
    guard.insert(n, pair.clone());
    Ok(pair)
}

fn grid_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.dims() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        d => Err(Error::invalid(format!("{what} must have shape (C, h, w), got {d:?}"))),
    }
}

/// Per-channel forward DFT of a real `(C, h, w)` grid (unnormalized).
pub fn forward_freq(grid: &Tensor) -> Result<FrequencyGrid> {
    let (_, h, w) = grid_dims(grid, "grid")?;
    ensure_finite(grid, "grid")?;
    let (ch, sh) = dft_matrices(h)?;
    let (cw, sw) = dft_matrices(w)?;
    let a = grid.broadcast_matmul(&cw)?;
    let b = grid.broadcast_matmul(&sw)?;
    // exp(-iθ) = cos θ − i sin θ on both axes
    let re = (ch.broadcast_matmul(&a)? - sh.broadcast_matmul(&b)?)?;
    let im = (sh.broadcast_matmul(&a)? + ch.broadcast_matmul(&b)?)?.neg()?;
    Ok(FrequencyGrid { re, im })
}

/// Per-channel inverse DFT, scaled by `1/(h·w)`. Only the real component is
/// returned; any imaginary residue left by a non-Hermitian spectrum is dropped.
pub fn inverse_freq(freq: &FrequencyGrid) -> Result<Tensor> {
    let (_, h, w) = grid_dims(&freq.re, "frequency grid")?;
    if freq.im.dims() != freq.re.dims() {
        return Err(Error::invalid(format!(
            "imaginary plane {:?} does not match real plane {:?}",
            freq.im.dims(),
            freq.re.dims()
        )));
    }
    ensure_finite(&freq.re, "frequency grid")?;
    ensure_finite(&freq.im, "frequency grid")?;
    let (ch, sh) = dft_matrices(h)?;
    let (cw, sw) = dft_matrices(w)?;
    let p = (freq.re.broadcast_matmul(&cw)? - freq.im.broadcast_matmul(&sw)?)?;
    let q = (freq.re.broadcast_matmul(&sw)? + freq.im.broadcast_matmul(&cw)?)?;
    let real = (ch.broadcast_matmul(&p)? - sh.broadcast_matmul(&q)?)?;
    Ok((real / (h * w) as f64)?)
}
