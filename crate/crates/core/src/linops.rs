//! Separable linear image operators (resampling, Gaussian smoothing, quarter
//! turns) expressed as tensor products so they can sit inside a gradient path.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::signal::device;
#[cfg(test)]
use crate::signal::DTYPE;

/// Row-stochastic bilinear interpolation matrix `(n_out, n_in)` sampling the
/// source window `[start, start + len)` with half-pixel centres.
pub fn resample_matrix(n_in: usize, start: f64, len: f64, n_out: usize) -> Result<Tensor> {
    if n_in == 0 || n_out == 0 || len <= 0.0 {
        return Err(Error::invalid("resample window must be non-empty"));
    }
    let mut m = vec![0.0; n_out * n_in];
    let step = len / n_out as f64;
    for j in 0..n_out {
        let src = (start + (j as f64 + 0.5) * step - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let frac = src - i0 as f64;
        let i1 = (i0 + 1).min(n_in - 1);
        m[j * n_in + i0] += 1.0 - frac;
        if frac > 0.0 {
            m[j * n_in + i1] += frac;
        }
    }
    Ok(Tensor::from_vec(m, (n_out, n_in), device())?)
}

/// `rows · t · colsᵀ` for each channel of a `(C, H, W)` tensor.
pub fn separable(t: &Tensor, rows: &Tensor, cols: &Tensor) -> Result<Tensor> {
    let tmp = rows.broadcast_matmul(t)?;
    Ok(tmp.broadcast_matmul(&cols.t()?)?)
}

/// Bilinear resize of a `(C, H, W)` tensor to `(C, out_h, out_w)`.
pub fn resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = (t.dims()[1], t.dims()[2]);
    let rows = resample_matrix(h, 0.0, h as f64, out_h)?;
    let cols = resample_matrix(w, 0.0, w as f64, out_w)?;
    separable(t, &rows, &cols)
}

/// Crops the window `(top, left, height, width)` (fractional pixels allowed)
/// and resamples it to `(out_h, out_w)`.
pub fn crop_resize(
    t: &Tensor,
    window: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (h, w) = (t.dims()[1], t.dims()[2]);
    let (top, left, ch, cw) = window;
    let rows = resample_matrix(h, top, ch, out_h)?;
    let cols = resample_matrix(w, left, cw, out_w)?;
    separable(t, &rows, &cols)
}

/// Standard deviation used when only a kernel size is given.
pub fn sigma_for_kernel(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn reflect(i: isize, n: usize) -> usize {
    // mirror without repeating the edge sample: -1 -> 1, n -> n-2
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// `(n, n)` convolution matrix for a 1-D kernel with reflect padding.
pub fn convolution_matrix(n: usize, kernel: &[f64]) -> Result<Tensor> {
    let half = (kernel.len() / 2) as isize;
    let mut m = vec![0.0; n * n];
    for row in 0..n {
        for (k, &weight) in kernel.iter().enumerate() {
            let src = reflect(row as isize + k as isize - half, n);
            m[row * n + src] += weight;
        }
    }
    Ok(Tensor::from_vec(m, (n, n), device())?)
}

/// Separable Gaussian blur of a `(C, H, W)` tensor with reflect padding.
pub fn gaussian_blur(t: &Tensor, size: usize, sigma: f64) -> Result<Tensor> {
    if size == 1 {
        return Ok(t.clone());
    }
    let kernel = gaussian_kernel(size, sigma);
    let rows = convolution_matrix(t.dims()[1], &kernel)?;
    let cols = convolution_matrix(t.dims()[2], &kernel)?;
    separable(t, &rows, &cols)
}

fn flip(t: &Tensor, dim: usize) -> Result<Tensor> {
    let n = t.dims()[dim];
    let idx: Vec<u32> = (0..n as u32).rev().collect();
    let idx = Tensor::from_vec(idx, n, device())?;
    Ok(t.contiguous()?.index_select(&idx, dim)?)
}

/// Counter-clockwise rotation of a `(C, H, W)` tensor by `quarter_turns · 90°`.
pub fn rot90(t: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let out = match quarter_turns % 4 {
        0 => t.clone(),
        1 => flip(&t.transpose(1, 2)?, 1)?,
        2 => flip(&flip(t, 1)?, 2)?,
        _ => flip(&t.transpose(1, 2)?, 2)?,
    };
    Ok(out.contiguous()?)
}

#[cfg(test)]
pub(crate) fn eye(n: usize) -> Result<Tensor> {
    Ok(Tensor::eye(n, DTYPE, device())?)
}
