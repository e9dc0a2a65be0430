//! Message embedding by gradient descent on an additive perturbation.
//!
//! The perturbation lives in one of four domains. For the default
//! latent-frequency domain the watermarked image is
//! `D(iFFT(FFT(E(I)) + δ))`, clamped to `[0, 1]`. Each step minimizes
//!
//! ```text
//! L = L_m(I_w) + L_m(I_p1) + L_m(I_p2) + λ_p·(−PSNR(I_w, I)) + λ_i·P(I_w, I)
//! ```
//!
//! where `L_m` is the hinge loss on the key projections, `I_p1` decodes the
//! perturbed latent with Gaussian latent noise added and `I_p2` is `I_w`
//! plus Gaussian pixel noise (or, with spatial augmentation on, a randomly
//! chosen rotation, crop or pixel-noise view of `I_w`).
//!
//! Pixel domains have no latent of their own; their latent-noise view is
//! `D(E(I + δ) + ε1)`. With the identity codec every pixel domain computes
//! exactly the same graph as its latent counterpart.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{FeatureEncoder, LatentCodec, PerceptualMetric};
use crate::detect::decode;
use crate::error::{Error, Result};
use crate::keys::{Message, WatermarkKey};
use crate::linops;
use crate::metrics::{self, MSE_FLOOR};
use crate::signal::{device, forward_freq, inverse_freq, to_vec, FrequencyGrid, ImageGrid, DTYPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Pixel,
    PixelFrequency,
    Latent,
    LatentFrequency,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::Pixel,
        Domain::PixelFrequency,
        Domain::Latent,
        Domain::LatentFrequency,
    ];

    pub fn is_frequency(self) -> bool {
        matches!(self, Domain::PixelFrequency | Domain::LatentFrequency)
    }

    pub fn is_latent(self) -> bool {
        matches!(self, Domain::Latent | Domain::LatentFrequency)
    }

    pub fn default_learning_rate(self) -> f64 {
        if self.is_frequency() {
            2.0
        } else {
            0.01
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Pixel => "pixel",
            Domain::PixelFrequency => "pixel-frequency",
            Domain::Latent => "latent",
            Domain::LatentFrequency => "latent-frequency",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding domain `{s}`")))
    }
}

pub const DESK_LEARNING_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub domain: Domain,
    pub steps: usize,
    /// `None` picks the domain default (2.0 for frequency domains, 0.01 otherwise).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub lambda_psnr: f64,
    pub lambda_perceptual: f64,
    pub latent_noise_std: f64,
    pub pixel_noise_std: f64,
    pub spatial_augs: bool,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            domain: Domain::LatentFrequency,
            steps: 400,
            learning_rate: None,
            lambda_psnr: 0.05,
            lambda_perceptual: 0.25,
            latent_noise_std: 0.25,
            pixel_noise_std: 0.06,
            spatial_augs: false,
            crop_scale: (0.2, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.domain.default_learning_rate())
    }

    /// Defaults with the learning rate scaled down to `[0, 1]`-valued grids
    /// of 64×64 or smaller, where 2.0 overshoots by an order of magnitude.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: Some(DESK_LEARNING_RATE),
            ..Self::default()
        }
    }

    /// Same settings with every robustness augmentation disabled.
    pub fn without_augmentation(mut self) -> Self {
        self.latent_noise_std = 0.0;
        self.pixel_noise_std = 0.0;
        self.spatial_augs = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")))
            }
        };
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        nonneg("lambda_psnr", self.lambda_psnr)?;
        nonneg("lambda_perceptual", self.lambda_perceptual)?;
        nonneg("latent_noise_std", self.latent_noise_std)?;
        nonneg("pixel_noise_std", self.pixel_noise_std)?;
        let (s0, s1) = self.crop_scale;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Config(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop_scale)));
        }
        let (r0, r1) = self.crop_ratio;
        if !(0.0 < r0 && r0 <= r1) {
            return Err(Error::Config(format!("crop_ratio must satisfy 0 < lo <= hi, got {:?}", self.crop_ratio)));
        }
        Ok(())
    }
}

/// The optimized perturbation: a real grid for pixel/latent domains, a
/// complex grid for frequency domains.
#[derive(Clone, Debug)]
pub enum Perturbation {
    Spatial(Tensor),
    Spectral(FrequencyGrid),
}

impl Perturbation {
    pub fn zeros(shape: (usize, usize, usize), domain: Domain) -> Result<Self> {
        Ok(if domain.is_frequency() {
            Perturbation::Spectral(FrequencyGrid::zeros(shape)?)
        } else {
            Perturbation::Spatial(Tensor::zeros(shape, DTYPE, device())?)
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            Perturbation::Spatial(t) => {
                let d = t.dims();
                (d[0], d[1], d[2])
            }
            Perturbation::Spectral(f) => f.shape(),
        }
    }

    fn planes(&self) -> Vec<Tensor> {
        match self {
            Perturbation::Spatial(t) => vec![t.clone()],
            Perturbation::Spectral(f) => vec![f.re.clone(), f.im.clone()],
        }
    }

    fn from_planes(domain: Domain, planes: &[Tensor]) -> Self {
        if domain.is_frequency() {
            Perturbation::Spectral(FrequencyGrid {
                re: planes[0].detach(),
                im: planes[1].detach(),
            })
        } else {
            Perturbation::Spatial(planes[0].detach())
        }
    }

    /// All parameter values, real plane(s) first.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for p in self.planes() {
            out.extend(to_vec(&p)?);
        }
        Ok(out)
    }

    pub fn from_vec(domain: Domain, shape: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        let planes = if domain.is_frequency() { 2 } else { 1 };
        if values.len() != n * planes {
            return Err(Error::invalid(format!(
                "expected {} perturbation values, got {}",
                n * planes,
                values.len()
            )));
        }
        let tensors = values
            .chunks(n)
            .map(|c| Tensor::from_slice(c, shape, device()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self::from_planes(domain, &tensors))
    }

    fn matches(&self, domain: Domain) -> bool {
        matches!(
            (self, domain.is_frequency()),
            (Perturbation::Spectral(_), true) | (Perturbation::Spatial(_), false)
        )
    }
}

/// Losses of one optimization step (values before the update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub message_clean: f64,
    pub message_latent_noise: f64,
    pub message_pixel_view: f64,
    pub psnr_loss: f64,
    pub perceptual_loss: f64,
    pub total: f64,
}

pub struct EmbedResult {
    /// Clamped watermarked image (before 8-bit quantization).
    pub watermarked: ImageGrid,
    pub perturbation: Perturbation,
    pub loss_trace: Vec<StepRecord>,
    /// PSNR of the 8-bit quantized watermark against the input, in dB.
    pub final_psnr: f64,
    /// Bit accuracy decoded from the 8-bit quantized watermark.
    pub final_bit_accuracy_clean: f64,
    pub decoded: Message,
}

impl EmbedResult {
    pub fn quantized(&self) -> Result<ImageGrid> {
        self.watermarked.quantized()
    }
}

/// Hinge message loss `(1/K) Σ max(0, μ − (z·v_k)·m_k)`.
pub fn message_loss(features: &[f64], key: &WatermarkKey, message: &Message) -> Result<f64> {
    check_message(key, message)?;
    let proj = key.project(features)?;
    let mu = key.margin();
    Ok(proj
        .iter()
        .zip(message.values())
        .map(|(p, &m)| (mu - p * m as f64).max(0.0))
        .sum::<f64>()
        / key.bits() as f64)
}

fn check_message(key: &WatermarkKey, message: &Message) -> Result<()> {
    if key.bits() != message.len() {
        return Err(Error::invalid(format!(
            "message has {} bits, key carries {}",
            message.len(),
            key.bits()
        )));
    }
    Ok(())
}

fn psnr_loss_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mse = (a - b)?.sqr()?.mean_all()?.maximum(MSE_FLOOR)?;
    // −PSNR = 10·log10(mse) for unit peak
    Ok((mse.log()? * (10.0 / std::f64::consts::LN_10))?)
}

/// `(L_p, L_i) = (−PSNR(I_w, I), P(I_w, I))`.
pub fn quality_losses(
    watermarked: &ImageGrid,
    original: &ImageGrid,
    perc: &dyn PerceptualMetric,
) -> Result<(f64, f64)> {
    if !watermarked.same_shape(original) {
        return Err(Error::invalid("quality losses need images of equal shape"));
    }
    Ok((
        -metrics::psnr(watermarked, original)?,
        perc.distance_value(watermarked, original)?,
    ))
}

/// How the pixel-space view `I_p2` is formed on one step.
#[derive(Clone, Debug)]
pub enum PixelView {
    /// `I_p2 = I_w`.
    Unchanged,
    Noise(Tensor),
    Rotate(usize),
    /// `(top, left, height, width)` crop resized back to full size.
    Crop((f64, f64, f64, f64)),
}

/// Random draws for one step.
#[derive(Clone, Debug)]
pub struct ViewDraw {
    pub latent_noise: Option<Tensor>,
    pub pixel_view: PixelView,
}

impl ViewDraw {
    pub fn none() -> Self {
        Self {
            latent_noise: None,
            pixel_view: PixelView::Unchanged,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), std: f64) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, device())?)
}

/// Draws the latent and pixel perturbations for one step. Draw order is
/// fixed (latent noise, then the view choice, then its parameters) so runs
/// are reproducible from the seed alone.
pub fn perturbed_views_draw(
    latent_shape: (usize, usize, usize),
    image_hw: (usize, usize),
    cfg: &EmbedConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ViewDraw> {
    let latent_noise = if cfg.latent_noise_std > 0.0 {
        Some(gaussian(rng, latent_shape, cfg.latent_noise_std)?)
    } else {
        None
    };
    let (h, w) = image_hw;
    let choice = if cfg.spatial_augs { rng.random_range(0..3u8) } else { 2 };
    let pixel_view = match choice {
        0 => {
            let turns = if h == w { rng.random_range(1..4usize) } else { 2 };
            PixelView::Rotate(turns)
        }
        1 => {
            let (a0, a1) = cfg.crop_scale;
            let (r0, r1) = cfg.crop_ratio;
            let area = rng.random_range(a0..=a1);
            let ratio = (rng.random_range(r0.ln()..=r1.ln())).exp();
            let cw = ((area * ratio).sqrt() * w as f64).min(w as f64);
            let ch = ((area / ratio).sqrt() * h as f64).min(h as f64);
            let top = rng.random_range(0.0..=(h as f64 - ch));
            let left = rng.random_range(0.0..=(w as f64 - cw));
            PixelView::Crop((top, left, ch, cw))
        }
        _ if cfg.pixel_noise_std > 0.0 => PixelView::Noise(gaussian(rng, (3, h, w), cfg.pixel_noise_std)?),
        _ => PixelView::Unchanged,
    };
    Ok(ViewDraw {
        latent_noise,
        pixel_view,
    })
}

/// Applies a drawn view to already computed tensors:
/// `I_p1 = D(latent + ε1)` and `I_p2` per the pixel view.
pub fn perturbed_views(
    codec: &dyn LatentCodec,
    latent: &Tensor,
    watermarked: &Tensor,
    draw: &ViewDraw,
) -> Result<(Tensor, Tensor)> {
    let p1 = match &draw.latent_noise {
        Some(eps) => codec.decode(&(latent + eps)?)?,
        None => watermarked.clone(),
    };
    let (h, w) = (watermarked.dims()[1], watermarked.dims()[2]);
    let p2 = match &draw.pixel_view {
        PixelView::Unchanged => watermarked.clone(),
        PixelView::Noise(eps) => (watermarked + eps)?,
        PixelView::Rotate(k) => linops::rot90(watermarked, *k)?,
        PixelView::Crop(win) => linops::crop_resize(watermarked, *win, h, w)?,
    };
    Ok((p1, p2))
}

/// Scalar loss terms of one evaluation, as graph tensors.
pub struct LossTerms {
    pub message_clean: Tensor,
    pub message_latent_noise: Tensor,
    pub message_pixel_view: Tensor,
    pub psnr_loss: Tensor,
    pub perceptual_loss: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    fn record(&self) -> Result<StepRecord> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
        Ok(StepRecord {
            message_clean: v(&self.message_clean)?,
            message_latent_noise: v(&self.message_latent_noise)?,
            message_pixel_view: v(&self.message_pixel_view)?,
            psnr_loss: v(&self.psnr_loss)?,
            perceptual_loss: v(&self.perceptual_loss)?,
            total: v(&self.total)?,
        })
    }
}

/// The embedding objective for one image, key, and message.
pub struct Objective<'a> {
    image: ImageGrid,
    domain: Domain,
    cfg: EmbedConfig,
    codec: &'a dyn LatentCodec,
    feat: &'a dyn FeatureEncoder,
    perc: &'a dyn PerceptualMetric,
    key: &'a WatermarkKey,
    /// `(N, K)` key matrix transposed.
    directions: Tensor,
    /// `(1, K)` bipolar message.
    signs: Tensor,
    base_latent: Option<Tensor>,
    base_spectrum: Option<FrequencyGrid>,
    param_shape: (usize, usize, usize),
    latent_shape: (usize, usize, usize),
}

impl<'a> Objective<'a> {
    pub fn new(
        image: &ImageGrid,
        key: &'a WatermarkKey,
        message: &Message,
        codec: &'a dyn LatentCodec,
        feat: &'a dyn FeatureEncoder,
        perc: &'a dyn PerceptualMetric,
        cfg: &EmbedConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_message(key, message)?;
        if feat.feature_dim() < key.feature_dim() {
            return Err(Error::Capacity {
                bits: key.feature_dim(),
                feature_dim: feat.feature_dim(),
            });
        }
        let (h, w) = (image.height(), image.width());
        let latent_shape = codec.latent_shape(h, w).map_err(|e| Error::Config(e.to_string()))?;
        let needs_latent = cfg.domain.is_latent();
        let base_latent = if needs_latent {
            let z = codec.encode(image.tensor())?.detach();
            let d = z.dims();
            if d != [latent_shape.0, latent_shape.1, latent_shape.2] {
                return Err(Error::Config(format!(
                    "codec `{}` produced latent {d:?} but declares {latent_shape:?}",
                    codec.name()
                )));
            }
            Some(z)
        } else {
            None
        };
        let base_spectrum = match cfg.domain {
            Domain::PixelFrequency => Some(forward_freq(image.tensor())?.detach()),
            Domain::LatentFrequency => Some(forward_freq(base_latent.as_ref().expect("latent encoded"))?.detach()),
            _ => None,
        };
        let param_shape = if needs_latent { latent_shape } else { (3, h, w) };
        let directions = key.matrix()?.t()?.contiguous()?;
        let signs = Tensor::from_vec(message.as_f64(), (1, message.len()), device())?;
        Ok(Self {
            image: image.clone(),
            domain: cfg.domain,
            cfg: cfg.clone(),
            codec,
            feat,
            perc,
            key,
            directions,
            signs,
            base_latent,
            base_spectrum,
            param_shape,
            latent_shape,
        })
    }

    pub fn parameter_shape(&self) -> (usize, usize, usize) {
        self.param_shape
    }

    pub fn zero_perturbation(&self) -> Result<Perturbation> {
        Perturbation::zeros(self.param_shape, self.domain)
    }

    fn check(&self, delta: &Perturbation) -> Result<()> {
        if !delta.matches(self.domain) || delta.shape() != self.param_shape {
            return Err(Error::Config(format!(
                "perturbation shape {:?} does not match the {} domain shape {:?}",
                delta.shape(),
                self.domain,
                self.param_shape
            )));
        }
        Ok(())
    }

    /// `(latent, clamped watermarked image)` for the given parameter planes.
    fn forward(&self, planes: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let spectral = |base: &FrequencyGrid| -> Result<Tensor> {
            let shifted = base.add(&FrequencyGrid::from_parts(planes[0].clone(), planes[1].clone())?)?;
            inverse_freq(&shifted)
        };
        match self.domain {
            Domain::Pixel | Domain::PixelFrequency => {
                let raw = if self.domain == Domain::Pixel {
                    (self.image.tensor() + &planes[0])?
                } else {
                    spectral(self.base_spectrum.as_ref().expect("spectrum prepared"))?
                };
                let latent = if self.cfg.latent_noise_std > 0.0 {
                    self.codec.encode(&raw)?
                } else {
                    raw.clone()
                };
                Ok((latent, raw.clamp(0.0, 1.0)?))
            }
            Domain::Latent | Domain::LatentFrequency => {
                let latent = if self.domain == Domain::Latent {
                    (self.base_latent.as_ref().expect("latent prepared") + &planes[0])?
                } else {
                    spectral(self.base_spectrum.as_ref().expect("spectrum prepared"))?
                };
                let img = self.codec.decode(&latent)?.clamp(0.0, 1.0)?;
                Ok((latent, img))
            }
        }
    }

    fn message_loss_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let z = self.feat.extract(image)?;
        let z = z.narrow(0, 0, self.key.feature_dim())?.unsqueeze(0)?;
        let proj = z.matmul(&self.directions)?;
        let hinge = (proj * &self.signs)?.neg()?.affine(1.0, self.key.margin())?.relu()?;
        Ok(hinge.mean_all()?)
    }

    fn terms(&self, planes: &[Tensor], draw: &ViewDraw) -> Result<LossTerms> {
        let (latent, watermarked) = self.forward(planes)?;
        let (p1, p2) = perturbed_views(self.codec, &latent, &watermarked, draw)?;
        let message_clean = self.message_loss_tensor(&watermarked)?;
        let message_latent_noise = if draw.latent_noise.is_some() {
            self.message_loss_tensor(&p1)?
        } else {
            message_clean.clone()
        };
        let message_pixel_view = match draw.pixel_view {
            PixelView::Unchanged => message_clean.clone(),
            _ => self.message_loss_tensor(&p2)?,
        };
        let psnr_loss = psnr_loss_tensor(&watermarked, self.image.tensor())?;
        let perceptual_loss = self.perc.distance(&watermarked, self.image.tensor())?;
        let total = (((&message_clean + &message_latent_noise)? + &message_pixel_view)?
            + (&psnr_loss * self.cfg.lambda_psnr)?)?;
        let total = (total + (&perceptual_loss * self.cfg.lambda_perceptual)?)?;
        Ok(LossTerms {
            message_clean,
            message_latent_noise,
            message_pixel_view,
            psnr_loss,
            perceptual_loss,
            total,
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<ViewDraw> {
        perturbed_views_draw(
            self.latent_shape,
            (self.image.height(), self.image.width()),
            &self.cfg,
            rng,
        )
    }

    /// Total loss at `delta` for a fixed draw.
    pub fn loss(&self, delta: &Perturbation, draw: &ViewDraw) -> Result<StepRecord> {
        self.check(delta)?;
        self.terms(&delta.planes(), draw)?.record()
    }

    /// Total loss and its gradient with respect to every perturbation entry.
    pub fn loss_and_gradient(&self, delta: &Perturbation, draw: &ViewDraw) -> Result<(f64, Perturbation)> {
        self.check(delta)?;
        let vars = delta
            .planes()
            .iter()
            .map(Var::from_tensor)
            .collect::<candle_core::Result<Vec<_>>>()?;
        let planes: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let terms = self.terms(&planes, draw)?;
        let grads = terms.total.backward()?;
        let grad_planes = vars
            .iter()
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .map_or_else(|| v.as_tensor().zeros_like(), Ok)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok((
            terms.total.to_scalar::<f64>()?,
            Perturbation::from_planes(self.domain, &grad_planes),
        ))
    }

    /// Clamped watermarked image for `delta`.
    pub fn render(&self, delta: &Perturbation) -> Result<ImageGrid> {
        self.check(delta)?;
        let (_, img) = self.forward(&delta.planes())?;
        ImageGrid::from_tensor(img)
    }

    /// Runs Adam from a zero perturbation for `cfg.steps` steps.
    pub fn optimize(&self) -> Result<(Perturbation, Vec<StepRecord>)> {
        let vars = self
            .zero_perturbation()?
            .planes()
            .iter()
            .map(Var::from_tensor)
            .collect::<candle_core::Result<Vec<_>>>()?;
        let mut opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: self.cfg.learning_rate(),
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut trace = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let draw = self.draw(&mut rng)?;
            let planes: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
            let terms = self.terms(&planes, &draw)?;
            let record = terms.record()?;
            if !record.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            opt.backward_step(&terms.total)?;
            trace.push(record);
        }
        let planes: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        Ok((Perturbation::from_planes(self.domain, &planes), trace))
    }
}

/// Embeds `message` into `image` under `key`.
pub fn embed(
    image: &ImageGrid,
    key: &WatermarkKey,
    message: &Message,
    codec: &dyn LatentCodec,
    feat: &dyn FeatureEncoder,
    perc: &dyn PerceptualMetric,
    cfg: &EmbedConfig,
) -> Result<EmbedResult> {
    let objective = Objective::new(image, key, message, codec, feat, perc, cfg)?;
    let (perturbation, loss_trace) = objective.optimize()?;
    let watermarked = objective.render(&perturbation)?;
    let quantized = watermarked.quantized()?;
    let decoded = decode(&quantized, key, feat)?;
    Ok(EmbedResult {
        final_psnr: metrics::psnr(&quantized, image)?,
        final_bit_accuracy_clean: metrics::bit_accuracy(message, &decoded)?,
        decoded,
        watermarked,
        perturbation,
        loss_trace,
    })
}

/// The watermarked image for a given perturbation, clamped to `[0, 1]`:
///
/// * pixel: `I + δ`
/// * pixel-frequency: `Re iFFT(FFT(I) + δ)`
/// * latent: `D(E(I) + δ)`
/// * latent-frequency: `D(Re iFFT(FFT(E(I)) + δ))`
pub fn apply_perturbation(
    domain: Domain,
    image: &ImageGrid,
    delta: &Perturbation,
    codec: &dyn LatentCodec,
) -> Result<ImageGrid> {
    let (h, w) = (image.height(), image.width());
    let expected = if domain.is_latent() {
        codec.latent_shape(h, w).map_err(|e| Error::Config(e.to_string()))?
    } else {
        (3, h, w)
    };
    if !delta.matches(domain) || delta.shape() != expected {
        return Err(Error::Config(format!(
            "perturbation shape {:?} does not match the {domain} domain shape {expected:?}",
            delta.shape()
        )));
    }
    let planes = delta.planes();
    let spectral = |base: &Tensor| -> Result<Tensor> {
        let spectrum = forward_freq(base)?.add(&FrequencyGrid::from_parts(planes[0].clone(), planes[1].clone())?)?;
        inverse_freq(&spectrum)
    };
    let out = match domain {
        Domain::Pixel => (image.tensor() + &planes[0])?,
        Domain::PixelFrequency => spectral(image.tensor())?,
        Domain::Latent => codec.decode(&(codec.encode(image.tensor())? + &planes[0])?)?,
        Domain::LatentFrequency => codec.decode(&spectral(&codec.encode(image.tensor())?)?)?,
    };
    ImageGrid::from_tensor(out.clamp(0.0, 1.0)?)
}
