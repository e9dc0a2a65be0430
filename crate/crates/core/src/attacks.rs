//! Attack battery. Every attack maps a `[0, 1]` image to a `[0, 1]` image of
//! the same shape and is a pure function of its input, parameters and seed.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use candle_core::{Tensor, Var};
use image::codecs::jpeg::JpegEncoder;
use image::ImageReader;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{BackendSpec, LatentCodec, Registry, RegenerationBackend};
use crate::error::{Error, Result};
use crate::detect::CompensatedSum;
use crate::linops;
use crate::signal::{device, to_vec, ImageGrid};

/// Pinned JPEG codec, recorded in run metadata.
pub const JPEG_CODEC: &str = "image-rs jpeg encoder/decoder 0.25";

fn factor_checked(factor: f64) -> Result<()> {
    if factor.is_finite() && factor > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("factor must be positive, got {factor}")))
    }
}

pub fn brightness(image: &ImageGrid, factor: f64) -> Result<ImageGrid> {
    factor_checked(factor)?;
    ImageGrid::from_tensor((image.tensor() * factor)?)?.clamped()
}

/// Scales deviations from the global image mean.
pub fn contrast(image: &ImageGrid, factor: f64) -> Result<ImageGrid> {
    factor_checked(factor)?;
    let values = image.to_vec()?;
    let mut sum = CompensatedSum::default();
    for &v in &values {
        sum.add(v);
    }
    let mean = sum.value() / values.len() as f64;
    let out = ((image.tensor() - mean)? * factor)?.affine(1.0, mean)?;
    ImageGrid::from_tensor(out)?.clamped()
}

pub fn jpeg(image: &ImageGrid, quality: f64) -> Result<ImageGrid> {
    if !(1.0..=100.0).contains(&quality) || quality.fract() != 0.0 {
        return Err(Error::invalid(format!("jpeg quality must be an integer in [1, 100], got {quality}")));
    }
    let rgb = image.to_rgb8()?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality as u8).encode_image(&rgb)?;
    let decoded = ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg)
        .decode()?
        .to_rgb8();
    ImageGrid::from_rgb8(&decoded)
}

pub fn gaussian_blur(image: &ImageGrid, kernel: f64) -> Result<ImageGrid> {
    if !(kernel >= 1.0) || kernel.fract() != 0.0 || (kernel as usize) % 2 == 0 {
        return Err(Error::invalid(format!("blur kernel must be an odd integer >= 1, got {kernel}")));
    }
    let k = kernel as usize;
    if k == 1 {
        return Ok(image.clone());
    }
    let out = linops::gaussian_blur(image.tensor(), k, linops::sigma_for_kernel(k))?;
    ImageGrid::from_tensor(out)?.clamped()
}

/// The pre-clamp noise field added by [`gaussian_noise`].
pub fn noise_field(shape: (usize, usize, usize), sigma: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, device())?)
}

pub fn gaussian_noise(image: &ImageGrid, sigma: f64, seed: u64) -> Result<ImageGrid> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let noise = noise_field((3, image.height(), image.width()), sigma, seed)?;
    ImageGrid::from_tensor((image.tensor() + noise)?)?.clamped()
}

/// Bilinear downscale by `scale`, then back up to the original size.
pub fn resize(image: &ImageGrid, scale: f64) -> Result<ImageGrid> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!("resize scale must be in (0, 1], got {scale}")));
    }
    let (h, w) = (image.height(), image.width());
    if scale == 1.0 {
        return Ok(image.clone());
    }
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let small = linops::resize(image.tensor(), sh, sw)?;
    ImageGrid::from_tensor(linops::resize(&small, h, w)?)?.clamped()
}

/// Counterclockwise rotation by a multiple of 90 degrees.
pub fn rotate(image: &ImageGrid, degrees: f64) -> Result<ImageGrid> {
    if !degrees.is_finite() || degrees % 90.0 != 0.0 {
        return Err(Error::invalid(format!("rotation must be a multiple of 90 degrees, got {degrees}")));
    }
    let turns = ((degrees / 90.0) as i64).rem_euclid(4) as usize;
    if turns % 2 == 1 && image.height() != image.width() {
        return Err(Error::invalid("quarter-turn rotation needs a square image"));
    }
    ImageGrid::from_tensor(linops::rot90(image.tensor(), turns)?)
}

/// Centered crop keeping `area` of the pixels, resized back.
pub fn crop(image: &ImageGrid, area: f64) -> Result<ImageGrid> {
    if !(area > 0.0 && area <= 1.0) {
        return Err(Error::invalid(format!("crop area must be in (0, 1], got {area}")));
    }
    if area == 1.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height() as f64, image.width() as f64);
    let side = area.sqrt();
    let (ch, cw) = (h * side, w * side);
    let window = ((h - ch) / 2.0, (w - cw) / 2.0, ch, cw);
    let out = linops::crop_resize(image.tensor(), window, image.height(), image.width())?;
    ImageGrid::from_tensor(out)?.clamped()
}

pub fn vae_regen(image: &ImageGrid, backend: &dyn RegenerationBackend, quality: f64) -> Result<ImageGrid> {
    backend.regenerate(image, quality, 0)
}

pub fn diffusion_regen(
    image: &ImageGrid,
    backend: &dyn RegenerationBackend,
    steps: f64,
    seed: u64,
) -> Result<ImageGrid> {
    backend.regenerate(image, steps, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversaryParams {
    pub eps: f64,
    pub steps: usize,
    /// Defaults to `eps / 10`.
    pub step_size: Option<f64>,
}

impl AdversaryParams {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            steps: 50,
            step_size: None,
        }
    }
}

/// Outcome of the latent PGD attack.
pub struct AdversaryResult {
    pub image: ImageGrid,
    pub initial_objective: f64,
    pub objective: f64,
}

/// Projected sign-gradient ascent on `‖E(I_adv) − E(I)‖₂` inside the L∞
/// ball of radius `eps`, starting from a seeded uniform point of the ball.
pub fn latent_adversary_run(
    image: &ImageGrid,
    codec: &dyn LatentCodec,
    params: AdversaryParams,
    seed: u64,
) -> Result<AdversaryResult> {
    let AdversaryParams { eps, steps, step_size } = params;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid(format!("adversary eps must be positive, got {eps}")));
    }
    let step_size = step_size.unwrap_or(eps / 10.0);
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {step_size}")));
    }
    if !codec.differentiable() {
        return Err(Error::Capability {
            name: codec.name().to_string(),
            capability: "gradients".to_string(),
        });
    }
    let x0 = image.to_vec()?;
    let dims = image.tensor().dims().to_vec();
    let target = codec.encode(image.tensor())?.detach();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // the objective has zero gradient at the clean image, so start inside the ball
    let mut x: Vec<f64> = x0
        .iter()
        .map(|&v| {
            let d: f64 = rng.random_range(-eps..=eps);
            project(v + d, v, eps)
        })
        .collect();
    let objective_and_grad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let var = Var::from_tensor(&Tensor::from_slice(x, dims.as_slice(), device())?)?;
        let diff = (codec.encode(var.as_tensor())? - &target)?;
        let sq = diff.sqr()?.sum_all()?;
        let grads = sq.backward()?;
        let g = match grads.get(&var) {
            Some(g) => to_vec(g)?,
            None => vec![0.0; x.len()],
        };
        Ok((sq.to_scalar::<f64>()?.sqrt(), g))
    };
    let (initial, mut grad) = objective_and_grad(&x)?;
    let mut best = (initial, x.clone());
    for _ in 0..steps {
        for ((xi, &gi), &oi) in x.iter_mut().zip(&grad).zip(&x0) {
            let s = if gi > 0.0 {
                1.0
            } else if gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *xi = project(*xi + step_size * s, oi, eps);
        }
        let (obj, g) = objective_and_grad(&x)?;
        if !obj.is_finite() {
            return Err(Error::Attack {
                name: "latent_adversary".into(),
                source: Box::new(Error::Diverged { step: 0 }),
            });
        }
        if obj > best.0 {
            best = (obj, x.clone());
        }
        grad = g;
    }
    let (h, w) = (image.height(), image.width());
    let out = Tensor::from_vec(best.1, (3, h, w), device())?;
    Ok(AdversaryResult {
        image: ImageGrid::from_tensor(out)?,
        initial_objective: initial,
        objective: best.0,
    })
}

fn project(v: f64, origin: f64, eps: f64) -> f64 {
    v.clamp(origin - eps, origin + eps).clamp(0.0, 1.0)
}

pub fn latent_adversary(
    image: &ImageGrid,
    codec: &dyn LatentCodec,
    params: AdversaryParams,
    seed: u64,
) -> Result<ImageGrid> {
    Ok(latent_adversary_run(image, codec, params, seed)?.image)
}

/// One configured attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
    /// Output key; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Backend for regeneration and adversarial attacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

/// Registered attack names and their parameters with defaults.
pub fn attack_schema(name: &str) -> Option<&'static [(&'static str, f64)]> {
    Some(match name {
        "none" => &[],
        "brightness" | "contrast" => &[("factor", 0.5)],
        "jpeg" => &[("quality", 50.0)],
        "gaussian_blur" => &[("kernel", 5.0)],
        "gaussian_noise" => &[("sigma", 0.05)],
        "resize" => &[("scale", 0.3)],
        "rotate" => &[("degrees", 90.0)],
        "crop" => &[("area", 0.7)],
        "vae_regen" => &[("quality", 3.0)],
        "diffusion_regen" => &[("steps", 60.0)],
        // step_size 0 means eps / 10
        "latent_adversary" => &[("eps", 8.0 / 255.0), ("steps", 50.0), ("step_size", 0.0)],
        _ => return None,
    })
}

pub const ATTACK_NAMES: [&str; 12] = [
    "none",
    "brightness",
    "contrast",
    "jpeg",
    "gaussian_blur",
    "gaussian_noise",
    "resize",
    "rotate",
    "crop",
    "vae_regen",
    "diffusion_regen",
    "latent_adversary",
];

fn default_backend(name: &str) -> Option<&'static str> {
    match name {
        "vae_regen" | "latent_adversary" => Some("tiny-ae"),
        "diffusion_regen" => Some("noise-smooth"),
        _ => None,
    }
}

impl AttackSpec {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            params: BTreeMap::new(),
            seed: 0,
            label: None,
            backend: None,
        }
    }

    pub fn with(mut self, param: &str, value: f64) -> Self {
        self.params.insert(param.to_string(), value);
        self
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }

    pub fn backend_name(&self) -> Option<&str> {
        self.backend.as_deref().or_else(|| default_backend(&self.name))
    }

    pub fn validate(&self) -> Result<()> {
        let schema = attack_schema(&self.name).ok_or_else(|| {
            Error::invalid(format!(
                "unknown attack `{}` (registered: {})",
                self.name,
                ATTACK_NAMES.join(", ")
            ))
        })?;
        for (k, v) in &self.params {
            if !schema.iter().any(|(p, _)| p == k) {
                return Err(Error::invalid(format!("attack `{}` has no parameter `{k}`", self.name)));
            }
            if !v.is_finite() {
                return Err(Error::invalid(format!("attack `{}` parameter `{k}` is not finite", self.name)));
            }
        }
        if self.backend.is_some() && default_backend(&self.name).is_none() {
            return Err(Error::invalid(format!("attack `{}` takes no backend", self.name)));
        }
        Ok(())
    }

    /// Parameter value with its schema default.
    pub fn param(&self, key: &str) -> f64 {
        self.params.get(key).copied().unwrap_or_else(|| {
            attack_schema(&self.name)
                .and_then(|s| s.iter().find(|(p, _)| *p == key).map(|(_, v)| *v))
                .unwrap_or(0.0)
        })
    }

    /// Applies the attack to `image`.
    pub fn apply(&self, image: &ImageGrid, registry: &Registry) -> Result<ImageGrid> {
        self.validate()?;
        let p = |k: &str| self.param(k);
        let backend = || BackendSpec::named(self.backend_name().unwrap_or_default());
        match self.name.as_str() {
            "none" => Ok(image.clone()),
            "brightness" => brightness(image, p("factor")),
            "contrast" => contrast(image, p("factor")),
            "jpeg" => jpeg(image, p("quality")),
            "gaussian_blur" => gaussian_blur(image, p("kernel")),
            "gaussian_noise" => gaussian_noise(image, p("sigma"), self.seed),
            "resize" => resize(image, p("scale")),
            "rotate" => rotate(image, p("degrees")),
            "crop" => crop(image, p("area")),
            "vae_regen" => vae_regen(image, registry.regeneration(&backend())?.as_ref(), p("quality")),
            "diffusion_regen" => {
                let steps = p("steps");
                if steps < 1.0 {
                    return Err(Error::invalid(format!("diffusion steps must be >= 1, got {steps}")));
                }
                diffusion_regen(image, registry.regeneration(&backend())?.as_ref(), steps, self.seed)
            }
            "latent_adversary" => {
                let steps = p("steps");
                if steps < 0.0 || steps.fract() != 0.0 {
                    return Err(Error::invalid(format!("adversary steps must be a nonnegative integer, got {steps}")));
                }
                let step = p("step_size");
                let params = AdversaryParams {
                    eps: p("eps"),
                    steps: steps as usize,
                    step_size: (step != 0.0).then_some(step),
                };
                latent_adversary(image, registry.latent_codec(&backend())?.as_ref(), params, self.seed)
            }
            _ => unreachable!("validated above"),
        }
    }
}

/// The default nine-attack battery.
pub fn default_battery() -> Vec<AttackSpec> {
    vec![
        AttackSpec::new("none"),
        AttackSpec::new("brightness"),
        AttackSpec::new("contrast"),
        AttackSpec::new("jpeg"),
        AttackSpec::new("gaussian_blur"),
        AttackSpec::new("gaussian_noise"),
        AttackSpec::new("vae_regen"),
        AttackSpec::new("diffusion_regen"),
        AttackSpec::new("latent_adversary"),
    ]
}

/// Applies every attack to the original image independently.
pub fn run_battery(
    image: &ImageGrid,
    specs: &[AttackSpec],
    registry: &Registry,
) -> Result<BTreeMap<String, ImageGrid>> {
    check_battery(specs)?;
    let mut out = BTreeMap::new();
    for spec in specs {
        let attacked = spec.apply(image, registry).map_err(|e| Error::Attack {
            name: spec.label().to_string(),
            source: Box::new(e),
        })?;
        out.insert(spec.label().to_string(), attacked);
    }
    Ok(out)
}

/// Validates specs and label uniqueness.
pub fn check_battery(specs: &[AttackSpec]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for spec in specs {
        spec.validate().map_err(|e| Error::Attack {
            name: spec.label().to_string(),
            source: Box::new(e),
        })?;
        if !seen.insert(spec.label()) {
            return Err(Error::Config(format!("duplicate attack label `{}`", spec.label())));
        }
    }
    Ok(())
}

/// Battery description file: a JSON object `{"attacks": [AttackSpec, ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryFile {
    pub attacks: Vec<AttackSpec>,
}

pub fn parse_battery(text: &str) -> Result<Vec<AttackSpec>> {
    let file: BatteryFile = serde_json::from_str(text).map_err(|e| Error::parse("attacks", e.to_string()))?;
    check_battery(&file.attacks)?;
    Ok(file.attacks)
}

pub fn load_battery(path: impl AsRef<Path>) -> Result<Vec<AttackSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_battery(&text)
}

pub fn battery_to_json(specs: &[AttackSpec]) -> String {
    serde_json::to_string_pretty(&BatteryFile {
        attacks: specs.to_vec(),
    })
    .expect("battery serializes")
}
