//! Backend contracts for the pretrained models the pipeline consumes, plus
//! small built-in backends that keep everything runnable on a laptop CPU.
//!
//! The embedder and the attack battery only ever see the traits defined
//! here. Heavyweight backends (a Stable Diffusion VAE, DINO v2, LPIPS, ...)
//! plug in by registering a factory under a new name.

mod identity;
mod patch_proj;
mod perceptual;
mod regen;
mod tiny_ae;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{to_vec, ImageGrid, LatentGrid};

pub use identity::IdentityCodec;
pub use patch_proj::PatchProjEncoder;
pub use perceptual::SmoothL2;
pub use regen::{CodecRegeneration, NoiseSmoothRegeneration};
pub use tiny_ae::{TinyAe, TinyAeTraining};

/// Environment variable naming the directory where trained desk-scale
/// weights are cached.
pub const MODEL_CACHE_ENV: &str = "LFMARK_MODEL_CACHE";

pub fn model_cache_dir() -> PathBuf {
    std::env::var_os(MODEL_CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("lfmark-models"))
}

/// Identity and provenance of a backend, recorded alongside every run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub kind: String,
    pub name: String,
    pub details: BTreeMap<String, String>,
}

impl BackendInfo {
    pub fn new(kind: BackendKind, name: &str) -> Self {
        Self {
            kind: kind.to_string(),
            name: name.to_string(),
            details: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.details.insert(key.to_string(), value.to_string());
        self
    }
}

/// Encoder/decoder pair mapping `(3, H, W)` images to `(C, h, w)` latents.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)>;
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;
    fn info(&self) -> BackendInfo;

    /// Whether gradients flow through `encode` and `decode`.
    fn differentiable(&self) -> bool {
        true
    }

    /// True when encode and decode are exact no-ops.
    fn is_identity(&self) -> bool {
        false
    }

    fn encode_grid(&self, image: &ImageGrid) -> Result<LatentGrid> {
        LatentGrid::new(self.encode(image.tensor())?)
    }

    fn decode_grid(&self, latent: &LatentGrid) -> Result<ImageGrid> {
        ImageGrid::from_tensor(self.decode(latent.tensor())?)
    }
}

/// Image feature extractor whose first `N` outputs carry the message.
pub trait FeatureEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// `(3, H, W)` image to a feature vector of length `feature_dim()`.
    fn extract(&self, image: &Tensor) -> Result<Tensor>;
    fn info(&self) -> BackendInfo;

    fn features(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        to_vec(&self.extract(image.tensor())?)
    }
}

/// Differentiable perceptual distance between two images.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    /// Scalar tensor distance.
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
    fn info(&self) -> BackendInfo;

    fn distance_value(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(Error::invalid("perceptual distance needs images of equal shape"));
        }
        Ok(self.distance(a.tensor(), b.tensor())?.to_scalar::<f64>()?)
    }
}

/// Model that re-synthesizes an image, used as a removal attack.
pub trait RegenerationBackend: Send + Sync {
    fn name(&self) -> &str;
    /// `strength` is backend specific: a quality index or a step count.
    fn regenerate(&self, image: &ImageGrid, strength: f64, seed: u64) -> Result<ImageGrid>;
    fn info(&self) -> BackendInfo;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    LatentCodec,
    FeatureEncoder,
    PerceptualMetric,
    Regeneration,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::LatentCodec => "latent-codec",
            BackendKind::FeatureEncoder => "feature-encoder",
            BackendKind::PerceptualMetric => "perceptual-metric",
            BackendKind::Regeneration => "regeneration",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent-codec" => Ok(BackendKind::LatentCodec),
            "feature-encoder" => Ok(BackendKind::FeatureEncoder),
            "perceptual-metric" | "perceptual" => Ok(BackendKind::PerceptualMetric),
            "regeneration" => Ok(BackendKind::Regeneration),
            other => Err(Error::Config(format!("unknown backend kind `{other}`"))),
        }
    }
}

/// A backend selection as written in a run configuration.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
}

impl BackendSpec {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }
}

#[derive(Clone)]
pub enum Backend {
    LatentCodec(Arc<dyn LatentCodec>),
    FeatureEncoder(Arc<dyn FeatureEncoder>),
    PerceptualMetric(Arc<dyn PerceptualMetric>),
    Regeneration(Arc<dyn RegenerationBackend>),
}

impl Backend {
    pub fn info(&self) -> BackendInfo {
        match self {
            Backend::LatentCodec(b) => b.info(),
            Backend::FeatureEncoder(b) => b.info(),
            Backend::PerceptualMetric(b) => b.info(),
            Backend::Regeneration(b) => b.info(),
        }
    }

    fn kind(&self) -> BackendKind {
        match self {
            Backend::LatentCodec(_) => BackendKind::LatentCodec,
            Backend::FeatureEncoder(_) => BackendKind::FeatureEncoder,
            Backend::PerceptualMetric(_) => BackendKind::PerceptualMetric,
            Backend::Regeneration(_) => BackendKind::Regeneration,
        }
    }
}

pub type Factory = Box<dyn Fn(&BackendSpec) -> Result<Backend> + Send + Sync>;

/// Named backend factories with lazy, cached construction.
pub struct Registry {
    factories: BTreeMap<(BackendKind, String), Factory>,
    cache: Mutex<HashMap<(BackendKind, BackendSpec), Backend>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Registry holding every built-in desk-scale backend.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(BackendKind::LatentCodec, "identity", |_| {
            Ok(Backend::LatentCodec(Arc::new(IdentityCodec)))
        });
        r.register(BackendKind::LatentCodec, "tiny-ae", |spec| {
            Ok(Backend::LatentCodec(TinyAe::from_spec(spec)?))
        });
        r.register(BackendKind::FeatureEncoder, "patch-proj-64", |_| {
            Ok(Backend::FeatureEncoder(Arc::new(PatchProjEncoder::new(64)?)))
        });
        r.register(BackendKind::PerceptualMetric, "l2-smooth", |_| {
            Ok(Backend::PerceptualMetric(Arc::new(SmoothL2::default())))
        });
        r.register(BackendKind::Regeneration, "tiny-ae", |spec| {
            let codec = TinyAe::from_spec(spec)?;
            Ok(Backend::Regeneration(Arc::new(CodecRegeneration::new(codec))))
        });
        r.register(BackendKind::Regeneration, "noise-smooth", |_| {
            Ok(Backend::Regeneration(Arc::new(NoiseSmoothRegeneration)))
        });
        r
    }

    pub fn register<F>(&mut self, kind: BackendKind, name: &str, factory: F)
    where
        F: Fn(&BackendSpec) -> Result<Backend> + Send + Sync + 'static,
    {
        self.factories.insert((kind, name.to_string()), Box::new(factory));
    }

    pub fn available(&self, kind: BackendKind) -> Vec<String> {
        self.factories
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, n)| n.clone())
            .collect()
    }

    pub fn get(&self, kind: BackendKind, spec: &BackendSpec) -> Result<Backend> {
        let factory = self
            .factories
            .get(&(kind, spec.name.clone()))
            .ok_or_else(|| Error::Registry {
                kind: kind.to_string(),
                name: spec.name.clone(),
                available: self.available(kind),
            })?;
        // the guard stays held while a backend loads so it loads once
        let mut cache = self.cache.lock().expect("registry cache poisoned");
        if let Some(b) = cache.get(&(kind, spec.clone())) {
            return Ok(b.clone());
        }
        let backend = factory(spec)?;
        if backend.kind() != kind {
            return Err(Error::Config(format!(
                "factory for {kind} `{}` produced a {} backend",
                spec.name,
                backend.kind()
            )));
        }
        cache.insert((kind, spec.clone()), backend.clone());
        Ok(backend)
    }

    pub fn latent_codec(&self, spec: &BackendSpec) -> Result<Arc<dyn LatentCodec>> {
        match self.get(BackendKind::LatentCodec, spec)? {
            Backend::LatentCodec(b) => Ok(b),
            _ => unreachable!("kind checked in get"),
        }
    }

    pub fn feature_encoder(&self, spec: &BackendSpec) -> Result<Arc<dyn FeatureEncoder>> {
        match self.get(BackendKind::FeatureEncoder, spec)? {
            Backend::FeatureEncoder(b) => Ok(b),
            _ => unreachable!("kind checked in get"),
        }
    }

    pub fn perceptual_metric(&self, spec: &BackendSpec) -> Result<Arc<dyn PerceptualMetric>> {
        match self.get(BackendKind::PerceptualMetric, spec)? {
            Backend::PerceptualMetric(b) => Ok(b),
            _ => unreachable!("kind checked in get"),
        }
    }

    pub fn regeneration(&self, spec: &BackendSpec) -> Result<Arc<dyn RegenerationBackend>> {
        match self.get(BackendKind::Regeneration, spec)? {
            Backend::Regeneration(b) => Ok(b),
            _ => unreachable!("kind checked in get"),
        }
    }
}

/// Process-wide default registry.
pub fn registry() -> &'static Registry {
    static REGISTRY: std::sync::OnceLock<Registry> = std::sync::OnceLock::new();
    REGISTRY.get_or_init(Registry::with_defaults)
}
