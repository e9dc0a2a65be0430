//! Versioned TOML run configuration.

use std::path::Path;
use std::sync::Arc;

use lfmark_core::adapters::BackendInfo;
use lfmark_core::embed::DESK_LEARNING_RATE;
use lfmark_core::Domain;
use lfmark_core::{registry, BackendSpec, EmbedConfig, FeatureEncoder, LatentCodec, PerceptualMetric};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{CliError, CliResult, ConfigContext};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub embed: EmbedConfig,
    pub backends: Backends,
    pub detect: DetectConfig,
    /// Square side length inputs are resized to before embedding.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            embed: EmbedConfig::default(),
            backends: Backends::default(),
            detect: DetectConfig::default(),
            resolution: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    #[serde(deserialize_with = "spec_or_name")]
    pub codec: BackendSpec,
    #[serde(deserialize_with = "spec_or_name")]
    pub feature: BackendSpec,
    #[serde(deserialize_with = "spec_or_name")]
    pub perceptual: BackendSpec,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            codec: BackendSpec::named("tiny-ae"),
            feature: BackendSpec::named("patch-proj-64"),
            perceptual: BackendSpec::named("l2-smooth"),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecRepr {
    Name(String),
    Full(BackendSpec),
}

/// Accepts either `codec = "identity"` or `codec = { name = "identity", ... }`.
fn spec_or_name<'de, D: Deserializer<'de>>(d: D) -> Result<BackendSpec, D::Error> {
    Ok(match SpecRepr::deserialize(d)? {
        SpecRepr::Name(n) => BackendSpec::named(&n),
        SpecRepr::Full(s) => s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub target_fpr: f64,
    /// FPR operating points of the ROC curve data.
    pub fpr_grid: Vec<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            target_fpr: 1e-3,
            fpr_grid: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        }
    }
}

fn check_fpr(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(CliError::config(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).config_ctx("config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).config_ctx(&format!("cannot read config {}", path.display()))?;
        Self::parse(&text)
    }

    /// Loads `path`, or the defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.embed.validate().config_ctx("embed")?;
        check_fpr("detect.target_fpr", self.detect.target_fpr)?;
        for &f in &self.detect.fpr_grid {
            check_fpr("detect.fpr_grid", f)?;
        }
        if self.resolution == Some(0) {
            return Err(CliError::config("resolution must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Adam step per perturbation element when no learning rate is configured.
/// A frequency bin step of `lr` moves grid values by about `lr / sqrt(h w)`,
/// so frequency domains scale the rate by `sqrt(h w)`.
pub const AUTO_ELEMENT_STEP: f64 = DESK_LEARNING_RATE / 64.0;

/// Learning rate for a perturbation grid of `h × w` in `domain`.
pub fn auto_learning_rate(domain: Domain, h: usize, w: usize) -> f64 {
    if domain.is_frequency() {
        AUTO_ELEMENT_STEP * ((h * w) as f64).sqrt()
    } else {
        AUTO_ELEMENT_STEP
    }
}

/// `embed` with its learning rate fixed for an `height × width` input.
/// Latent noise is dropped for identity codecs, which have no latent space.
pub fn resolve_embed(
    embed: &EmbedConfig,
    codec: &dyn LatentCodec,
    height: usize,
    width: usize,
) -> CliResult<EmbedConfig> {
    let mut e = embed.clone();
    if codec.is_identity() {
        e.latent_noise_std = 0.0;
    }
    if e.learning_rate.is_none() {
        let (h, w) = if e.domain.is_latent() {
            let (_, lh, lw) = codec.latent_shape(height, width)?;
            (lh, lw)
        } else {
            (height, width)
        };
        e.learning_rate = Some(auto_learning_rate(e.domain, h, w));
    }
    Ok(e)
}

/// Resolved model backends of a run.
#[derive(Clone)]
pub struct Pipeline {
    pub codec: Arc<dyn LatentCodec>,
    pub feature: Arc<dyn FeatureEncoder>,
    pub perceptual: Arc<dyn PerceptualMetric>,
}

impl Pipeline {
    pub fn resolve(backends: &Backends) -> CliResult<Self> {
        let reg = registry();
        let wrap = |e: lfmark_core::Error| CliError::backend(e.to_string());
        Ok(Self {
            codec: reg.latent_codec(&backends.codec).map_err(wrap)?,
            feature: reg.feature_encoder(&backends.feature).map_err(wrap)?,
            perceptual: reg.perceptual_metric(&backends.perceptual).map_err(wrap)?,
        })
    }

    /// Feature encoder only, for commands that never touch the codec.
    pub fn feature_only(backends: &Backends) -> CliResult<Arc<dyn FeatureEncoder>> {
        registry()
            .feature_encoder(&backends.feature)
            .map_err(|e| CliError::backend(e.to_string()))
    }

    pub fn infos(&self) -> Vec<BackendInfo> {
        vec![self.codec.info(), self.feature.info(), self.perceptual.info()]
    }
}
