//! A small convolutional autoencoder with 8× spatial downsampling and a
//! 4-channel latent, trained on a seeded synthetic corpus. It stands in for
//! a pretrained image VAE in desk-scale runs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{model_cache_dir, BackendInfo, BackendKind, BackendSpec, LatentCodec};
use crate::corpus;
use crate::error::{Error, Result};
use crate::linops;
use crate::metrics;
use crate::signal::{device, ImageGrid, DTYPE};

pub const LATENT_CHANNELS: usize = 4;
const MIN_CORPUS: usize = 16;
const WEIGHTS_VERSION: u32 = 1;

/// `(name, out, in, kernel)` for every convolution, in forward order.
const LAYERS: [(&str, usize, usize, usize); 7] = [
    ("enc1", 8, 3, 4),
    ("enc2", 16, 8, 4),
    ("enc3", LATENT_CHANNELS, 16, 4),
    ("dec1", 16, LATENT_CHANNELS, 3),
    ("dec2", 16, 16, 3),
    ("dec3", 8, 16, 3),
    ("dec4", 3, 8, 3),
];

/// Deterministic training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyAeTraining {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TinyAeTraining {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

impl TinyAeTraining {
    fn tag(&self) -> String {
        format!(
            "v{WEIGHTS_VERSION}-s{}-b{}-lr{}-seed{}",
            self.steps, self.batch, self.learning_rate, self.seed
        )
    }
}

pub struct TinyAe {
    weights: HashMap<String, Tensor>,
    provenance: String,
}

struct Net<'a> {
    w: &'a HashMap<String, Tensor>,
}

impl Net<'_> {
    fn conv(&self, x: &Tensor, layer: &str, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
        let w = &self.w[&format!("{layer}.weight")];
        let b = &self.w[&format!("{layer}.bias")];
        let y = x.conv2d(w, pad, stride, 1, 1)?;
        y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)
    }

    fn upsample(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.dims()[2], x.dims()[3]);
        let rows = linops::resample_matrix(h, 0.0, h as f64, 2 * h)?.to_dtype(x.dtype())?;
        let cols = linops::resample_matrix(w, 0.0, w as f64, 2 * w)?.to_dtype(x.dtype())?;
        Ok(rows.broadcast_matmul(x)?.broadcast_matmul(&cols.t()?)?)
    }

    /// `(N, 3, H, W)` to `(N, 4, H/8, W/8)`.
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv(&x.affine(2.0, -1.0)?, "enc1", 2, 1)?.tanh()?;
        let h = self.conv(&h, "enc2", 2, 1)?.tanh()?;
        Ok(self.conv(&h, "enc3", 2, 1)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.conv(z, "dec1", 1, 1)?.tanh()?;
        let h = self.conv(&self.upsample(&h)?, "dec2", 1, 1)?.tanh()?;
        let h = self.conv(&self.upsample(&h)?, "dec3", 1, 1)?.tanh()?;
        let y = self.conv(&self.upsample(&h)?, "dec4", 1, 1)?;
        // logistic output written through tanh to stay inside (0, 1)
        Ok((((y * 0.5)?.tanh()? + 1.0)? * 0.5)?)
    }
}

fn init_weights(seed: u64) -> Result<HashMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = HashMap::new();
    for (name, o, i, k) in LAYERS {
        let fan = (i * k * k) as f64;
        let w: Vec<f64> = (0..o * i * k * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / fan.sqrt())
            .collect();
        out.insert(format!("{name}.weight"), Tensor::from_vec(w, (o, i, k, k), device())?);
        out.insert(format!("{name}.bias"), Tensor::zeros(o, DTYPE, device())?);
    }
    Ok(out)
}

fn check_image_dims(dims: &[usize]) -> Result<(usize, usize)> {
    match dims {
        &[3, h, w] if h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0 => Ok((h, w)),
        d => Err(Error::invalid(format!(
            "tiny-ae expects a (3, H, W) image with H and W multiples of 8, got {d:?}"
        ))),
    }
}

impl TinyAe {
    /// Trains on `corpus` (at least 16 images of equal size, sides multiple
    /// of 8) with a fixed seed and step count.
    pub fn train(corpus: &[ImageGrid], schedule: &TinyAeTraining) -> Result<Self> {
        if corpus.len() < MIN_CORPUS {
            return Err(Error::Training(format!(
                "tiny-ae needs at least {MIN_CORPUS} training images, got {}",
                corpus.len()
            )));
        }
        let dims = corpus[0].tensor().dims().to_vec();
        check_image_dims(&dims).map_err(|e| Error::Training(e.to_string()))?;
        if corpus.iter().any(|img| img.tensor().dims() != dims.as_slice()) {
            return Err(Error::Training("training images must share one size".into()));
        }
        if schedule.batch == 0 {
            return Err(Error::Training("batch size must be positive".into()));
        }

        // train in f32 for speed, keep f64 for inference
        let data: Vec<Tensor> = corpus
            .iter()
            .map(|img| img.tensor().to_dtype(DType::F32))
            .collect::<candle_core::Result<_>>()?;
        let init = init_weights(schedule.seed)?;
        let mut vars: HashMap<String, Var> = HashMap::new();
        for (k, v) in &init {
            vars.insert(k.clone(), Var::from_tensor(&v.to_dtype(DType::F32)?)?);
        }
        let mut names: Vec<&String> = vars.keys().collect();
        names.sort();
        let params: Vec<Var> = names.iter().map(|n| vars[*n].clone()).collect();
        let mut opt = AdamW::new(
            params,
            ParamsAdamW {
                lr: schedule.learning_rate,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x7A1E);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        for step in 0..schedule.steps {
            if step == schedule.steps * 3 / 4 {
                opt.set_learning_rate(schedule.learning_rate * 0.3);
            }
            let mut batch = Vec::with_capacity(schedule.batch);
            for _ in 0..schedule.batch.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(data[order[cursor]].clone());
                cursor += 1;
            }
            let x = Tensor::stack(&batch, 0)?;
            let current: HashMap<String, Tensor> =
                vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
            let net = Net { w: &current };
            let recon = net.decode(&net.encode(&x)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            let value = loss.to_scalar::<f32>()?;
            if !value.is_finite() {
                return Err(Error::Training(format!("loss diverged at step {step}")));
            }
            opt.backward_step(&loss)?;
        }

        let mut weights = HashMap::new();
        for (k, v) in &vars {
            weights.insert(k.clone(), v.as_tensor().to_dtype(DTYPE)?);
        }
        let model = Self {
            weights,
            provenance: format!("trained {} on {} images", schedule.tag(), corpus.len()),
        };
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        candle_core::safetensors::save(&self.weights, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found"),
            ));
        }
        let weights = candle_core::safetensors::load(path, device())?;
        for (name, o, i, k) in LAYERS {
            let w = weights
                .get(&format!("{name}.weight"))
                .ok_or_else(|| Error::parse(format!("{name}.weight"), "missing tensor"))?;
            if w.dims() != [o, i, k, k] {
                return Err(Error::parse(format!("{name}.weight"), format!("unexpected shape {:?}", w.dims())));
            }
            if !weights.contains_key(&format!("{name}.bias")) {
                return Err(Error::parse(format!("{name}.bias"), "missing tensor"));
            }
        }
        let weights = weights
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DTYPE)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            weights,
            provenance: format!("loaded from {}", path.display()),
        })
    }

    /// The default model: trained on 32 synthetic 64×64 textures, cached in
    /// the model-cache directory and shared across the process.
    pub fn pretrained() -> Result<Arc<TinyAe>> {
        static SHARED: OnceLock<Mutex<Option<Arc<TinyAe>>>> = OnceLock::new();
        let slot = SHARED.get_or_init(|| Mutex::new(None));
        let mut guard = slot.lock().expect("tiny-ae cache poisoned");
        if let Some(m) = guard.as_ref() {
            return Ok(m.clone());
        }
        let schedule = TinyAeTraining::default();
        let path = Self::cache_path(&schedule);
        let model = match Self::load(&path) {
            Ok(mut m) => {
                m.provenance = format!("trained {} (cached at {})", schedule.tag(), path.display());
                m
            }
            Err(_) => {
                let corpus = Self::default_corpus()?;
                let m = Self::train(&corpus, &schedule)?;
                if let Some(dir) = path.parent() {
                    let _ = std::fs::create_dir_all(dir);
                }
                // write then rename so concurrent processes never read a partial file
                let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                if m.save(&tmp).is_ok() {
                    let _ = std::fs::rename(&tmp, &path);
                }
                m
            }
        };
        let model = Arc::new(model);
        *guard = Some(model.clone());
        Ok(model)
    }

    /// The corpus the default model is trained on.
    pub fn default_corpus() -> Result<Vec<ImageGrid>> {
        corpus::synthetic_textures(32, 64, 0)
    }

    fn cache_path(schedule: &TinyAeTraining) -> PathBuf {
        model_cache_dir().join(format!("tiny-ae-{}.safetensors", schedule.tag()))
    }

    pub(crate) fn from_spec(spec: &BackendSpec) -> Result<Arc<TinyAe>> {
        match &spec.weights {
            Some(path) => Ok(Arc::new(Self::load(path)?)),
            None => Self::pretrained(),
        }
    }

    /// Mean reconstruction PSNR over `images`.
    pub fn reconstruction_psnr(&self, images: &[ImageGrid]) -> Result<f64> {
        let mut total = 0.0;
        for img in images {
            let recon = self.decode_grid(&self.encode_grid(img)?)?;
            total += metrics::psnr(img, &recon)?;
        }
        Ok(total / images.len().max(1) as f64)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(|t| t.elem_count()).sum()
    }
}

impl LatentCodec for TinyAe {
    fn name(&self) -> &str {
        "tiny-ae"
    }

    fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        check_image_dims(&[3, height, width])?;
        Ok((LATENT_CHANNELS, height / 8, width / 8))
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        check_image_dims(image.dims())?;
        let net = Net { w: &self.weights };
        Ok(net.encode(&image.unsqueeze(0)?)?.squeeze(0)?)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        match latent.dims() {
            &[LATENT_CHANNELS, _, _] => {}
            d => {
                return Err(Error::invalid(format!(
                    "tiny-ae latent must have shape ({LATENT_CHANNELS}, h, w), got {d:?}"
                )))
            }
        }
        let net = Net { w: &self.weights };
        Ok(net.decode(&latent.unsqueeze(0)?)?.squeeze(0)?)
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::new(BackendKind::LatentCodec, "tiny-ae")
            .with("provenance", &self.provenance)
            .with("parameters", self.parameter_count())
            .with("latent", format!("{LATENT_CHANNELS} x H/8 x W/8"))
    }
}
