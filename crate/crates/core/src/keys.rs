//! Watermark keys (direction vectors in feature space) and bipolar messages.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::device;

pub const KEY_FORMAT_VERSION: u64 = 1;
pub const DEFAULT_MARGIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyScheme {
    /// Row `i` is the `i`-th standard basis vector.
    CanonicalBasis,
    /// Rows are an orthonormal set drawn from a seeded Gaussian matrix.
    RandomOrthonormal,
}

impl KeyScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeyScheme::CanonicalBasis => "canonical-basis",
            KeyScheme::RandomOrthonormal => "random-orthonormal",
        }
    }
}

impl fmt::Display for KeyScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeyScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical-basis" | "canonical" => Ok(KeyScheme::CanonicalBasis),
            "random-orthonormal" | "orthonormal" => Ok(KeyScheme::RandomOrthonormal),
            other => Err(Error::parse(
                "scheme",
                format!("unknown key scheme `{other}` (expected canonical-basis or random-orthonormal)"),
            )),
        }
    }
}

/// The secret shared by embedding and decoding: `bits` direction vectors in
/// a `feature_dim`-dimensional feature space plus the hinge margin.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkKey {
    bits: usize,
    feature_dim: usize,
    scheme: KeyScheme,
    seed: u64,
    margin: f64,
    vectors: Vec<Vec<f64>>,
}

fn orthonormal_rows(bits: usize, feature_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(bits);
    while rows.len() < bits {
        let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        // modified Gram-Schmidt, applied twice for numerical orthogonality
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    rows
}

fn canonical_rows(bits: usize, feature_dim: usize) -> Vec<Vec<f64>> {
    (0..bits)
        .map(|i| {
            let mut v = vec![0.0; feature_dim];
            v[i] = 1.0;
            v
        })
        .collect()
}

/// Deterministically derives a key from its parameters.
pub fn generate_key(
    bits: usize,
    feature_dim: usize,
    scheme: KeyScheme,
    seed: u64,
    margin: f64,
) -> Result<WatermarkKey> {
    if bits == 0 || feature_dim == 0 {
        return Err(Error::invalid("bits and feature_dim must be positive"));
    }
    if bits > feature_dim {
        return Err(Error::Capacity { bits, feature_dim });
    }
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::invalid(format!("margin must be a nonnegative finite number, got {margin}")));
    }
    let vectors = match scheme {
        KeyScheme::CanonicalBasis => canonical_rows(bits, feature_dim),
        KeyScheme::RandomOrthonormal => orthonormal_rows(bits, feature_dim, seed),
    };
    Ok(WatermarkKey {
        bits,
        feature_dim,
        scheme,
        seed,
        margin,
        vectors,
    })
}

impl WatermarkKey {
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn scheme(&self) -> KeyScheme {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn with_margin(mut self, margin: f64) -> Result<Self> {
        if !(margin.is_finite() && margin >= 0.0) {
            return Err(Error::invalid(format!("margin must be nonnegative, got {margin}")));
        }
        self.margin = margin;
        Ok(self)
    }

    /// The direction vectors as a `(K, N)` tensor.
    pub fn matrix(&self) -> Result<Tensor> {
        let flat: Vec<f64> = self.vectors.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.bits, self.feature_dim), device())?)
    }

    /// Projections `z·v_k` of a feature vector whose first `N` entries are used.
    pub fn project(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() < self.feature_dim {
            return Err(Error::invalid(format!(
                "feature vector has {} entries, key needs {}",
                features.len(),
                self.feature_dim
            )));
        }
        Ok(self
            .vectors
            .iter()
            .map(|v| v.iter().zip(features).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn to_json(&self) -> Value {
        json!({
            "format_version": KEY_FORMAT_VERSION,
            "scheme": self.scheme.as_str(),
            "seed": self.seed,
            "bits": self.bits,
            "feature_dim": self.feature_dim,
            "margin": self.margin,
            "vectors": self.vectors,
        })
    }

    /// Short content hash identifying the key in manifests.
    pub fn key_id(&self) -> String {
        let doc = serde_json::to_vec(&self.to_json()).expect("key serializes");
        let digest = Sha256::digest(&doc);
        hex::encode(&digest[..8])
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("key serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| Error::parse("document", e.to_string()))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::parse("document", "expected a JSON object"))?;
        let get = |field: &str| {
            obj.get(field)
                .ok_or_else(|| Error::parse(field, "missing"))
        };
        let uint = |field: &str| -> Result<u64> {
            get(field)?
                .as_u64()
                .ok_or_else(|| Error::parse(field, "expected a nonnegative integer"))
        };

        let version = uint("format_version")?;
        if version != KEY_FORMAT_VERSION {
            return Err(Error::parse(
                "format_version",
                format!("unsupported version {version}"),
            ));
        }
        let scheme: KeyScheme = get("scheme")?
            .as_str()
            .ok_or_else(|| Error::parse("scheme", "expected a string"))?
            .parse()?;
        let seed = uint("seed")?;
        let bits = uint("bits")? as usize;
        let feature_dim = uint("feature_dim")? as usize;
        let margin = get("margin")?
            .as_f64()
            .ok_or_else(|| Error::parse("margin", "expected a number"))?;
        if bits > feature_dim {
            return Err(Error::Capacity { bits, feature_dim });
        }
        let key = generate_key(bits, feature_dim, scheme, seed, margin)?;

        let rows = get("vectors")?
            .as_array()
            .ok_or_else(|| Error::parse("vectors", "expected an array of rows"))?;
        if rows.len() != bits {
            return Err(Error::parse(
                "vectors",
                format!("expected {bits} rows, found {}", rows.len()),
            ));
        }
        let mut vectors = Vec::with_capacity(bits);
        for (i, row) in rows.iter().enumerate() {
            let row = row
                .as_array()
                .ok_or_else(|| Error::parse(format!("vectors[{i}]"), "expected an array"))?;
            if row.len() != feature_dim {
                return Err(Error::parse(
                    format!("vectors[{i}]"),
                    format!("expected {feature_dim} entries, found {}", row.len()),
                ));
            }
            let parsed: Option<Vec<f64>> = row.iter().map(Value::as_f64).collect();
            vectors.push(parsed.ok_or_else(|| Error::parse(format!("vectors[{i}]"), "non-numeric entry"))?);
        }
        if vectors != key.vectors {
            return Err(Error::parse(
                "vectors",
                format!("stored matrix does not match regeneration from scheme {scheme} seed {seed}"),
            ));
        }
        Ok(key)
    }
}

pub fn save_key(key: &WatermarkKey, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, key.to_json_string()).map_err(|e| Error::io(path, e))
}

pub fn load_key(path: impl AsRef<Path>) -> Result<WatermarkKey> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    WatermarkKey::from_json_str(&text)
}

/// A bipolar message over `{-1, +1}`. Serialized as its binary view, a
/// string of `0`/`1` characters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Message {
    values: Vec<i8>,
}

impl Message {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("message must have at least one bit"));
        }
        if let Some(pos) = values.iter().position(|v| *v != 1 && *v != -1) {
            return Err(Error::invalid(format!(
                "message entry {pos} is {}, expected -1 or +1",
                values[pos]
            )));
        }
        Ok(Self { values })
    }

    /// From the binary view: 0 → −1, 1 → +1.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let values = bits
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                0 => Ok(-1),
                1 => Ok(1),
                other => Err(Error::invalid(format!("bit {i} is {other}, expected 0 or 1"))),
            })
            .collect::<Result<Vec<i8>>>()?;
        Self::new(values)
    }

    /// Binary view `f(x) = (x + 1) / 2`.
    pub fn to_bits(&self) -> Vec<u8> {
        self.values.iter().map(|v| ((v + 1) / 2) as u8).collect()
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.to_bits() {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for Message {
    type Err = Error;

    /// Parses a string of `0`/`1` characters.
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::invalid(format!("unexpected message character `{other}`"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Message::from_bits(&bits)
    }
}

impl From<Message> for String {
    fn from(m: Message) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Message {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Uniform i.i.d. bipolar message, deterministic in `seed`.
pub fn random_message(bits: usize, seed: u64) -> Result<Message> {
    if bits == 0 {
        return Err(Error::invalid("message must have at least one bit"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..bits)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    Message::new(values)
}
