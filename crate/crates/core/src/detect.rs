//! Sign-projection decoding and the exact binomial detection test.
//!
//! Under the null hypothesis (a clean image) each decoded bit is an
//! independent fair coin, so the matched-bit count `M` against any fixed
//! message is `Binomial(k, 1/2)`. [`fpr`] is the strict upper tail
//! `P(M > τ)`; the detector declares a watermark when `M ≥ τ_d`, whose false
//! positive rate is `P(M ≥ τ_d) = fpr(τ_d − 1, k)`. [`detection_threshold`]
//! performs that shift so callers never have to.

use serde::{Deserialize, Serialize};

use crate::adapters::FeatureEncoder;
use crate::error::{Error, Result};
use crate::keys::{Message, WatermarkKey};
use crate::signal::ImageGrid;

/// `sign(x) = +1` for `x ≥ 0`, `−1` otherwise.
pub fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Decodes a message from an already extracted feature vector.
pub fn decode_features(features: &[f64], key: &WatermarkKey) -> Result<Message> {
    let projections = key.project(features)?;
    Message::new(projections.into_iter().map(sign).collect())
}

pub fn decode(image: &ImageGrid, key: &WatermarkKey, feat: &dyn FeatureEncoder) -> Result<Message> {
    if feat.feature_dim() < key.feature_dim() {
        return Err(Error::Capacity {
            bits: key.feature_dim(),
            feature_dim: feat.feature_dim(),
        });
    }
    decode_features(&feat.features(image)?, key)
}

pub fn match_count(expected: &Message, decoded: &Message) -> Result<usize> {
    if expected.len() != decoded.len() {
        return Err(Error::invalid(format!(
            "message lengths differ: {} vs {}",
            expected.len(),
            decoded.len()
        )));
    }
    Ok(expected
        .values()
        .iter()
        .zip(decoded.values())
        .filter(|(a, b)| a == b)
        .count())
}

/// Neumaier-compensated running sum.
#[derive(Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `ln(C(k, i) / 2^k)` for `i = 0..=k`.
fn log_binomial_half_pmf(k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k + 1);
    let mut acc = CompensatedSum::default();
    acc.add(-(k as f64) * std::f64::consts::LN_2);
    out.push(acc.value());
    for i in 0..k {
        acc.add(((k - i) as f64).ln());
        acc.add(-((i + 1) as f64).ln());
        out.push(acc.value());
    }
    out
}

/// False positive rate `ε(τ) = P(M > τ) = 2^{-k} Σ_{i=τ+1..k} C(k,i)`,
/// equivalently `I_{1/2}(τ + 1, k − τ)`.
pub fn fpr(tau: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if tau > k {
        return Err(Error::invalid(format!("threshold {tau} exceeds bit count {k}")));
    }
    if tau == k {
        return Ok(0.0);
    }
    let logs = log_binomial_half_pmf(k);
    let tail = &logs[tau + 1..];
    let peak = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut scaled = CompensatedSum::default();
    for l in tail {
        scaled.add((l - peak).exp());
    }
    Ok((peak + scaled.value().ln()).exp().min(1.0))
}

/// Probability a clean image matches at least `matched` bits, `P(M ≥ matched)`.
pub fn p_value(matched: usize, k: usize) -> Result<f64> {
    if matched > k {
        return Err(Error::invalid(format!("{matched} matched bits exceeds {k}")));
    }
    if matched == 0 {
        Ok(1.0)
    } else {
        fpr(matched - 1, k)
    }
}

fn check_target(target_fpr: f64) -> Result<()> {
    if target_fpr > 0.0 && target_fpr <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("target FPR must lie in (0, 1], got {target_fpr}")))
    }
}

/// Smallest `τ` with `fpr(τ, k) ≤ target_fpr` (strict-tail convention).
pub fn threshold_for_fpr(k: usize, target_fpr: f64) -> Result<usize> {
    check_target(target_fpr)?;
    for tau in 0..=k {
        if fpr(tau, k)? <= target_fpr {
            return Ok(tau);
        }
    }
    Ok(k)
}

/// Smallest `τ_d` in `0..=k+1` such that the rule `M ≥ τ_d` has false
/// positive rate at most `target_fpr`. `k + 1` means no count qualifies.
pub fn detection_threshold(k: usize, target_fpr: f64) -> Result<usize> {
    check_target(target_fpr)?;
    if target_fpr >= 1.0 {
        return Ok(0);
    }
    Ok(threshold_for_fpr(k, target_fpr)? + 1)
}

/// False positive rate of the rule `M ≥ threshold`.
pub fn fpr_of_rule(threshold: usize, k: usize) -> Result<f64> {
    if threshold > k {
        Ok(0.0)
    } else {
        p_value(threshold, k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Watermarked,
    NotWatermarked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub decoded: Message,
    pub bits: usize,
    pub matched_bits: usize,
    /// Decision threshold: watermarked iff `matched_bits ≥ threshold`.
    pub threshold: usize,
    pub fpr_at_threshold: f64,
    pub p_value: f64,
    pub decision: Decision,
}

impl DetectionReport {
    pub fn from_decoded(expected: &Message, decoded: Message, target_fpr: f64) -> Result<Self> {
        let k = expected.len();
        let matched = match_count(expected, &decoded)?;
        let threshold = detection_threshold(k, target_fpr)?;
        let decision = if matched >= threshold {
            Decision::Watermarked
        } else {
            Decision::NotWatermarked
        };
        Ok(Self {
            decoded,
            bits: k,
            matched_bits: matched,
            threshold,
            fpr_at_threshold: fpr_of_rule(threshold, k)?,
            p_value: p_value(matched, k)?,
            decision,
        })
    }

    pub fn bit_accuracy(&self) -> f64 {
        self.matched_bits as f64 / self.bits as f64
    }
}

pub fn detect(
    image: &ImageGrid,
    key: &WatermarkKey,
    expected: &Message,
    feat: &dyn FeatureEncoder,
    target_fpr: f64,
) -> Result<DetectionReport> {
    if expected.len() != key.bits() {
        return Err(Error::invalid(format!(
            "expected message has {} bits, key carries {}",
            expected.len(),
            key.bits()
        )));
    }
    let decoded = decode(image, key, feat)?;
    DetectionReport::from_decoded(expected, decoded, target_fpr)
}

/// Pearson correlation matrix of decoded bits across images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitCorrelation {
    pub matrix: Vec<Vec<f64>>,
    /// Bits that took a single value over every image; their off-diagonal
    /// correlations are reported as 0.
    pub constant_bits: Vec<usize>,
}

impl BitCorrelation {
    pub fn is_degenerate(&self) -> bool {
        !self.constant_bits.is_empty()
    }

    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let k = self.matrix.len();
        if k < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    total += self.matrix[i][j].abs();
                }
            }
        }
        total / (k * (k - 1)) as f64
    }
}

pub fn bit_correlation_of(messages: &[Message]) -> Result<BitCorrelation> {
    if messages.len() < 2 {
        return Err(Error::invalid("bit correlation needs at least two messages"));
    }
    let k = messages[0].len();
    if messages.iter().any(|m| m.len() != k) {
        return Err(Error::invalid("messages must share one length"));
    }
    let n = messages.len() as f64;
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|b| messages.iter().map(|m| m.values()[b] as f64).collect())
        .collect();
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .zip(&means)
        .map(|(c, m)| c.iter().map(|v| v - m).collect())
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let constant_bits: Vec<usize> = (0..k).filter(|&b| norms[b] == 0.0).collect();
    let mut matrix = vec![vec![0.0; k]; k];
    for i in 0..k {
        matrix[i][i] = 1.0;
        for j in i + 1..k {
            let r = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j])
            };
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(BitCorrelation { matrix, constant_bits })
}

pub fn bit_correlation(
    images: &[ImageGrid],
    key: &WatermarkKey,
    feat: &dyn FeatureEncoder,
) -> Result<BitCorrelation> {
    let decoded = images
        .iter()
        .map(|img| decode(img, key, feat))
        .collect::<Result<Vec<_>>>()?;
    bit_correlation_of(&decoded)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprPoint {
    pub target_fpr: f64,
    pub threshold: usize,
    /// Exact false positive rate of the rule at `threshold`.
    pub fpr: f64,
    pub tpr: f64,
}

/// True positive rate of the detection rule at each target FPR.
pub fn tpr_at_fpr(matched_counts: &[usize], k: usize, fpr_grid: &[f64]) -> Result<Vec<TprPoint>> {
    if let Some(c) = matched_counts.iter().find(|&&c| c > k) {
        return Err(Error::invalid(format!("matched count {c} exceeds {k}")));
    }
    fpr_grid
        .iter()
        .map(|&target| {
            let threshold = detection_threshold(k, target)?;
            let hits = matched_counts.iter().filter(|&&c| c >= threshold).count();
            Ok(TprPoint {
                target_fpr: target,
                threshold,
                fpr: fpr_of_rule(threshold, k)?,
                tpr: if matched_counts.is_empty() {
                    0.0
                } else {
                    hits as f64 / matched_counts.len() as f64
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{generate_key, random_message, KeyScheme};

    #[test]
    fn sign_of_zero_is_positive() {
        assert_eq!(sign(0.0), 1);
        assert_eq!(sign(-0.0), 1);
        assert_eq!(sign(-1e-300), -1);
    }

    #[test]
    fn canonical_decoding_with_zero_projection() {
        let key = generate_key(3, 8, KeyScheme::CanonicalBasis, 0, 1.0).unwrap();
        let m = decode_features(&[2.3, -0.1, 0.0, 5.0, -5.0, 0.0, 0.0, 0.0], &key).unwrap();
        assert_eq!(m.values(), &[1, -1, 1]);
    }

    #[test]
    fn orthonormal_signed_sum_decodes_to_message() {
        let key = generate_key(12, 20, KeyScheme::RandomOrthonormal, 4, 1.0).unwrap();
        let m = random_message(12, 8).unwrap();
        let mut z = vec![0.0; 20];
        for (v, &b) in key.vectors().iter().zip(m.values()) {
            z.iter_mut().zip(v).for_each(|(zi, vi)| *zi += b as f64 * vi);
        }
        assert_eq!(decode_features(&z, &key).unwrap(), m);
        let scaled: Vec<f64> = z.iter().map(|v| v * 37.5).collect();
        assert_eq!(decode_features(&scaled, &key).unwrap(), m);
    }

    #[test]
    fn match_counts() {
        let m = random_message(48, 2).unwrap();
        assert_eq!(match_count(&m, &m).unwrap(), 48);
        assert_eq!(match_count(&m, &m.complement()).unwrap(), 0);
        let a = Message::new(vec![1, 1, -1, -1, 1, -1]).unwrap();
        let b = Message::new(vec![1, -1, -1, 1, 1, -1]).unwrap();
        assert_eq!(match_count(&a, &b).unwrap(), 4);
        assert!(match_count(&a, &random_message(5, 0).unwrap()).is_err());
    }

    #[test]
    fn fpr_edges() {
        assert_eq!(fpr(48, 48).unwrap(), 0.0);
        assert!((fpr(0, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(fpr(49, 48).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_for_fpr(48, 1.0).unwrap(), 0);
        assert_eq!(threshold_for_fpr(1, 0.6).unwrap(), 0);
        let t = threshold_for_fpr(48, 1e-6).unwrap();
        assert!(fpr(t, 48).unwrap() <= 1e-6 && fpr(t - 1, 48).unwrap() > 1e-6);
        assert!(threshold_for_fpr(4, 0.0).is_err());
    }

    #[test]
    fn detection_threshold_controls_rule_fpr() {
        for k in [1usize, 7, 48] {
            for target in [0.6, 0.1, 1e-3, 1e-6] {
                let t = detection_threshold(k, target).unwrap();
                assert!(fpr_of_rule(t, k).unwrap() <= target);
                if t > 0 {
                    assert!(fpr_of_rule(t - 1, k).unwrap() > target);
                }
            }
        }
        assert_eq!(detection_threshold(5, 1.0).unwrap(), 0);
    }

    #[test]
    fn exact_match_report() {
        let m = random_message(16, 3).unwrap();
        let r = DetectionReport::from_decoded(&m, m.clone(), 1e-3).unwrap();
        assert_eq!(r.matched_bits, 16);
        assert!((r.p_value - 2f64.powi(-16)).abs() < 1e-20);
        assert_eq!(r.decision, Decision::Watermarked);
    }

    #[test]
    fn correlation_degenerate_and_structure() {
        let m = random_message(6, 1).unwrap();
        let c = bit_correlation_of(&[m.clone(), m]).unwrap();
        assert!(c.is_degenerate());
        assert_eq!(c.constant_bits.len(), 6);
        for i in 0..6 {
            assert_eq!(c.matrix[i][i], 1.0);
        }
        let a = Message::new(vec![1, 1, -1]).unwrap();
        let b = Message::new(vec![-1, -1, -1]).unwrap();
        let c = bit_correlation_of(&[a, b]).unwrap();
        assert!((c.matrix[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(c.matrix[0][2], 0.0);
        assert_eq!(c.constant_bits, vec![2]);
    }

    #[test]
    fn tpr_trivial_curves() {
        let grid = [1.0, 1e-2, 1e-6, 1e-12];
        let pts = tpr_at_fpr(&[48; 10], 48, &grid).unwrap();
        assert!(pts.iter().all(|p| p.tpr == 1.0));
        let uniform: Vec<usize> = (0..=48).collect();
        assert_eq!(tpr_at_fpr(&uniform, 48, &[1.0]).unwrap()[0].tpr, 1.0);
        assert!(tpr_at_fpr(&[49], 48, &grid).is_err());
    }
}
