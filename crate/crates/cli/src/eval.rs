//! Attack-battery evaluation shared by `evaluate` and `sweep`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lfmark_core::detect::{tpr_at_fpr, TprPoint};
use lfmark_core::{decode, metrics, registry, AttackSpec, Decision, DetectionReport, FeatureEncoder, ImageGrid, Message, WatermarkKey};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("slot lock").into_iter().map(|r| r.expect("every slot filled")).collect()
}

pub struct EvalItem {
    pub id: String,
    pub image: ImageGrid,
    /// Quality reference: the cover when known, else the watermarked image.
    pub reference: ImageGrid,
    pub message: Message,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackRow {
    pub image: String,
    pub attack: String,
    pub bit_accuracy: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub matched_bits: usize,
    pub decision: Decision,
    pub p_value: f64,
}

/// An empty battery means "no attack".
pub fn effective_battery(battery: &[AttackSpec]) -> Vec<AttackSpec> {
    if battery.is_empty() {
        vec![AttackSpec::new("none")]
    } else {
        battery.to_vec()
    }
}

pub fn score(
    id: &str,
    label: &str,
    attacked: &ImageGrid,
    reference: &ImageGrid,
    message: &Message,
    key: &WatermarkKey,
    feature: &dyn FeatureEncoder,
    target_fpr: f64,
) -> CliResult<AttackRow> {
    let decoded = decode(attacked, key, feature)?;
    let report = DetectionReport::from_decoded(message, decoded, target_fpr)?;
    let (psnr, ssim) = if attacked.same_shape(reference) {
        (metrics::psnr(reference, attacked)?, metrics::ssim(reference, attacked)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(AttackRow {
        image: id.to_string(),
        attack: label.to_string(),
        bit_accuracy: report.bit_accuracy(),
        psnr,
        ssim,
        matched_bits: report.matched_bits,
        decision: report.decision,
        p_value: report.p_value,
    })
}

/// Rows in image-major, battery order. `on_row` sees each image's rows as
/// soon as they are ready.
pub fn evaluate_items(
    items: &[EvalItem],
    battery: &[AttackSpec],
    key: &WatermarkKey,
    feature: &dyn FeatureEncoder,
    target_fpr: f64,
    jobs: usize,
    on_row: &(dyn Fn(&AttackRow) -> CliResult<()> + Sync),
) -> CliResult<Vec<AttackRow>> {
    let specs = effective_battery(battery);
    let per_image = par_map(items, jobs, |_, item| -> CliResult<Vec<AttackRow>> {
        let mut rows = Vec::with_capacity(specs.len());
        for spec in &specs {
            let attacked = spec.apply(&item.image, registry()).map_err(|e| {
                CliError::from(lfmark_core::Error::Attack { name: spec.label().to_string(), source: Box::new(e) })
            })?;
            let row = score(&item.id, spec.label(), &attacked, &item.reference, &item.message, key, feature, target_fpr)?;
            on_row(&row)?;
            rows.push(row);
        }
        Ok(rows)
    });
    let mut out = Vec::new();
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; NaN entries are skipped.
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    pub fn display(&self, digits: usize) -> String {
        format!("{:.*} ± {:.*}", digits, self.mean, digits, self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSummary {
    pub attack: String,
    pub images: usize,
    pub bit_accuracy: MeanStd,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    /// Fraction declared watermarked at the target FPR.
    pub tpr: f64,
}

fn labels_in_order(rows: &[AttackRow]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        if !labels.contains(&r.attack) {
            labels.push(r.attack.clone());
        }
    }
    labels
}

pub fn summarize(rows: &[AttackRow]) -> Vec<AttackSummary> {
    labels_in_order(rows)
        .into_iter()
        .map(|label| {
            let sel: Vec<&AttackRow> = rows.iter().filter(|r| r.attack == label).collect();
            let hits = sel.iter().filter(|r| r.decision == Decision::Watermarked).count();
            AttackSummary {
                images: sel.len(),
                bit_accuracy: MeanStd::of(sel.iter().map(|r| r.bit_accuracy)),
                psnr: MeanStd::of(sel.iter().map(|r| r.psnr)),
                ssim: MeanStd::of(sel.iter().map(|r| r.ssim)),
                tpr: hits as f64 / sel.len() as f64,
                attack: label,
            }
        })
        .collect()
}

/// TPR at each grid FPR, per attack.
pub fn roc(rows: &[AttackRow], bits: usize, fpr_grid: &[f64]) -> CliResult<Vec<(String, Vec<TprPoint>)>> {
    labels_in_order(rows)
        .into_iter()
        .map(|label| {
            let counts: Vec<usize> = rows.iter().filter(|r| r.attack == label).map(|r| r.matched_bits).collect();
            Ok((label, tpr_at_fpr(&counts, bits, fpr_grid)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        let seq = par_map(&items, 1, |i, x| i * 100 + x);
        let par = par_map(&items, 4, |i, x| i * 100 + x);
        assert_eq!(seq, par);
        assert!(par_map(&Vec::<usize>::new(), 3, |_, x| *x).is_empty());
    }

    #[test]
    fn mean_std_population() {
        let s = MeanStd::of([1.0, 3.0, f64::NAN].into_iter());
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.display(3), "2.000 ± 1.000");
        assert!(MeanStd::of(std::iter::empty()).mean.is_nan());
    }

    #[test]
    fn empty_battery_is_no_attack() {
        let b = effective_battery(&[]);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].name, "none");
    }
}
