use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lfmark_core::attacks::{battery_to_json, check_battery};
use lfmark_core::detect::TprPoint;
use serde::Serialize;
use serde_json::json;

use crate::cli::EvaluateArgs;
use crate::config::{Pipeline, RunConfig};
use crate::error::{CliError, CliResult, ConfigContext, EXIT_OK};
use crate::eval::{self, AttackRow, AttackSummary, EvalItem};
use crate::io::{self, JsonlWriter, Manifest, MANIFEST_FILE};
use crate::plot::{Chart, Series};
use crate::record::{RecordRow, RunRecord, ROWS_FILE};

pub const TABLE_SCHEMA_VERSION: u32 = 1;
pub const ROC_SCHEMA_VERSION: u32 = 1;
pub const TABLE_FILE: &str = "table.csv";
pub const ROC_FILE: &str = "roc.csv";

#[derive(Serialize)]
struct TableRow<'a> {
    schema_version: u32,
    attack: &'a str,
    images: usize,
    /// `mean ± std`, three decimals.
    bit_accuracy: String,
    bit_accuracy_mean: f64,
    bit_accuracy_std: f64,
    psnr_mean: f64,
    psnr_std: f64,
    ssim_mean: f64,
    ssim_std: f64,
    target_fpr: f64,
    tpr: f64,
}

#[derive(Serialize)]
struct RocRow<'a> {
    schema_version: u32,
    attack: &'a str,
    target_fpr: f64,
    threshold: usize,
    fpr: f64,
    tpr: f64,
}

pub(crate) fn write_table(path: &Path, summaries: &[AttackSummary], target_fpr: f64) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(e.to_string()))?;
    for s in summaries {
        w.serialize(TableRow {
            schema_version: TABLE_SCHEMA_VERSION,
            attack: &s.attack,
            images: s.images,
            bit_accuracy: s.bit_accuracy.display(3),
            bit_accuracy_mean: s.bit_accuracy.mean,
            bit_accuracy_std: s.bit_accuracy.std,
            psnr_mean: s.psnr.mean,
            psnr_std: s.psnr.std,
            ssim_mean: s.ssim.mean,
            ssim_std: s.ssim.std,
            target_fpr,
            tpr: s.tpr,
        })
        .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_roc(dir: &Path, curves: &[(String, Vec<TprPoint>)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(dir.join(ROC_FILE)).map_err(|e| CliError::runtime(e.to_string()))?;
    for (label, pts) in curves {
        for p in pts {
            w.serialize(RocRow {
                schema_version: ROC_SCHEMA_VERSION,
                attack: label,
                target_fpr: p.target_fpr,
                threshold: p.threshold,
                fpr: p.fpr,
                tpr: p.tpr,
            })
            .map_err(|e| CliError::runtime(e.to_string()))?;
        }
    }
    w.flush()?;
    let series = |label: &str, pts: &[TprPoint]| Series {
        name: label.to_string(),
        points: pts.iter().filter(|p| p.fpr > 0.0).map(|p| (p.fpr, p.tpr)).collect(),
    };
    let chart = |title: String, series: Vec<Series>| Chart {
        title,
        x_label: "false positive rate".into(),
        y_label: "true positive rate".into(),
        log_x: true,
        y_range: Some((0.0, 1.0)),
        series,
    };
    for (label, pts) in curves {
        let svg = chart(format!("TPR vs FPR: {label}"), vec![series(label, pts)]).render();
        fs::write(dir.join(format!("roc_{label}.svg")), svg)?;
    }
    let all = curves.iter().map(|(l, p)| series(l, p)).collect();
    fs::write(dir.join("roc.svg"), chart("TPR vs FPR".into(), all).render())?;
    Ok(())
}

pub fn run(a: EvaluateArgs) -> CliResult<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let key = io::load_key_file(&a.key)?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| a.watermarked.join(MANIFEST_FILE));
    let manifest = Manifest::load(&manifest_path)?;
    manifest.check_key(&key)?;
    let battery = super::attack::battery_or_default(a.battery.as_deref())?;
    check_battery(&battery).config_ctx("battery")?;
    let feature = Pipeline::feature_only(&cfg.backends)?;
    if key.feature_dim() != feature.feature_dim() {
        return Err(CliError::config(format!(
            "key feature dimension {} does not match encoder `{}` ({})",
            key.feature_dim(),
            feature.name(),
            feature.feature_dim()
        )));
    }

    let mut items = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = a.watermarked.join(&e.image);
        if !path.is_file() {
            return Err(CliError::config(format!("manifest lists {} but {} is missing", e.image, path.display())));
        }
        let image = io::load_image(&path, None)?;
        let reference = e
            .source
            .as_deref()
            .and_then(|s| io::load_image(s, cfg.resolution).ok())
            .filter(|c| c.same_shape(&image))
            .unwrap_or_else(|| image.clone());
        items.push(EvalItem { id: e.image.clone(), image, reference, message: e.message.clone() });
    }

    io::ensure_dir(&a.out)?;
    let arguments = json!({
        "watermarked": a.watermarked,
        "manifest": manifest_path,
        "battery": serde_json::from_str::<serde_json::Value>(&battery_to_json(&battery)).expect("battery json"),
    });
    let seeds: BTreeMap<String, u64> = battery.iter().map(|s| (format!("attack:{}", s.label()), s.seed)).collect();
    let mut backends = vec![feature.info()];
    for spec in &battery {
        if let Some(name) = spec.backend_name() {
            let kind = if spec.name == "latent_adversary" {
                lfmark_core::BackendKind::LatentCodec
            } else {
                lfmark_core::BackendKind::Regeneration
            };
            backends.push(lfmark_core::adapters::BackendInfo::new(kind, name).with("attack", spec.label()));
        }
    }
    let record = RunRecord::new("evaluate", cfg.snapshot(), arguments, backends, seeds, Some(key.key_id()));
    let rows_out = JsonlWriter::append(&a.out.join(ROWS_FILE))?;
    let run_id = record.run_id.clone();
    let on_row = |r: &AttackRow| {
        rows_out.write(&RecordRow {
            run_id: run_id.clone(),
            image: r.image.clone(),
            attack: r.attack.clone(),
            bit_accuracy: r.bit_accuracy,
            psnr: r.psnr,
            ssim: r.ssim,
            matched_bits: r.matched_bits,
            decision: r.decision,
            p_value: r.p_value,
        })
    };
    let target = cfg.detect.target_fpr;
    let rows = eval::evaluate_items(&items, &battery, &key, feature.as_ref(), target, a.jobs, &on_row)?;
    let summaries = eval::summarize(&rows);
    write_table(&a.out.join(TABLE_FILE), &summaries, target)?;
    write_roc(&a.out, &eval::roc(&rows, key.bits(), &cfg.detect.fpr_grid)?)?;
    record.append_to(&a.out)?;
    for s in &summaries {
        println!(
            "{}",
            json!({"attack": s.attack, "images": s.images, "bit_accuracy": s.bit_accuracy.mean, "tpr": s.tpr})
        );
    }
    Ok(EXIT_OK)
}
