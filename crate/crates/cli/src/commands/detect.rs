use std::path::{Path, PathBuf};

use lfmark_core::{decode, Decision, DetectionReport, FeatureEncoder, Message, WatermarkKey};
use serde_json::{json, Value};

use crate::cli::{DecodeArgs, DetectArgs};
use crate::config::{Pipeline, RunConfig};
use crate::error::{CliError, CliResult, EXIT_NOT_WATERMARKED, EXIT_OK, EXIT_RUNTIME};
use crate::io::{self, JsonlWriter, Manifest};

/// Prints each row and mirrors it to `out` when given.
struct Report {
    file: Option<JsonlWriter>,
}

impl Report {
    fn new(out: Option<&Path>) -> CliResult<Self> {
        Ok(Self { file: out.map(JsonlWriter::create).transpose()? })
    }

    fn emit(&self, row: &Value) -> CliResult<()> {
        println!("{row}");
        if let Some(f) = &self.file {
            f.write(row)?;
        }
        Ok(())
    }
}

fn error_row(path: &Path, err: &CliError) -> Value {
    json!({"image": io::image_id(path), "path": path, "error": {"kind": err.kind.as_str(), "message": err.message}})
}

fn check_encoder(key: &WatermarkKey, feature: &dyn FeatureEncoder) -> CliResult<()> {
    if key.feature_dim() != feature.feature_dim() {
        return Err(CliError::config(format!(
            "key feature dimension {} does not match encoder `{}` ({})",
            key.feature_dim(),
            feature.name(),
            feature.feature_dim()
        )));
    }
    Ok(())
}

pub fn run_decode(a: DecodeArgs) -> CliResult<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let key = io::load_key_file(&a.key)?;
    let feature = Pipeline::feature_only(&cfg.backends)?;
    check_encoder(&key, feature.as_ref())?;
    let paths = io::collect_images(&a.inputs)?;
    let report = Report::new(a.out.as_deref())?;
    let mut failed = 0;
    for p in &paths {
        let row = io::load_image(p, cfg.resolution)
            .and_then(|img| Ok(decode(&img, &key, feature.as_ref())?))
            .map(|m| json!({"image": io::image_id(p), "path": p, "bits": m.len(), "message": m}));
        match row {
            Ok(r) => report.emit(&r)?,
            Err(e) => {
                failed += 1;
                report.emit(&error_row(p, &e))?;
            }
        }
    }
    Ok(if paths.len() == 1 && failed == 1 { EXIT_RUNTIME } else { EXIT_OK })
}

/// Expected message for one image.
enum Expected {
    Fixed(Message),
    Manifest(Manifest),
}

impl Expected {
    fn for_image(&self, path: &Path) -> CliResult<Message> {
        match self {
            Expected::Fixed(m) => Ok(m.clone()),
            Expected::Manifest(man) => {
                let id = io::image_id(path);
                man.by_image()
                    .get(id.as_str())
                    .map(|e| e.message.clone())
                    .ok_or_else(|| CliError::runtime(format!("{id} is not listed in the manifest")))
            }
        }
    }
}

pub fn detect_one(
    path: &PathBuf,
    resolution: Option<usize>,
    key: &WatermarkKey,
    expected: &Message,
    feature: &dyn FeatureEncoder,
    target_fpr: f64,
) -> CliResult<DetectionReport> {
    let img = io::load_image(path, resolution)?;
    let decoded = decode(&img, key, feature)?;
    Ok(DetectionReport::from_decoded(expected, decoded, target_fpr)?)
}

pub fn run_detect(a: DetectArgs) -> CliResult<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let target_fpr = a.target_fpr.unwrap_or(cfg.detect.target_fpr);
    if !(target_fpr > 0.0 && target_fpr <= 1.0) {
        return Err(CliError::config(format!("target fpr must lie in (0, 1], got {target_fpr}")));
    }
    let key = io::load_key_file(&a.key)?;
    let expected = match (&a.message, &a.manifest) {
        (Some(m), _) => {
            let m = super::parse_message(m)?;
            if m.len() != key.bits() {
                return Err(CliError::config(format!("message has {} bits, key carries {}", m.len(), key.bits())));
            }
            Expected::Fixed(m)
        }
        (None, Some(p)) => {
            let man = Manifest::load(p)?;
            man.check_key(&key)?;
            Expected::Manifest(man)
        }
        (None, None) => return Err(CliError::config("detect needs --message or --manifest")),
    };
    let feature = Pipeline::feature_only(&cfg.backends)?;
    check_encoder(&key, feature.as_ref())?;
    let paths = io::collect_images(&a.inputs)?;
    let report = Report::new(a.out.as_deref())?;
    let mut last: Option<CliResult<Decision>> = None;
    for p in &paths {
        let res = expected
            .for_image(p)
            .and_then(|m| detect_one(p, cfg.resolution, &key, &m, feature.as_ref(), target_fpr));
        match res {
            Ok(r) => {
                report.emit(&json!({
                    "image": io::image_id(p),
                    "path": p,
                    "decision": r.decision,
                    "bits": r.bits,
                    "matched_bits": r.matched_bits,
                    "bit_accuracy": r.bit_accuracy(),
                    "threshold": r.threshold,
                    "fpr_at_threshold": r.fpr_at_threshold,
                    "p_value": r.p_value,
                    "target_fpr": target_fpr,
                    "decoded": r.decoded,
                }))?;
                last = Some(Ok(r.decision));
            }
            Err(e) => {
                report.emit(&error_row(p, &e))?;
                last = Some(Err(e));
            }
        }
    }
    if paths.len() != 1 {
        return Ok(EXIT_OK);
    }
    match last.expect("one image processed") {
        Ok(Decision::Watermarked) => Ok(EXIT_OK),
        Ok(Decision::NotWatermarked) => Ok(EXIT_NOT_WATERMARKED),
        Err(e) => Ok(e.exit_code()),
    }
}
