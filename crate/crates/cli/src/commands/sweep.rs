use std::collections::BTreeMap;
use std::fs;

use lfmark_core::attacks::{battery_to_json, check_battery};
use lfmark_core::keys::DEFAULT_MARGIN;
use lfmark_core::{embed, generate_key, random_message, Domain, EmbedConfig, ImageGrid, KeyScheme};
use serde::Serialize;
use serde_json::json;

use crate::cli::{SweepArgs, SweepAxis};
use crate::config::{resolve_embed, Pipeline, RunConfig};
use crate::error::{CliError, CliResult, ConfigContext, EXIT_OK};
use crate::eval::{self, par_map, AttackSummary, EvalItem, MeanStd};
use crate::io;
use crate::plot::{Chart, Series};
use crate::record::RunRecord;

pub const SWEEP_SCHEMA_VERSION: u32 = 1;
pub const SWEEP_FILE: &str = "sweep.csv";
pub const NOISE_GRID_FILE: &str = "noise_grid.csv";

/// Latent and pixel noise axes of the default noise grid.
pub fn default_noise_axes() -> (Vec<f64>, Vec<f64>) {
    let s1 = (0..=10).map(|i| i as f64 * 0.05).collect();
    let s2 = (0..=10).map(|i| i as f64 * 0.02).collect();
    (s1, s2)
}

struct GridPoint {
    value: String,
    value2: Option<f64>,
    embed: EmbedConfig,
    bits: usize,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    schema_version: u32,
    axis: &'a str,
    value: &'a str,
    value2: Option<f64>,
    attack: &'a str,
    images: usize,
    mean_bit_accuracy: f64,
    mean_psnr: f64,
    status: String,
}

fn parse_f64(axis: &str, v: &str) -> CliResult<f64> {
    let x: f64 = v.trim().parse().config_ctx(&format!("{axis} grid value `{v}`"))?;
    if !(x.is_finite() && x >= 0.0) {
        return Err(CliError::config(format!("{axis} grid value must be nonnegative, got {v}")));
    }
    Ok(x)
}

fn parse_usize(axis: &str, v: &str) -> CliResult<usize> {
    v.trim().parse().config_ctx(&format!("{axis} grid value `{v}`"))
}

fn grid(a: &SweepArgs, base: &EmbedConfig) -> CliResult<Vec<GridPoint>> {
    let axis = a.axis.as_str();
    let point = |value: &str, embed: EmbedConfig, bits: usize| GridPoint {
        value: value.trim().to_string(),
        value2: None,
        embed,
        bits,
    };
    if a.axis == SweepAxis::NoiseGrid {
        let (d1, d2) = default_noise_axes();
        let s1: Vec<f64> = if a.values.is_empty() {
            d1
        } else {
            a.values.iter().map(|v| parse_f64(axis, v)).collect::<CliResult<_>>()?
        };
        let s2 = if a.pixel_values.is_empty() { d2 } else { a.pixel_values.clone() };
        if let Some(bad) = s2.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(CliError::config(format!("pixel noise values must be nonnegative, got {bad}")));
        }
        let mut out = Vec::new();
        for &l in &s1 {
            for &p in &s2 {
                let mut e = base.clone();
                e.latent_noise_std = l;
                e.pixel_noise_std = p;
                out.push(GridPoint { value: l.to_string(), value2: Some(p), embed: e, bits: a.bits });
            }
        }
        return Ok(out);
    }
    if a.values.is_empty() {
        return Err(CliError::config(format!("sweep over {axis} needs a nonempty --values grid")));
    }
    a.values
        .iter()
        .map(|v| {
            let mut e = base.clone();
            let mut bits = a.bits;
            match a.axis {
                SweepAxis::Quality => e.lambda_psnr = parse_f64(axis, v)?,
                SweepAxis::Bits => bits = parse_usize(axis, v)?,
                SweepAxis::LatentNoise => e.latent_noise_std = parse_f64(axis, v)?,
                SweepAxis::PixelNoise => e.pixel_noise_std = parse_f64(axis, v)?,
                SweepAxis::Steps => e.steps = parse_usize(axis, v)?,
                SweepAxis::Domain => e.domain = v.trim().parse::<Domain>().config_ctx("domain grid value")?,
                SweepAxis::NoiseGrid => unreachable!("handled above"),
            }
            Ok(point(v, e, bits))
        })
        .collect()
}

struct PointResult {
    summaries: Vec<AttackSummary>,
    mean_psnr: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_point(
    p: &GridPoint,
    covers: &[(String, ImageGrid)],
    pipe: &Pipeline,
    scheme: KeyScheme,
    a: &SweepArgs,
    battery: &[lfmark_core::AttackSpec],
    target_fpr: f64,
) -> CliResult<PointResult> {
    let key = generate_key(p.bits, pipe.feature.feature_dim(), scheme, a.key_seed, DEFAULT_MARGIN)?;
    let embedded = par_map(covers, a.jobs, |i, (id, cover)| -> CliResult<(EvalItem, f64)> {
        let message = random_message(p.bits, a.message_seed.wrapping_add(i as u64))?;
        let embed_cfg = resolve_embed(&p.embed, pipe.codec.as_ref(), cover.height(), cover.width())?;
        let res = embed(
            cover,
            &key,
            &message,
            pipe.codec.as_ref(),
            pipe.feature.as_ref(),
            pipe.perceptual.as_ref(),
            &embed_cfg,
        )?;
        let item = EvalItem { id: id.clone(), image: res.quantized()?, reference: cover.clone(), message };
        Ok((item, res.final_psnr))
    });
    let (mut items, mut psnrs) = (Vec::new(), Vec::new());
    for r in embedded {
        let (item, psnr) = r?;
        items.push(item);
        psnrs.push(psnr);
    }
    let rows = eval::evaluate_items(&items, battery, &key, pipe.feature.as_ref(), target_fpr, a.jobs, &|_| Ok(()))?;
    Ok(PointResult { summaries: eval::summarize(&rows), mean_psnr: MeanStd::of(psnrs.into_iter()).mean })
}

fn write_noise_grid(path: &std::path::Path, points: &[GridPoint], results: &[CliResult<PointResult>]) -> CliResult<()> {
    let mut s1: Vec<String> = Vec::new();
    let mut s2: Vec<f64> = Vec::new();
    for p in points {
        if !s1.contains(&p.value) {
            s1.push(p.value.clone());
        }
        let v2 = p.value2.expect("noise grid point");
        if !s2.contains(&v2) {
            s2.push(v2);
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(e.to_string()))?;
    let header: Vec<String> = std::iter::once("latent_noise\\pixel_noise".to_string())
        .chain(s2.iter().map(|v| v.to_string()))
        .collect();
    w.write_record(&header).map_err(|e| CliError::runtime(e.to_string()))?;
    for row_value in &s1 {
        let mut record = vec![row_value.clone()];
        for &col in &s2 {
            let cell = points
                .iter()
                .zip(results)
                .find(|(p, _)| &p.value == row_value && p.value2 == Some(col))
                .and_then(|(_, r)| r.as_ref().ok())
                .map(|r| {
                    // attacked columns only, unless the battery has nothing else
                    let attacked: Vec<&AttackSummary> = r.summaries.iter().filter(|s| s.attack != "none").collect();
                    let pool = if attacked.is_empty() { r.summaries.iter().collect() } else { attacked };
                    MeanStd::of(pool.iter().map(|s| s.bit_accuracy.mean)).mean.to_string()
                })
                .unwrap_or_default();
            record.push(cell);
        }
        w.write_record(&record).map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(a: SweepArgs) -> CliResult<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let points = grid(&a, &cfg.embed)?;
    let scheme: KeyScheme = a.scheme.parse().config_ctx("scheme")?;
    let battery = super::attack::battery_or_default(a.battery.as_deref())?;
    check_battery(&battery).config_ctx("battery")?;
    let battery = eval::effective_battery(&battery);
    let paths = io::collect_images(&a.images)?;
    if paths.is_empty() {
        return Err(CliError::config("sweep needs at least one image"));
    }
    let pipe = Pipeline::resolve(&cfg.backends)?;
    let covers = paths
        .iter()
        .map(|p| Ok((io::image_id(p), io::load_image(p, cfg.resolution)?)))
        .collect::<CliResult<Vec<_>>>()?;

    io::ensure_dir(&a.out)?;
    let axis = a.axis.as_str();
    let mut w = csv::Writer::from_path(a.out.join(SWEEP_FILE)).map_err(|e| CliError::runtime(e.to_string()))?;
    let mut results = Vec::with_capacity(points.len());
    for p in &points {
        let res = p
            .embed
            .validate()
            .map_err(CliError::from)
            .and_then(|_| run_point(p, &covers, &pipe, scheme, &a, &battery, cfg.detect.target_fpr));
        let rows: Vec<SweepRow> = match &res {
            Ok(r) => r
                .summaries
                .iter()
                .map(|s| SweepRow {
                    schema_version: SWEEP_SCHEMA_VERSION,
                    axis,
                    value: &p.value,
                    value2: p.value2,
                    attack: &s.attack,
                    images: s.images,
                    mean_bit_accuracy: s.bit_accuracy.mean,
                    mean_psnr: r.mean_psnr,
                    status: "ok".into(),
                })
                .collect(),
            Err(e) => {
                eprintln!("{}", e.grid_point_record(axis, &p.value));
                vec![SweepRow {
                    schema_version: SWEEP_SCHEMA_VERSION,
                    axis,
                    value: &p.value,
                    value2: p.value2,
                    attack: "",
                    images: 0,
                    mean_bit_accuracy: f64::NAN,
                    mean_psnr: f64::NAN,
                    status: format!("error: {}", e.message),
                }]
            }
        };
        for r in rows {
            w.serialize(r).map_err(|e| CliError::runtime(e.to_string()))?;
        }
        w.flush()?;
        results.push(res);
    }

    if a.axis == SweepAxis::NoiseGrid {
        write_noise_grid(&a.out.join(NOISE_GRID_FILE), &points, &results)?;
    } else if a.axis != SweepAxis::Domain {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (p, r) in points.iter().zip(&results) {
            if let (Ok(r), Ok(x)) = (r, p.value.parse::<f64>()) {
                for s in &r.summaries {
                    series.entry(s.attack.clone()).or_default().push((x, s.bit_accuracy.mean));
                }
            }
        }
        let chart = Chart {
            title: format!("bit accuracy vs {axis}"),
            x_label: axis.to_string(),
            y_label: "mean bit accuracy".into(),
            log_x: false,
            y_range: Some((0.0, 1.0)),
            series: series.into_iter().map(|(name, points)| Series { name, points }).collect(),
        };
        fs::write(a.out.join(format!("sweep_{axis}.svg")), chart.render())?;
    }

    let failed = results.iter().filter(|r| r.is_err()).count();
    let arguments = json!({
        "axis": axis,
        "values": points.iter().map(|p| json!([p.value, p.value2])).collect::<Vec<_>>(),
        "images": paths,
        "bits": a.bits,
        "scheme": scheme,
        "battery": serde_json::from_str::<serde_json::Value>(&battery_to_json(&battery)).expect("battery json"),
    });
    let seeds = BTreeMap::from([
        ("embed".to_string(), cfg.embed.seed),
        ("key".to_string(), a.key_seed),
        ("message".to_string(), a.message_seed),
    ]);
    let record = RunRecord::new("sweep", cfg.snapshot(), arguments, pipe.infos(), seeds, None);
    record.append_to(&a.out)?;
    println!("{}", json!({"run_id": record.run_id, "points": points.len(), "failed": failed, "out": a.out}));
    Ok(EXIT_OK)
}
