use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use lfmark_core::embed::StepRecord;
use lfmark_core::{embed, metrics, random_message, Message};
use serde::Serialize;
use serde_json::json;

use crate::cli::EmbedArgs;
use crate::config::{resolve_embed, Pipeline, RunConfig};
use crate::error::{CliError, CliResult, EXIT_OK};
use crate::eval::par_map;
use crate::io::{self, JsonlWriter, Manifest, ManifestEntry, MANIFEST_FILE};
use crate::record::RunRecord;

pub const EMBED_SUMMARY_FILE: &str = "embed.jsonl";

#[derive(Serialize)]
struct EmbedSummary {
    image: String,
    source: PathBuf,
    key_id: String,
    message: Message,
    decoded: Message,
    bit_accuracy: f64,
    psnr: f64,
    ssim: f64,
    steps: usize,
    learning_rate: Option<f64>,
    final_loss: Option<StepRecord>,
}

pub fn run(a: EmbedArgs) -> CliResult<i32> {
    // everything that can be checked up front, before any output exists
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let key = io::load_key_file(&a.key)?;
    let fixed = a.message.as_deref().map(super::parse_message).transpose()?;
    if let Some(m) = &fixed {
        if m.len() != key.bits() {
            return Err(CliError::config(format!("message has {} bits, key carries {}", m.len(), key.bits())));
        }
    }
    let message_seed = a.message_seed.unwrap_or(0);
    let sources = io::collect_images(&a.images)?;
    let mut names = BTreeSet::new();
    let outputs: Vec<String> = sources
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = format!("{stem}.png");
            if names.insert(name.clone()) {
                Ok(name)
            } else {
                Err(CliError::config(format!("two inputs map to the output name {name}")))
            }
        })
        .collect::<CliResult<_>>()?;
    let pipe = Pipeline::resolve(&cfg.backends)?;
    if key.feature_dim() != pipe.feature.feature_dim() {
        return Err(CliError::config(format!(
            "key feature dimension {} does not match encoder `{}` ({})",
            key.feature_dim(),
            pipe.feature.name(),
            pipe.feature.feature_dim()
        )));
    }
    let messages: Vec<Message> = (0..sources.len())
        .map(|i| match &fixed {
            Some(m) => Ok(m.clone()),
            None => random_message(key.bits(), message_seed.wrapping_add(i as u64)),
        })
        .collect::<lfmark_core::Result<_>>()?;

    io::ensure_dir(&a.out)?;
    let summaries = JsonlWriter::create(&a.out.join(EMBED_SUMMARY_FILE))?;
    let key_id = key.key_id();
    let results = par_map(&sources, a.jobs, |i, src| -> CliResult<ManifestEntry> {
        let cover = io::load_image(src, cfg.resolution)?;
        let embed_cfg = resolve_embed(&cfg.embed, pipe.codec.as_ref(), cover.height(), cover.width())?;
        let res = embed(
            &cover,
            &key,
            &messages[i],
            pipe.codec.as_ref(),
            pipe.feature.as_ref(),
            pipe.perceptual.as_ref(),
            &embed_cfg,
        )
        .map_err(|e| CliError::from(e).prefixed(&io::image_id(src)))?;
        let quantized = res.quantized()?;
        quantized.save(a.out.join(&outputs[i]))?;
        summaries.write(&EmbedSummary {
            image: outputs[i].clone(),
            source: src.clone(),
            key_id: key_id.clone(),
            message: messages[i].clone(),
            decoded: res.decoded.clone(),
            bit_accuracy: res.final_bit_accuracy_clean,
            psnr: res.final_psnr,
            ssim: metrics::ssim(&cover, &quantized).unwrap_or(f64::NAN),
            steps: res.loss_trace.len(),
            learning_rate: embed_cfg.learning_rate,
            final_loss: res.loss_trace.last().cloned(),
        })?;
        Ok(ManifestEntry {
            image: outputs[i].clone(),
            message: messages[i].clone(),
            key_id: key_id.clone(),
            source: Some(src.clone()),
            bit_accuracy: Some(res.final_bit_accuracy_clean),
            psnr: Some(res.final_psnr),
        })
    });
    let entries = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let perfect = entries.iter().filter(|e| e.bit_accuracy == Some(1.0)).count();
    Manifest::new(entries).save(&a.out.join(MANIFEST_FILE))?;

    let arguments = json!({
        "images": sources,
        "message": a.message,
        "message_seed": message_seed,
    });
    let seeds = BTreeMap::from([("embed".to_string(), cfg.embed.seed), ("message".to_string(), message_seed)]);
    let record = RunRecord::new("embed", cfg.snapshot(), arguments, pipe.infos(), seeds, Some(key_id));
    record.append_to(&a.out)?;
    println!(
        "{}",
        json!({"run_id": record.run_id, "images": sources.len(), "perfect": perfect, "out": a.out})
    );
    Ok(EXIT_OK)
}
