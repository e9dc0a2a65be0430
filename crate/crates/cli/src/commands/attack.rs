use lfmark_core::attacks::{check_battery, default_battery, load_battery};
use lfmark_core::{metrics, registry, AttackSpec};
use serde_json::json;

use crate::cli::AttackArgs;
use crate::error::{CliError, CliResult, ConfigContext, EXIT_OK};
use crate::io;

pub(crate) fn battery_or_default(path: Option<&std::path::Path>) -> CliResult<Vec<AttackSpec>> {
    match path {
        Some(p) => load_battery(p).config_ctx(&format!("battery {}", p.display())),
        None => Ok(default_battery()),
    }
}

pub fn run(a: AttackArgs) -> CliResult<i32> {
    let battery = battery_or_default(a.battery.as_deref())?;
    check_battery(&battery).config_ctx("battery")?;
    let paths = io::collect_images(&a.inputs)?;
    io::ensure_dir(&a.out)?;
    for spec in &battery {
        io::ensure_dir(&a.out.join(spec.label()))?;
    }
    for p in &paths {
        let img = io::load_image(p, None)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for spec in &battery {
            let attacked = spec
                .apply(&img, registry())
                .map_err(|e| CliError::from(e).prefixed(&format!("{} on {}", spec.label(), io::image_id(p))))?;
            let dest = a.out.join(spec.label()).join(format!("{stem}.png"));
            attacked.save(&dest)?;
            let psnr = if attacked.same_shape(&img) { metrics::psnr(&img, &attacked)? } else { f64::NAN };
            println!(
                "{}",
                json!({"image": io::image_id(p), "attack": spec.label(), "path": dest, "psnr": psnr})
            );
        }
    }
    Ok(EXIT_OK)
}
