use lfmark_core::keys::save_key;
use lfmark_core::{generate_key, KeyScheme};
use serde_json::json;

use crate::cli::GenKeyArgs;
use crate::error::{CliResult, ConfigContext, EXIT_OK};

pub fn run(a: GenKeyArgs) -> CliResult<i32> {
    let scheme: KeyScheme = a.scheme.parse().config_ctx("scheme")?;
    let key = generate_key(a.bits, a.feature_dim, scheme, a.seed, a.margin).config_ctx("key")?;
    save_key(&key, &a.out)?;
    println!(
        "{}",
        json!({"key": a.out, "key_id": key.key_id(), "bits": key.bits(), "feature_dim": key.feature_dim()})
    );
    Ok(EXIT_OK)
}
