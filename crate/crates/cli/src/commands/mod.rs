mod attack;
mod detect;
mod embed;
mod evaluate;
mod keygen;
mod sweep;

use crate::cli::{Cli, Command};
use crate::error::CliResult;

pub use evaluate::{TABLE_SCHEMA_VERSION, ROC_SCHEMA_VERSION};
pub use sweep::SWEEP_SCHEMA_VERSION;

/// Runs one command; the value is the process exit status on success.
pub fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::GenKey(a) => keygen::run(a),
        Command::Embed(a) => embed::run(a),
        Command::Decode(a) => detect::run_decode(a),
        Command::Detect(a) => detect::run_detect(a),
        Command::Attack(a) => attack::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Sweep(a) => sweep::run(a),
    }
}

pub(crate) fn parse_message(text: &str) -> CliResult<lfmark_core::Message> {
    use crate::error::ConfigContext;
    text.parse().config_ctx("message")
}
