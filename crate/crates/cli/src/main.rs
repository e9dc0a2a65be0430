use clap::error::ErrorKind as ClapKind;
use clap::Parser;
use lfmark::error::{CliError, EXIT_OK};
use lfmark::Cli;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            let _ = e.print();
            std::process::exit(EXIT_OK);
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::config(e.kind().to_string());
            eprintln!("{}", err.record());
            std::process::exit(err.exit_code());
        }
    };
    let code = match lfmark::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    };
    std::process::exit(code);
}
