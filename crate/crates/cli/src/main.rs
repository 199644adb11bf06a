mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fimmerge_core::Error>() {
        Some(e) if e.is_io_or_format() => 2,
        _ => 1,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FIMMERGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| fimmerge_core::Error::InvalidArgument(format!("FIMMERGE_THREADS=`{v}`")))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    init_threads()?;
    log::debug!("{cli:?}");
    match &cli.command {
        Command::Fim(a) => commands::fim(cli, a),
        Command::Merge(a) => commands::merge_cmd(cli, a),
        Command::Verify(a) => commands::verify(cli, a),
        Command::AnalyzeNl(a) => commands::analyze_nl_cmd(cli, a),
        Command::MicroPair(a) => commands::micro_pair(cli, a),
        Command::Sweep(a) => commands::sweep(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
