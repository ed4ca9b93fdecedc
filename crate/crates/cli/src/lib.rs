//! Command-line pipeline around the `dpcpl` core: config resolution,
//! artifact layout, and the subcommand implementations.

pub mod cli;
pub mod commands;
pub mod config;
pub mod pipeline;

/// Run the CLI against `std::env::args`, returning the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    cli::run_from(std::env::args_os())
}
