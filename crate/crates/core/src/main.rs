use clap::Parser;
use styledomain::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse(), &mut std::io::stdout().lock())
}
