use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    docsynth_cli::app::run(docsynth_cli::app::Cli::parse())
}
