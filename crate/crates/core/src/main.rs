use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MARS_LOG", "warn")).init();
    let cli = mars_core::cli::Cli::parse();
    std::process::exit(mars_core::cli::run(&cli));
}
