use clap::Parser;

fn main() {
    let cli = huddle_cli::Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .init();
    std::process::exit(huddle_cli::run(cli));
}
