use clap::Parser;

fn main() {
    let cli = hdvila_runtime::cli::Cli::parse();
    if let Err(e) = hdvila_runtime::init_threads().and_then(|()| hdvila_runtime::cli::run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
