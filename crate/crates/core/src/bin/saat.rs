use clap::Parser;

fn main() {
    let cli = saat::cli::Cli::parse();
    if let Err(e) = saat::cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
