use clap::Parser;
use permweld::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = permweld::run(cli) {
        eprintln!("permweld: {e}");
        std::process::exit(e.exit_code());
    }
}
