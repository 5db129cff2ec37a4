use clap::Parser;

fn main() {
    let cli = mrcn_cli::Cli::parse();
    if let Err(err) = mrcn_cli::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(mrcn_cli::exit_code(&err));
    }
}
