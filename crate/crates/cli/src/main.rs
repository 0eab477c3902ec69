use clap::Parser;

fn main() {
    let cli = sfm_cli::Cli::parse();
    if let Err(err) = sfm_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(sfm_cli::exit_code(&err));
    }
}
