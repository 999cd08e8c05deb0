use clap::Parser;

fn main() {
    let cli = actstore_cli::Cli::parse();
    match actstore_cli::run(cli.command) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
