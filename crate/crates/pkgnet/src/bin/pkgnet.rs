use clap::Parser;

fn main() {
    let cli = match pkgnet::cli::Cli::try_parse() {
        Ok(cli) => cli,
        // Help and version requests print in full; real parse errors are
        // condensed to the single-line form the rest of the CLI uses.
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments");
            eprintln!("error[cli]: {}", first.trim_start_matches("error: "));
            std::process::exit(1);
        }
        Err(e) => e.exit(),
    };
    if let Err(e) = pkgnet::cli::run(cli) {
        eprintln!("error[{}]: {e}", e.code());
        std::process::exit(1);
    }
}
