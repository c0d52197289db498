use clap::Parser;

fn main() {
    let cli = monoprobe_service::cli::Cli::parse();
    if let Err(e) = monoprobe_service::cli::run(cli) {
        eprintln!("error: {e}");
        let mut source = e.source();
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}
