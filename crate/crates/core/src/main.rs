use clap::Parser;
use marginflow::cli;

fn main() {
    let parsed = cli::Cli::try_parse();
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            // help/version are successes; anything else is a usage error
            let code = if e.use_stderr() { cli::EXIT_USAGE } else { cli::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = cli::dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code_for(&e));
    }
}
