use clap::Parser;
use mifuse_cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Err(e) = execute(cli, &mut out) {
        eprintln!("error: {e}");
        std::process::exit(e.code as i32);
    }
}
