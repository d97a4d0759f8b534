use clap::Parser;

fn main() {
    let cli = matw::cli::Cli::parse();
    let code = match matw::cli::run(cli) {
        Ok(status) => status.code(),
        Err(e) => {
            eprintln!("error: {:#}", anyhow::Error::from(e));
            1
        }
    };
    std::process::exit(code);
}
