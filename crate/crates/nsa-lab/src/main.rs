use nsa_lab::cli;

fn main() {
    let cli = match cli::parse_args(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => e.exit(), // help/version exit 0, usage errors exit 2
    };
    std::process::exit(cli::run(cli));
}
