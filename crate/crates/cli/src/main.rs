fn main() {
    std::process::exit(tlc_cli::run_cli(std::env::args_os()));
}
