fn main() {
    std::process::exit(fog::cli::run_args(std::env::args_os()));
}
