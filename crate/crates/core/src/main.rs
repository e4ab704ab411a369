fn main() {
    std::process::exit(rectflow::cli::run_cli(std::env::args_os()));
}
