fn main() {
    std::process::exit(dpse_cli::run(std::env::args_os()));
}
