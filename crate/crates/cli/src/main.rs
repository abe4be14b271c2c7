fn main() {
    std::process::exit(segflow_cli::run(std::env::args_os()));
}
