fn main() {
    std::process::exit(resilient_fusion::cli::run(std::env::args_os()));
}
