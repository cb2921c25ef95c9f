fn main() {
    std::process::exit(chaosmark::cli::run(std::env::args_os()));
}
