fn main() {
    std::process::exit(generalist::harness::cli::run(std::env::args_os()));
}
