fn main() {
    std::process::exit(messm::cli::run(std::env::args_os()));
}
