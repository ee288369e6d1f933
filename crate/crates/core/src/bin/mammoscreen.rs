fn main() {
    std::process::exit(mammoscreen::cli::run(std::env::args_os()));
}
