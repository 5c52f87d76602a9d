fn main() {
    std::process::exit(semimae::cli::run(std::env::args_os()));
}
