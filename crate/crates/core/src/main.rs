fn main() {
    std::process::exit(dormancy::cli::run(std::env::args_os()));
}
