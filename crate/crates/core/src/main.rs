fn main() {
    std::process::exit(diffaug::cli::run(std::env::args_os()));
}
