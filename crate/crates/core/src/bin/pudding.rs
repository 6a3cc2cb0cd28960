fn main() {
    std::process::exit(pudding::cli::run(std::env::args_os()));
}
