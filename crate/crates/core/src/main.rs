fn main() {
    std::process::exit(ulda::cli::run(std::env::args_os()));
}
