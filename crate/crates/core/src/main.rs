fn main() {
    std::process::exit(foldctc::cli::run(std::env::args_os()));
}
