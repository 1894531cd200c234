fn main() {
    std::process::exit(couplformer::cli::run(std::env::args_os()));
}
