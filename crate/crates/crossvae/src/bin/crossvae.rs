fn main() {
    std::process::exit(crossvae::cli::run(std::env::args_os()));
}
