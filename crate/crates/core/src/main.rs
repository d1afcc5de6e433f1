fn main() {
    std::process::exit(spree::cli::run(std::env::args_os()));
}
