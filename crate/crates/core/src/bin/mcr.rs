fn main() {
    std::process::exit(mcr_core::cli::run(std::env::args()));
}
