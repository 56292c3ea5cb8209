fn main() {
    std::process::exit(looc::cli::run());
}
