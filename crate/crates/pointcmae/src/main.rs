fn main() {
    std::process::exit(pointcmae::cli::run());
}
