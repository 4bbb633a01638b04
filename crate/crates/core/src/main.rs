fn main() {
    std::process::exit(favar::cli::run());
}
