fn main() {
    std::process::exit(emeter::cli::run());
}
