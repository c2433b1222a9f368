fn main() {
    std::process::exit(teal::cli::run());
}
